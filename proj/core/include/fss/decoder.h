#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fss/autodiff.h"
#include "fss/knowledge.h"
#include "fss/tensor.h"

namespace fss {

enum class Fusion { kEarly, kLate };

const char* fusion_name(Fusion f);
Fusion parse_fusion(const std::string& s);  // "early" | "late", else ConfigError

struct DecoderConfig {
  std::size_t d = 96;
  std::size_t gn_groups = 4;
  std::size_t num_dscm = 2;
  std::size_t dscm_repeats = 3;
  int support_stride = 2;
  Fusion fusion = Fusion::kEarly;
  int m = 1;
  bool use_text = true;

  // Throws ConfigError on any inconsistent field.
  void validate() const;

  // Channels of the 4D volume entering the encoder.
  std::size_t encoder_channels() const;

  bool operator==(const DecoderConfig&) const = default;
};

// Every learnable tensor in a fixed order, addressable by name.
template <typename T>
class BasicDecoderParams {
 public:
  std::vector<ad::ParamTensor<T>>& tensors() { return tensors_; }
  const std::vector<ad::ParamTensor<T>>& tensors() const { return tensors_; }

  void add(std::string name, BasicTensor<T> value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const;
  ad::ParamTensor<T>& get(const std::string& name) { return tensors_[index_of(name)]; }
  const ad::ParamTensor<T>& get(const std::string& name) const {
    return tensors_[index_of(name)];
  }

  void zero_grad();

  template <typename U>
  BasicDecoderParams<U> cast() const {
    BasicDecoderParams<U> out;
    for (const auto& p : tensors_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

 private:
  std::vector<ad::ParamTensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

using DecoderParams = BasicDecoderParams<float>;

// Uniform(-a, a) weights with a = sqrt(1 / fan_in), zero biases, GN gamma 1
// and beta 0. fan_in counts every input term of one output value, so a
// center-pivot kernel over ci channels has fan_in 18 * ci.
template <typename T>
BasicDecoderParams<T> init_params(const DecoderConfig& config, std::uint64_t seed);

template <typename T>
std::size_t count_params(const BasicDecoderParams<T>& params);

// What the network consumes for one (query, support) pair.
template <typename T>
struct BasicDecoderInput {
  // Early fusion: vision maps plus the text channel when enabled.
  // Late fusion: vision maps only.
  BasicFusedVolume<T> volume;
  // Late fusion with text only: the [h, w] text activation map.
  std::optional<BasicTensor<T>> text_map;
};

using DecoderInput = BasicDecoderInput<float>;

// Builds the decoder input from features. `text` and the query VL features
// are required when config.use_text is set (DataError otherwise).
template <typename T>
BasicDecoderInput<T> make_decoder_input(const BasicQuerySample<T>& query,
                                        const BasicSupportSample<T>& support,
                                        const BasicTextEmbedding<T>* text,
                                        const DecoderConfig& config);

// Binds named parameters into a graph on first use. A binder built from a
// const parameter set binds copies as constants, so nothing in the graph
// requires a gradient.
template <typename T>
class ParamBinder {
 public:
  ParamBinder(ad::Graph<T>& graph, BasicDecoderParams<T>& params)
      : graph_(graph), params_(&params), frozen_(&params) {}
  ParamBinder(ad::Graph<T>& graph, const BasicDecoderParams<T>& params)
      : graph_(graph), frozen_(&params) {}

  ad::Var<T> operator()(const std::string& name);
  ad::Graph<T>& graph() { return graph_; }

 private:
  ad::Graph<T>& graph_;
  BasicDecoderParams<T>* params_ = nullptr;
  const BasicDecoderParams<T>* frozen_ = nullptr;
  std::map<std::string, ad::Var<T>> bound_;
};

// cp4d(l -> d, support stride) -> GN -> ReLU.
template <typename T>
ad::Var<T> encode(ad::Var<T> volume, ParamBinder<T>& p, const DecoderConfig& config);

// x + F(x), F = dscm_repeats x (dw4d -> pw4d -> GN -> ReLU). `block` picks
// the parameter set.
template <typename T>
ad::Var<T> dscm_block(ad::Var<T> x, std::size_t block, ParamBinder<T>& p,
                      const DecoderConfig& config);

// Pools a [d, h, w, h', w'] volume over the support dims and runs the 2D head.
template <typename T>
ad::Var<T> decode_head(ad::Var<T> x, ParamBinder<T>& p, const DecoderConfig& config,
                       std::size_t out_h, std::size_t out_w);

// The 2D part of the head, from a [d, h, w] map to [2, out_h, out_w] logits.
template <typename T>
ad::Var<T> head_2d(ad::Var<T> map, ParamBinder<T>& p, const DecoderConfig& config,
                   std::size_t out_h, std::size_t out_w);

// Full network: raw logits [2, out_h, out_w].
template <typename T>
ad::Var<T> forward(ParamBinder<T>& p, const DecoderConfig& config,
                   const BasicDecoderInput<T>& input, std::size_t out_h, std::size_t out_w);

// Forward pass without a caller-visible graph; returns the logits.
template <typename T>
BasicTensor<T> infer_logits(const BasicDecoderParams<T>& params, const DecoderConfig& config,
                            const BasicDecoderInput<T>& input, std::size_t out_h,
                            std::size_t out_w);

}  // namespace fss
