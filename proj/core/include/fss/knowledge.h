#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "fss/tensor.h"

// Correlation volumes built from frozen backbone features.
namespace fss {

inline constexpr std::size_t kNumLayers = 12;

// Per-image features after each of the 12 backbone blocks, each [h, w, c].
template <typename T>
struct BasicFeatureStack {
  std::vector<BasicTensor<T>> layers;
  std::string backbone_id;

  // Splits a [12, h, w, c] tensor into layers.
  static BasicFeatureStack from_tensor(const BasicTensor<T>& stacked, std::string backbone_id = {});

  // Throws ShapeError unless there are exactly 12 layers of identical rank-3 dims.
  void validate() const;
  std::size_t h() const { return layers.at(0).dim(0); }
  std::size_t w() const { return layers.at(0).dim(1); }
  std::size_t c() const { return layers.at(0).dim(2); }
};

template <typename T>
struct BasicTextEmbedding {
  BasicTensor<T> vector;  // [c_vl], nonzero norm
  int class_id = 0;
  std::string class_name;

  void validate() const;
};

template <typename T>
struct BasicSupportSample {
  BasicFeatureStack<T> features;
  BasicTensor<T> mask;  // [h0, w0], binary, nonempty
  std::optional<BasicTensor<T>> vl_features;  // [h, w, c_vl]
  int class_id = 0;
};

template <typename T>
struct BasicQuerySample {
  BasicFeatureStack<T> features;
  std::optional<BasicTensor<T>> vl_features;
  BasicTensor<T> gt_mask;  // [h0, w0], binary
};

// Correlation tensor [l, h, w, h, w]: the vision maps for layers m..12 and,
// when present, the broadcast text map as the final channel.
template <typename T>
struct BasicFusedVolume {
  BasicTensor<T> tensor;
  int layer_range_m = 1;
  bool has_text_channel = false;
};

using FeatureStack = BasicFeatureStack<float>;
using TextEmbedding = BasicTextEmbedding<float>;
using SupportSample = BasicSupportSample<float>;
using QuerySample = BasicQuerySample<float>;
using FusedVolume = BasicFusedVolume<float>;

// Number of vision maps for layer range start m (1-based, 1 = all layers).
std::size_t vision_channels(int m);

// Binary [h0, w0] mask bilinearly resized to [h, w]; values in [0, 1].
template <typename T>
BasicTensor<T> soft_mask(const BasicTensor<T>& mask, std::size_t h, std::size_t w);

// Multiplies every layer by the soft mask at the feature resolution. An
// all-zero mask raises DataError.
template <typename T>
BasicFeatureStack<T> mask_support_features(const BasicFeatureStack<T>& stack,
                                           const BasicTensor<T>& mask);

// One [h, w, h, w] ReLU-cosine map per layer m..12 (1-based), 12 - m + 1 maps.
template <typename T>
std::vector<BasicTensor<T>> build_vision_correlations(const BasicFeatureStack<T>& query,
                                                      const BasicFeatureStack<T>& masked_support,
                                                      int m);

// ReLU of the cosine between every query position and the class embedding: [h, w].
template <typename T>
BasicTensor<T> build_text_activation(const BasicTensor<T>& query_vl,
                                     const BasicTextEmbedding<T>& text);

template <typename T>
BasicFusedVolume<T> fuse_early(const std::vector<BasicTensor<T>>& vision_maps,
                               const std::optional<BasicTensor<T>>& text_map, int m = 1);

// Mean over the two support dims of an [h, w, h, w] map.
template <typename T>
BasicTensor<T> averaged_activation_map(const BasicTensor<T>& corr);

}  // namespace fss
