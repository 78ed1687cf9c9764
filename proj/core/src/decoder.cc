#include "fss/decoder.h"

#include <cmath>

#include "fss/random.h"

namespace fss {

const char* fusion_name(Fusion f) { return f == Fusion::kEarly ? "early" : "late"; }

Fusion parse_fusion(const std::string& s) {
  if (s == "early") return Fusion::kEarly;
  if (s == "late") return Fusion::kLate;
  throw ConfigError("fusion must be 'early' or 'late', got '" + s + "'");
}

void DecoderConfig::validate() const {
  if (d == 0 || gn_groups == 0 || d % gn_groups != 0) {
    throw ConfigError("hidden width d=" + std::to_string(d) + " must be a positive multiple of gn_groups=" +
                      std::to_string(gn_groups));
  }
  if (num_dscm < 1) throw ConfigError("num_dscm must be at least 1");
  if (dscm_repeats < 1) throw ConfigError("dscm_repeats must be at least 1");
  if (support_stride != 1 && support_stride != 2) {
    throw ConfigError("support_stride must be 1 or 2, got " + std::to_string(support_stride));
  }
  vision_channels(m);
  if (fusion == Fusion::kLate && use_text && (d % 2 != 0 || (d / 2) % gn_groups != 0)) {
    throw ConfigError("late fusion with text needs d/2 divisible by gn_groups");
  }
}

std::size_t DecoderConfig::encoder_channels() const {
  return vision_channels(m) + (fusion == Fusion::kEarly && use_text ? 1 : 0);
}

// ---------------------------------------------------------------------------

template <typename T>
void BasicDecoderParams<T>::add(std::string name, BasicTensor<T> value) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
  index_.emplace(name, tensors_.size());
  tensors_.emplace_back(std::move(name), std::move(value));
}

template <typename T>
std::size_t BasicDecoderParams<T>::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named " + name);
  return it->second;
}

template <typename T>
void BasicDecoderParams<T>::zero_grad() {
  for (auto& p : tensors_) p.zero_grad();
}

namespace {

std::string dscm_prefix(std::size_t block, std::size_t repeat) {
  return "dscm" + std::to_string(block) + "." + std::to_string(repeat) + ".";
}

template <typename T>
class Initializer {
 public:
  Initializer(BasicDecoderParams<T>& out, std::uint64_t seed) : out_(out), rng_(rnd::derive(seed, 0x1417)) {}

  void weight(const std::string& name, Shape dims, std::size_t fan_in) {
    const double a = std::sqrt(1.0 / static_cast<double>(fan_in));
    BasicTensor<T> t(std::move(dims));
    for (T& v : t.values()) v = static_cast<T>(rnd::uniform(rng_, -a, a));
    out_.add(name, std::move(t));
  }
  void zeros(const std::string& name, Shape dims) { out_.add(name, BasicTensor<T>(std::move(dims))); }
  void group_norm(const std::string& prefix, std::size_t c) {
    out_.add(prefix + "gamma", BasicTensor<T>({c}, T{1}));
    out_.add(prefix + "beta", BasicTensor<T>({c}, T{0}));
  }
  void conv(const std::string& prefix, std::size_t co, std::size_t ci, std::size_t k) {
    weight(prefix + "weight", {co, ci, k, k}, ci * k * k);
    zeros(prefix + "bias", {co});
  }

 private:
  BasicDecoderParams<T>& out_;
  rnd::Engine rng_;
};

}  // namespace

template <typename T>
BasicDecoderParams<T> init_params(const DecoderConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.d, l = config.encoder_channels();
  BasicDecoderParams<T> params;
  Initializer<T> init(params, seed);

  init.weight("enc.wq", {d, l, 3, 3}, 18 * l);
  init.weight("enc.ws", {d, l, 3, 3}, 18 * l);
  init.zeros("enc.bias", {d});
  init.group_norm("enc.gn.", d);

  for (std::size_t b = 0; b < config.num_dscm; ++b) {
    for (std::size_t r = 0; r < config.dscm_repeats; ++r) {
      const std::string pre = dscm_prefix(b, r);
      init.weight(pre + "dw.wq", {d, 3, 3}, 18);
      init.weight(pre + "dw.ws", {d, 3, 3}, 18);
      init.weight(pre + "pw.weight", {d, d}, d);
      init.zeros(pre + "pw.bias", {d});
      init.group_norm(pre + "gn.", d);
    }
  }

  if (config.fusion == Fusion::kLate && config.use_text) {
    const std::size_t t = d / 2;
    init.conv("text.conv1.", t, 1, 3);
    init.group_norm("text.gn1.", t);
    init.conv("text.conv2.", t, t, 3);
    init.group_norm("text.gn2.", t);
    init.conv("fuse.conv1.", d, d + t, 3);
    init.group_norm("fuse.gn1.", d);
    init.conv("fuse.conv2.", d, d, 3);
    init.group_norm("fuse.gn2.", d);
  }

  for (int blk = 1; blk <= 2; ++blk) {
    const std::string pre = "head.res" + std::to_string(blk) + ".";
    init.conv(pre + "conv1.", d, d, 3);
    init.group_norm(pre + "gn1.", d);
    init.conv(pre + "conv2.", d, d, 3);
    init.group_norm(pre + "gn2.", d);
  }
  init.conv("head.out.", 2, d, 3);
  return params;
}

template <typename T>
std::size_t count_params(const BasicDecoderParams<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params.tensors()) n += p.value.size();
  return n;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicDecoderInput<T> make_decoder_input(const BasicQuerySample<T>& query,
                                        const BasicSupportSample<T>& support,
                                        const BasicTextEmbedding<T>* text,
                                        const DecoderConfig& config) {
  config.validate();
  const BasicFeatureStack<T> masked = mask_support_features(support.features, support.mask);
  std::vector<BasicTensor<T>> maps = build_vision_correlations(query.features, masked, config.m);
  std::optional<BasicTensor<T>> text_map;
  if (config.use_text) {
    if (!text) throw DataError("text is enabled but no class text embedding was supplied");
    if (!query.vl_features) throw DataError("text is enabled but the query has no VL features");
    text_map = build_text_activation(*query.vl_features, *text);
  }
  BasicDecoderInput<T> in;
  if (config.fusion == Fusion::kEarly) {
    in.volume = fuse_early(maps, text_map, config.m);
  } else {
    in.volume = fuse_early(maps, std::optional<BasicTensor<T>>{}, config.m);
    in.text_map = std::move(text_map);
  }
  return in;
}

template <typename T>
ad::Var<T> ParamBinder<T>::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  ad::Var<T> v = params_ ? graph_.parameter(params_->get(name))
                         : graph_.constant(frozen_->get(name).value);
  bound_.emplace(name, v);
  return v;
}

namespace {

template <typename T>
ad::Var<T> gn(ad::Var<T> x, ParamBinder<T>& p, const std::string& prefix, const DecoderConfig& c) {
  return ad::group_norm(x, c.gn_groups, p(prefix + "gamma"), p(prefix + "beta"));
}

template <typename T>
ad::Var<T> conv(ad::Var<T> x, ParamBinder<T>& p, const std::string& prefix) {
  return ad::conv2d(x, p(prefix + "weight"), p(prefix + "bias"));
}

// conv3x3 -> GN -> ReLU -> conv3x3 -> GN, plus skip, then ReLU.
template <typename T>
ad::Var<T> residual_2d(ad::Var<T> x, ParamBinder<T>& p, const std::string& pre,
                       const DecoderConfig& c) {
  ad::Var<T> y = ad::relu(gn(conv(x, p, pre + "conv1."), p, pre + "gn1.", c));
  y = gn(conv(y, p, pre + "conv2."), p, pre + "gn2.", c);
  return ad::relu(ad::add(y, x));
}

}  // namespace

template <typename T>
ad::Var<T> encode(ad::Var<T> volume, ParamBinder<T>& p, const DecoderConfig& config) {
  const Shape& dims = volume.dims();
  if (dims.size() != 5 || dims[0] != config.encoder_channels()) {
    throw ShapeError("encoder expects " + std::to_string(config.encoder_channels()) +
                     " input channels, got volume " + shape_string(dims));
  }
  ad::Var<T> y = ad::cp4d_conv(volume, p("enc.wq"), p("enc.ws"), p("enc.bias"), config.support_stride);
  return ad::relu(gn(y, p, "enc.gn.", config));
}

template <typename T>
ad::Var<T> dscm_block(ad::Var<T> x, std::size_t block, ParamBinder<T>& p,
                      const DecoderConfig& config) {
  if (x.dims().size() != 5 || x.dims()[0] != config.d) {
    throw ShapeError("DSCM block expects d=" + std::to_string(config.d) + " channels, got " +
                     shape_string(x.dims()));
  }
  ad::Var<T> y = x;
  for (std::size_t r = 0; r < config.dscm_repeats; ++r) {
    const std::string pre = dscm_prefix(block, r);
    y = ad::dw4d_conv(y, p(pre + "dw.wq"), p(pre + "dw.ws"));
    y = ad::pw4d_conv(y, p(pre + "pw.weight"), p(pre + "pw.bias"));
    y = ad::relu(gn(y, p, pre + "gn.", config));
  }
  return ad::add(y, x);
}

template <typename T>
ad::Var<T> head_2d(ad::Var<T> map, ParamBinder<T>& p, const DecoderConfig& config,
                   std::size_t out_h, std::size_t out_w) {
  const Shape& dims = map.dims();
  if (dims.size() != 3 || dims[0] != config.d) {
    throw ShapeError("head expects a [d, h, w] map, got " + shape_string(dims));
  }
  const std::size_t h = dims[1], w = dims[2];
  if (out_h < h || out_w < w) {
    throw ConfigError("output size " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                      " is smaller than the feature grid " + std::to_string(h) + "x" +
                      std::to_string(w));
  }
  ad::Var<T> y = ad::bilinear_resize(map, 2 * h, 2 * w);
  y = residual_2d(y, p, "head.res1.", config);
  y = residual_2d(y, p, "head.res2.", config);
  y = conv(y, p, "head.out.");
  if (out_h != 2 * h || out_w != 2 * w) y = ad::bilinear_resize(y, out_h, out_w);
  return y;
}

template <typename T>
ad::Var<T> decode_head(ad::Var<T> x, ParamBinder<T>& p, const DecoderConfig& config,
                       std::size_t out_h, std::size_t out_w) {
  return head_2d(ad::avg_over_support_dims(x), p, config, out_h, out_w);
}

template <typename T>
ad::Var<T> forward(ParamBinder<T>& p, const DecoderConfig& config,
                   const BasicDecoderInput<T>& input, std::size_t out_h, std::size_t out_w) {
  config.validate();
  ad::Graph<T>& g = p.graph();
  ad::Var<T> x = encode(g.constant(input.volume.tensor), p, config);
  for (std::size_t b = 0; b < config.num_dscm; ++b) x = dscm_block(x, b, p, config);
  if (config.fusion == Fusion::kEarly || !config.use_text) {
    return decode_head(x, p, config, out_h, out_w);
  }
  if (!input.text_map) throw DataError("late fusion with text needs a text activation map");
  const BasicTensor<T>& tm = *input.text_map;
  expect_rank(tm, 2, "text map");
  ad::Var<T> vision = ad::avg_over_support_dims(x);
  ad::Var<T> t = g.constant(tm.reshaped({1, tm.dim(0), tm.dim(1)}));
  t = ad::relu(gn(conv(t, p, "text.conv1."), p, "text.gn1.", config));
  t = ad::relu(gn(conv(t, p, "text.conv2."), p, "text.gn2.", config));
  ad::Var<T> f = ad::concat_channels(std::vector<ad::Var<T>>{vision, t});
  f = ad::relu(gn(conv(f, p, "fuse.conv1."), p, "fuse.gn1.", config));
  f = ad::relu(gn(conv(f, p, "fuse.conv2."), p, "fuse.gn2.", config));
  return head_2d(f, p, config, out_h, out_w);
}

template <typename T>
BasicTensor<T> infer_logits(const BasicDecoderParams<T>& params, const DecoderConfig& config,
                            const BasicDecoderInput<T>& input, std::size_t out_h,
                            std::size_t out_w) {
  ad::Graph<T> g;
  ParamBinder<T> p(g, params);
  return forward(p, config, input, out_h, out_w).value();
}

#define FSS_INSTANTIATE_DECODER(T)                                                            \
  template class BasicDecoderParams<T>;                                                      \
  template class ParamBinder<T>;                                                             \
  template BasicDecoderParams<T> init_params(const DecoderConfig&, std::uint64_t);           \
  template std::size_t count_params(const BasicDecoderParams<T>&);                           \
  template BasicDecoderInput<T> make_decoder_input(const BasicQuerySample<T>&,               \
                                                   const BasicSupportSample<T>&,             \
                                                   const BasicTextEmbedding<T>*,             \
                                                   const DecoderConfig&);                    \
  template ad::Var<T> encode(ad::Var<T>, ParamBinder<T>&, const DecoderConfig&);             \
  template ad::Var<T> dscm_block(ad::Var<T>, std::size_t, ParamBinder<T>&,                   \
                                 const DecoderConfig&);                                      \
  template ad::Var<T> head_2d(ad::Var<T>, ParamBinder<T>&, const DecoderConfig&,             \
                              std::size_t, std::size_t);                                     \
  template ad::Var<T> decode_head(ad::Var<T>, ParamBinder<T>&, const DecoderConfig&,         \
                                  std::size_t, std::size_t);                                 \
  template ad::Var<T> forward(ParamBinder<T>&, const DecoderConfig&,                         \
                              const BasicDecoderInput<T>&, std::size_t, std::size_t);        \
  template BasicTensor<T> infer_logits(const BasicDecoderParams<T>&, const DecoderConfig&,   \
                                       const BasicDecoderInput<T>&, std::size_t, std::size_t);

FSS_INSTANTIATE_DECODER(float)
FSS_INSTANTIATE_DECODER(double)

#undef FSS_INSTANTIATE_DECODER

}  // namespace fss
