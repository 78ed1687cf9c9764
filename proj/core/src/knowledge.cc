#include "fss/knowledge.h"

#include <cmath>

#include "fss/kernels.h"

namespace fss {

template <typename T>
BasicFeatureStack<T> BasicFeatureStack<T>::from_tensor(const BasicTensor<T>& stacked,
                                                       std::string backbone_id) {
  expect_rank(stacked, 4, "feature stack");
  if (stacked.dim(0) != kNumLayers) {
    throw ShapeError("feature stack needs 12 layers, got " + std::to_string(stacked.dim(0)));
  }
  const Shape layer_dims{stacked.dim(1), stacked.dim(2), stacked.dim(3)};
  const std::size_t n = shape_size(layer_dims);
  BasicFeatureStack out;
  out.backbone_id = std::move(backbone_id);
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    const T* src = stacked.data() + l * n;
    out.layers.emplace_back(layer_dims, std::vector<T>(src, src + n));
  }
  return out;
}

template <typename T>
void BasicFeatureStack<T>::validate() const {
  if (layers.size() != kNumLayers) {
    throw ShapeError("feature stack needs 12 layers, got " + std::to_string(layers.size()));
  }
  expect_rank(layers[0], 3, "feature layer");
  for (const auto& l : layers) expect_dims(l, layers[0].dims(), "feature layer");
}

template <typename T>
void BasicTextEmbedding<T>::validate() const {
  expect_rank(vector, 1, "text embedding");
  double n = 0;
  for (T v : vector.values()) n += static_cast<double>(v) * v;
  if (n == 0) throw DataError("text embedding of class " + std::to_string(class_id) + " has zero norm");
}

std::size_t vision_channels(int m) {
  if (m < 1 || m > static_cast<int>(kNumLayers)) {
    throw ConfigError("layer range start m must be in 1..12, got " + std::to_string(m));
  }
  return kNumLayers - static_cast<std::size_t>(m) + 1;
}

template <typename T>
BasicTensor<T> soft_mask(const BasicTensor<T>& mask, std::size_t h, std::size_t w) {
  expect_rank(mask, 2, "mask");
  BasicTensor<T> m3 = mask.reshaped({1, mask.dim(0), mask.dim(1)});
  return kernels::bilinear_resize(m3, h, w).reshaped({h, w});
}

template <typename T>
BasicFeatureStack<T> mask_support_features(const BasicFeatureStack<T>& stack,
                                           const BasicTensor<T>& mask) {
  stack.validate();
  kernels::expect_binary(mask, "support mask");
  bool any = false;
  for (T v : mask.values()) any = any || v != T{0};
  if (!any) throw DataError("support mask is empty");
  const std::size_t h = stack.h(), w = stack.w(), c = stack.c();
  const BasicTensor<T> soft = soft_mask(mask, h, w);
  BasicFeatureStack<T> out = stack;
  for (auto& layer : out.layers) {
    T* p = layer.data();
    for (std::size_t i = 0; i < h * w; ++i) {
      const T s = soft[i];
      for (std::size_t k = 0; k < c; ++k) p[i * c + k] *= s;
    }
  }
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> build_vision_correlations(const BasicFeatureStack<T>& query,
                                                      const BasicFeatureStack<T>& masked_support,
                                                      int m) {
  const std::size_t count = vision_channels(m);
  query.validate();
  masked_support.validate();
  expect_dims(masked_support.layers[0], query.layers[0].dims(), "support features");
  const std::size_t h = query.h(), w = query.w(), c = query.c();
  std::vector<BasicTensor<T>> maps;
  maps.reserve(count);
  for (std::size_t l = kNumLayers - count; l < kNumLayers; ++l) {
    BasicTensor<T> q = query.layers[l].reshaped({h * w, c});
    BasicTensor<T> s = masked_support.layers[l].reshaped({h * w, c});
    maps.push_back(kernels::cosine_similarity_map(q, s).reshaped({h, w, h, w}));
  }
  return maps;
}

template <typename T>
BasicTensor<T> build_text_activation(const BasicTensor<T>& query_vl,
                                     const BasicTextEmbedding<T>& text) {
  expect_rank(query_vl, 3, "query VL features");
  text.validate();
  const std::size_t h = query_vl.dim(0), w = query_vl.dim(1), c = query_vl.dim(2);
  if (text.vector.dim(0) != c) {
    throw ShapeError("text embedding has " + std::to_string(text.vector.dim(0)) +
                     " channels, VL features have " + std::to_string(c));
  }
  return kernels::cosine_similarity_map(query_vl.reshaped({h * w, c}), text.vector.reshaped({1, c}))
      .reshaped({h, w});
}

template <typename T>
BasicFusedVolume<T> fuse_early(const std::vector<BasicTensor<T>>& vision_maps,
                               const std::optional<BasicTensor<T>>& text_map, int m) {
  if (vision_maps.empty()) throw ShapeError("fuse_early needs at least one vision map");
  if (vision_maps.size() != vision_channels(m)) {
    throw ShapeError("expected " + std::to_string(vision_channels(m)) +
                     " vision maps for m=" + std::to_string(m) + ", got " +
                     std::to_string(vision_maps.size()));
  }
  const Shape& d = vision_maps[0].dims();
  if (d.size() != 4) throw ShapeError("vision maps must be [h, w, h, w]");
  for (const auto& v : vision_maps) expect_dims(v, d, "vision map");
  const std::size_t hw = d[0] * d[1], support = d[2] * d[3];
  const std::size_t l = vision_maps.size() + (text_map ? 1 : 0);
  std::vector<T> values;
  values.reserve(l * hw * support);
  for (const auto& v : vision_maps) values.insert(values.end(), v.values().begin(), v.values().end());
  if (text_map) {
    expect_dims(*text_map, {d[0], d[1]}, "text map");
    for (std::size_t i = 0; i < hw; ++i) values.insert(values.end(), support, (*text_map)[i]);
  }
  BasicFusedVolume<T> out;
  out.tensor = BasicTensor<T>({l, d[0], d[1], d[2], d[3]}, std::move(values));
  out.layer_range_m = m;
  out.has_text_channel = text_map.has_value();
  return out;
}

template <typename T>
BasicTensor<T> averaged_activation_map(const BasicTensor<T>& corr) {
  expect_rank(corr, 4, "correlation map");
  return kernels::avg_over_support_dims(corr);
}

#define FSS_INSTANTIATE_KNOWLEDGE(T)                                                          \
  template struct BasicFeatureStack<T>;                                                      \
  template struct BasicTextEmbedding<T>;                                                     \
  template BasicTensor<T> soft_mask(const BasicTensor<T>&, std::size_t, std::size_t);        \
  template BasicFeatureStack<T> mask_support_features(const BasicFeatureStack<T>&,           \
                                                      const BasicTensor<T>&);                \
  template std::vector<BasicTensor<T>> build_vision_correlations(                            \
      const BasicFeatureStack<T>&, const BasicFeatureStack<T>&, int);                        \
  template BasicTensor<T> build_text_activation(const BasicTensor<T>&,                       \
                                                const BasicTextEmbedding<T>&);               \
  template BasicFusedVolume<T> fuse_early(const std::vector<BasicTensor<T>>&,                \
                                          const std::optional<BasicTensor<T>>&, int);        \
  template BasicTensor<T> averaged_activation_map(const BasicTensor<T>&);

FSS_INSTANTIATE_KNOWLEDGE(float)
FSS_INSTANTIATE_KNOWLEDGE(double)

#undef FSS_INSTANTIATE_KNOWLEDGE

}  // namespace fss
