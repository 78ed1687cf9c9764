#include <gtest/gtest.h>

#include <random>

#include "fss/checkpoint.h"
#include "fss/decoder.h"
#include "fss/kernels.h"
#include "temp_dir.h"

namespace fss {
namespace {

DecoderConfig small_config(Fusion fusion = Fusion::kEarly, bool text = true) {
  DecoderConfig c;
  c.d = 8;
  c.gn_groups = 4;
  c.fusion = fusion;
  c.use_text = text;
  c.m = 10;  // three vision maps
  return c;
}

template <typename T>
BasicDecoderInput<T> random_input(std::mt19937_64& rng, const DecoderConfig& c, std::size_t g) {
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<BasicTensor<T>> maps;
  for (std::size_t i = 0; i < vision_channels(c.m); ++i) {
    BasicTensor<T> t({g, g, g, g});
    for (T& v : t.values()) v = static_cast<T>(u(rng));
    maps.push_back(std::move(t));
  }
  BasicTensor<T> text({g, g});
  for (T& v : text.values()) v = static_cast<T>(u(rng));
  BasicDecoderInput<T> in;
  const bool early_text = c.use_text && c.fusion == Fusion::kEarly;
  in.volume = fuse_early(maps, early_text ? std::optional<BasicTensor<T>>(text) : std::nullopt, c.m);
  if (c.use_text && c.fusion == Fusion::kLate) in.text_map = text;
  return in;
}

// Independent closed form for the parameter count of the default topology.
std::size_t closed_form_count(std::size_t d, std::size_t l, std::size_t blocks, std::size_t repeats) {
  const std::size_t encoder = 2 * d * l * 9 + d + 2 * d;
  const std::size_t repeat = 2 * d * 9 + d * d + d + 2 * d;
  const std::size_t residual = 2 * (d * d * 9 + d) + 2 * (2 * d);
  const std::size_t out = 2 * d * 9 + 2;
  return encoder + blocks * repeats * repeat + 2 * residual + out;
}

TEST(DecoderConfig, Validation) {
  DecoderConfig c;
  EXPECT_NO_THROW(c.validate());
  c.d = 10;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DecoderConfig{};
  c.num_dscm = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DecoderConfig{};
  c.dscm_repeats = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DecoderConfig{};
  c.support_stride = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_fusion("middle"), ConfigError);
  EXPECT_EQ(parse_fusion("late"), Fusion::kLate);
}

TEST(InitParams, DefaultCountMatchesClosedFormAndBudget) {
  const DecoderConfig c;
  const std::size_t n = count_params(init_params<float>(c, 0));
  EXPECT_EQ(n, closed_form_count(96, 13, 2, 3));
  EXPECT_EQ(n, 424802u);
  EXPECT_GE(n, 300000u);
  EXPECT_LE(n, 900000u);
}

TEST(InitParams, EmptyTreeCountsZero) { EXPECT_EQ(count_params(DecoderParams{}), 0u); }

TEST(InitParams, DeterministicAndGammaOne) {
  const DecoderConfig c = small_config(Fusion::kLate);
  auto a = init_params<float>(c, 42), b = init_params<float>(c, 42), other = init_params<float>(c, 43);
  ASSERT_EQ(a.tensors().size(), b.tensors().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.tensors().size(); ++i) {
    EXPECT_EQ(a.tensors()[i].name, b.tensors()[i].name);
    EXPECT_EQ(a.tensors()[i].value, b.tensors()[i].value);
    differs = differs || !(a.tensors()[i].value == other.tensors()[i].value);
    const std::string& name = a.tensors()[i].name;
    if (name.ends_with("gamma")) {
      for (float v : a.tensors()[i].value.values()) EXPECT_EQ(v, 1.0f);
    }
    if (name.ends_with("beta") || name.ends_with("bias")) {
      for (float v : a.tensors()[i].value.values()) EXPECT_EQ(v, 0.0f);
    }
  }
  EXPECT_TRUE(differs);
}

TEST(InitParams, WeightsWithinFanInBound) {
  auto p = init_params<double>(small_config(), 1);
  const std::size_t l = small_config().encoder_channels();
  const double a = std::sqrt(1.0 / (18.0 * l));
  for (double v : p.get("enc.wq").value.values()) EXPECT_LE(std::fabs(v), a);
  for (double v : p.get("head.out.weight").value.values()) EXPECT_LE(std::fabs(v), std::sqrt(1.0 / (8 * 9)));
}

TEST(InitParams, TextBranchOnlyForLateFusionWithText) {
  EXPECT_FALSE(init_params<float>(small_config(Fusion::kEarly), 0).contains("text.conv1.weight"));
  EXPECT_FALSE(init_params<float>(small_config(Fusion::kLate, false), 0).contains("text.conv1.weight"));
  EXPECT_TRUE(init_params<float>(small_config(Fusion::kLate, true), 0).contains("text.conv1.weight"));
  // Early fusion with text differs from text-off only in encoder input width.
  auto on = init_params<float>(small_config(Fusion::kEarly, true), 0);
  auto off = init_params<float>(small_config(Fusion::kEarly, false), 0);
  ASSERT_EQ(on.tensors().size(), off.tensors().size());
  for (std::size_t i = 0; i < on.tensors().size(); ++i) {
    const auto& a = on.tensors()[i].value.dims();
    const auto& b = off.tensors()[i].value.dims();
    if (on.tensors()[i].name == "enc.wq" || on.tensors()[i].name == "enc.ws") {
      EXPECT_EQ(a[1], b[1] + 1);
    } else {
      EXPECT_EQ(a, b) << on.tensors()[i].name;
    }
  }
}

TEST(Encode, ZeroVolumeGivesZero) {
  DecoderConfig c = small_config();
  auto p = init_params<float>(c, 3);
  ad::Graph<float> g;
  ParamBinder<float> bind(g, static_cast<const DecoderParams&>(p));
  auto out = encode(g.constant(Tensor({c.encoder_channels(), 4, 4, 4, 4})), bind, c);
  for (float v : out.value().values()) EXPECT_EQ(v, 0.0f);
}

TEST(Encode, OutputDimsFollowStride) {
  std::mt19937_64 rng(1);
  for (int stride : {1, 2}) {
    DecoderConfig c = small_config();
    c.support_stride = stride;
    auto p = init_params<float>(c, 3);
    ad::Graph<float> g;
    ParamBinder<float> bind(g, static_cast<const DecoderParams&>(p));
    auto out = encode(g.constant(random_input<float>(rng, c, 6).volume.tensor), bind, c);
    const std::size_t s = stride == 1 ? 6 : 3;
    EXPECT_EQ(out.dims(), (Shape{8, 6, 6, s, s}));
  }
  DecoderConfig c = small_config();
  auto p = init_params<float>(c, 3);
  ad::Graph<float> g;
  ParamBinder<float> bind(g, static_cast<const DecoderParams&>(p));
  EXPECT_THROW(encode(g.constant(Tensor({2, 4, 4, 4, 4})), bind, c), ShapeError);
}

TEST(Dscm, ZeroedWeightsGiveBitIdenticalResidual) {
  std::mt19937_64 rng(2);
  DecoderConfig c = small_config();
  auto p = init_params<float>(c, 5);
  for (auto& t : p.tensors()) {
    if (t.name.starts_with("dscm")) t.value.fill(0.0f);
  }
  std::normal_distribution<float> n(0, 2);
  Tensor x({8, 5, 4, 3, 3});
  for (float& v : x.values()) v = n(rng);
  ad::Graph<float> g;
  ParamBinder<float> bind(g, static_cast<const DecoderParams&>(p));
  for (std::size_t b = 0; b < c.num_dscm; ++b) {
    auto y = dscm_block(g.constant(x), b, bind, c);
    EXPECT_EQ(y.value(), x);
  }
}

TEST(Dscm, MatchesComposedOracle) {
  std::mt19937_64 rng(3);
  DecoderConfig c = small_config();
  auto p = init_params<double>(c, 6);
  std::normal_distribution<double> n(0, 1);
  for (auto& t : p.tensors())
    for (double& v : t.value.values()) v += 0.1 * n(rng);
  Tensor64 x({8, 4, 3, 4, 2});
  for (double& v : x.values()) v = n(rng);

  Tensor64 y = x;
  for (std::size_t r = 0; r < c.dscm_repeats; ++r) {
    const std::string pre = "dscm1." + std::to_string(r) + ".";
    y = kernels::dw4d_conv(y, p.get(pre + "dw.wq").value, p.get(pre + "dw.ws").value);
    y = kernels::pw4d_conv(y, p.get(pre + "pw.weight").value, p.get(pre + "pw.bias").value);
    y = kernels::group_norm(y, c.gn_groups, p.get(pre + "gn.gamma").value, p.get(pre + "gn.beta").value, 1e-5);
    y = kernels::relu(y);
  }
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];

  ad::Graph<double> g;
  ParamBinder<double> bind(g, static_cast<const BasicDecoderParams<double>&>(p));
  const Tensor64 got = dscm_block(g.constant(x), 1, bind, c).value();
  ASSERT_EQ(got.dims(), x.dims());
  for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(got[i], y[i], 1e-12);
}

TEST(Head, ZeroOutputWeightsGiveBiasLogits) {
  std::mt19937_64 rng(4);
  DecoderConfig c = small_config();
  auto p = init_params<float>(c, 7);
  p.get("head.out.weight").value.fill(0.0f);
  p.get("head.out.bias").value = Tensor({2}, {0.3f, -0.7f});
  Tensor logits = infer_logits(p, c, random_input<float>(rng, c, 4), 13, 11);
  ASSERT_EQ(logits.dims(), (Shape{2, 13, 11}));
  for (std::size_t i = 0; i < 13 * 11; ++i) {
    EXPECT_FLOAT_EQ(logits[i], 0.3f);
    EXPECT_FLOAT_EQ(logits[13 * 11 + i], -0.7f);
  }
}

TEST(Head, OutputSmallerThanGridIsConfigError) {
  std::mt19937_64 rng(5);
  DecoderConfig c = small_config();
  auto p = init_params<float>(c, 7);
  EXPECT_THROW(infer_logits(p, c, random_input<float>(rng, c, 4), 3, 8), ConfigError);
}

TEST(Forward, ShapeContractAllModes) {
  std::mt19937_64 rng(6);
  for (Fusion f : {Fusion::kEarly, Fusion::kLate})
    for (bool text : {false, true}) {
      DecoderConfig c = small_config(f, text);
      auto p = init_params<float>(c, 8);
      for (auto [h, w] : {std::pair<std::size_t, std::size_t>{5, 5}, {10, 10}, {17, 12}}) {
        Tensor logits = infer_logits(p, c, random_input<float>(rng, c, 5), h, w);
        EXPECT_EQ(logits.dims(), (Shape{2, h, w}));
        EXPECT_TRUE(logits.all_finite());
      }
    }
}

TEST(Forward, DeterministicBitIdentical) {
  std::mt19937_64 rng(7);
  DecoderConfig c = small_config();
  auto p = init_params<float>(c, 9);
  auto in = random_input<float>(rng, c, 5);
  EXPECT_EQ(infer_logits(p, c, in, 10, 10), infer_logits(p, c, in, 10, 10));
}

TEST(Forward, LateFusionWithoutTextMapIsDataError) {
  std::mt19937_64 rng(8);
  DecoderConfig c = small_config(Fusion::kLate, true);
  auto p = init_params<float>(c, 9);
  auto in = random_input<float>(rng, c, 4);
  in.text_map.reset();
  EXPECT_THROW(infer_logits(p, c, in, 8, 8), DataError);
}

TEST(Forward, CorrelationEvidenceChangesLogits) {
  // With the vision evidence removed (an all-zero support) the prediction
  // must move: the network is not a constant function of its input.
  std::mt19937_64 rng(9);
  DecoderConfig c = small_config(Fusion::kEarly, false);
  auto p = init_params<float>(c, 10);
  auto in = random_input<float>(rng, c, 5);
  auto blank = in;
  blank.volume.tensor.fill(0.0f);
  EXPECT_NE(infer_logits(p, c, in, 10, 10), infer_logits(p, c, blank, 10, 10));
}

TEST(MakeInput, TextRequiresVlFeaturesAndEmbedding) {
  QuerySample q{FeatureStack::from_tensor(Tensor({12, 3, 3, 4}, 1.0f)), std::nullopt, Tensor({6, 6})};
  SupportSample s{FeatureStack::from_tensor(Tensor({12, 3, 3, 4}, 1.0f)), Tensor({6, 6}, 1.0f), std::nullopt, 0};
  TextEmbedding t{Tensor({2}, 1.0f), 0, "c"};
  DecoderConfig c = small_config();
  EXPECT_THROW(make_decoder_input(q, s, &t, c), DataError);
  q.vl_features = Tensor({3, 3, 2}, 1.0f);
  EXPECT_THROW(make_decoder_input(q, s, static_cast<const TextEmbedding*>(nullptr), c), DataError);
  auto in = make_decoder_input(q, s, &t, c);
  EXPECT_EQ(in.volume.tensor.dims(), (Shape{4, 3, 3, 3, 3}));
  c.use_text = false;
  q.vl_features.reset();
  EXPECT_EQ(make_decoder_input(q, s, static_cast<const TextEmbedding*>(nullptr), c).volume.tensor.dim(0), 3u);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  testing::TempDir dir;
  DecoderConfig c = small_config(Fusion::kLate, true);
  c.support_stride = 1;
  auto p = init_params<float>(c, 11);
  save_checkpoint(dir.path() / "ckpt", p, c);
  Checkpoint back = load_checkpoint(dir.path() / "ckpt");
  EXPECT_EQ(back.config, c);
  ASSERT_EQ(back.params.tensors().size(), p.tensors().size());
  for (std::size_t i = 0; i < p.tensors().size(); ++i) {
    EXPECT_EQ(back.params.tensors()[i].name, p.tensors()[i].name);
    EXPECT_EQ(back.params.tensors()[i].value, p.tensors()[i].value);
  }
}

TEST(Checkpoint, ConfigJsonRoundTripAndErrors) {
  DecoderConfig c = small_config(Fusion::kLate, false);
  EXPECT_EQ(config_from_json(config_to_json(c)), c);
  EXPECT_THROW(config_from_json("{not json"), ConfigError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt"), DataError);
}

}  // namespace
}  // namespace fss
