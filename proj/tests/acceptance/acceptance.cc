// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Tolerances and run sizes are pinned below.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fss/checkpoint.h"
#include "fss/episodic.h"
#include "fss/kernels.h"
#include "fss/knowledge.h"
#include "fss/metrics.h"
#include "fss/random.h"
#include "fss/synthetic.h"
#include "grad_suite.h"
#include "oracles.h"
#include "temp_dir.h"

namespace fss {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Gradient suite.
constexpr double kGradSuiteSeconds = 60.0;

// Kernel and correlation oracles.
constexpr int kCp4dInstances = 60;
constexpr double kCp4dTolF32 = 1e-5;
constexpr double kDw4dTolF32 = 1e-5;
constexpr int kCorrelationInstances = 50;
constexpr double kCorrelationTol = 1e-10;

// Overfit run. Hidden width 16 keeps 300 full-size steps inside the time
// limit on one core; everything else is the default decoder.
constexpr std::size_t kRunWidth = 16;
constexpr std::size_t kOverfitImagesPerClass = 5;
constexpr std::size_t kOverfitPool = 20;
constexpr std::size_t kOverfitIterations = 300;
constexpr double kOverfitMiou = 0.90;
constexpr double kOverfitSeconds = 15 * 60;
constexpr double kOverfitLossRatio = 0.1;

// Generalisation run on held-out classes.
constexpr std::size_t kGenImagesPerClass = 8;
constexpr std::size_t kGenIterations = 60;
constexpr std::size_t kGenEpisodes = 60;
constexpr double kGenMiou = 0.75;

constexpr double kLearningRate = 1e-3;
constexpr std::size_t kClasses = 8;

// Parameter budget band.
constexpr double kParamsLow = 3e5, kParamsHigh = 9e5;

int failures = 0;

void report(const char* name, bool pass, const std::string& detail) {
  std::printf("%s %s: %s\n", pass ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

// Runs one criterion; an escaping exception counts as a failure.
void criterion(const char* name, const std::function<std::pair<bool, std::string>()>& body) {
  try {
    const auto [pass, detail] = body();
    report(name, pass, detail);
  } catch (const std::exception& e) {
    report(name, false, std::string("exception: ") + e.what());
  }
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <typename T>
BasicTensor<T> uniform(std::mt19937_64& rng, Shape dims) {
  std::uniform_real_distribution<double> u(-1, 1);
  BasicTensor<T> t(std::move(dims));
  for (T& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.dims() != b.dims()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(double(a[i]) - double(b[i])));
  return m;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

std::pair<bool, std::string> gradient_suite() {
  const auto t0 = Clock::now();
  std::size_t passed = 0, checked = 0;
  double worst = 0;
  std::string worst_case;
  const auto cases = testing::gradient_cases();
  for (const auto& c : cases) {
    const testing::GradReport r = c.run();
    checked += r.checked;
    if (r.ok()) ++passed;
    if (r.max_rel_err >= worst) {
      worst = r.max_rel_err;
      worst_case = c.name + " " + r.worst;
    }
  }
  const double secs = seconds_since(t0);
  return {passed == cases.size() && secs < kGradSuiteSeconds,
          fmt("%zu/%zu cases, %zu entries, max rel err %.2e (%s), %.1f s", passed, cases.size(), checked, worst,
              worst_case.c_str(), secs)};
}

std::pair<bool, std::string> kernel_oracle() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> dim(1, 5);
  double cp_err = 0;
  for (int i = 0; i < kCp4dInstances; ++i) {
    const std::size_t ci = dim(rng), co = dim(rng);
    const Tensor in = uniform<float>(rng, {ci, dim(rng), dim(rng), dim(rng), dim(rng)});
    const Tensor wq = uniform<float>(rng, {co, ci, 3, 3}), ws = uniform<float>(rng, {co, ci, 3, 3});
    const Tensor b = uniform<float>(rng, {co});
    const int stride = 1 + i % 2;
    cp_err = std::max(cp_err, max_abs_diff(kernels::cp4d_conv(in, wq, ws, b, stride),
                                           oracle::dense_cp4d(in, wq, ws, b, stride)));
  }
  double dw_err = 0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t c = dim(rng);
    const Tensor in = uniform<float>(rng, {c, dim(rng), dim(rng), dim(rng), dim(rng)});
    const Tensor wq = uniform<float>(rng, {c, 3, 3}), ws = uniform<float>(rng, {c, 3, 3});
    Tensor fq({c, c, 3, 3}), fs({c, c, 3, 3});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < 9; ++k) {
        fq[(ch * c + ch) * 9 + k] = wq[ch * 9 + k];
        fs[(ch * c + ch) * 9 + k] = ws[ch * 9 + k];
      }
    dw_err = std::max(dw_err, max_abs_diff(kernels::dw4d_conv(in, wq, ws), kernels::cp4d_conv(in, fq, fs, Tensor({c}), 1)));
  }
  return {cp_err <= kCp4dTolF32 && dw_err <= kDw4dTolF32,
          fmt("cp4d vs dense oracle on %d f32 instances: max abs err %.2e; dw4d vs block-diagonal cp4d: %.2e",
              kCp4dInstances, cp_err, dw_err)};
}

std::pair<bool, std::string> correlation_oracle() {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> u(-1, 1);
  auto stack = [&](std::size_t h, std::size_t c) {
    Tensor64 t({kNumLayers, h, h, c});
    for (double& v : t.values()) v = u(rng);
    return BasicFeatureStack<double>::from_tensor(t, "random");
  };
  auto mask = [&](std::size_t n) {
    Tensor64 m({n, n});
    for (double& v : m.values()) v = static_cast<double>(rng() & 1);
    m[0] = 1;
    return m;
  };
  double err = 0;
  for (int i = 0; i < kCorrelationInstances; ++i) {
    const auto q = stack(2, 3), s = stack(2, 3);
    const auto ms = mask_support_features(s, mask(2 * (1 + i % 3)));
    const auto maps = build_vision_correlations(q, ms, 1);
    for (std::size_t l = 0; l < kNumLayers; ++l) err = std::max(err, max_abs_diff(maps[l], oracle::layer_correlation(q.layers[l], ms.layers[l])));
  }
  std::size_t range_violations = 0, column_violations = 0;
  for (int i = 0; i < kCorrelationInstances; ++i) {
    const std::size_t h = 2 + i % 4;
    const auto q = stack(h, 4), s = stack(h, 4);
    const Tensor64 m = mask(h);
    for (const Tensor64& map : build_vision_correlations(q, mask_support_features(s, m), 1)) {
      for (std::size_t k = 0; k < map.size(); ++k) range_violations += !(map[k] >= 0.0 && map[k] <= 1.0);
      for (std::size_t sp = 0; sp < h * h; ++sp) {
        if (m[sp] != 0) continue;
        for (std::size_t qp = 0; qp < h * h; ++qp) column_violations += map[qp * h * h + sp] != 0.0;
      }
    }
  }
  return {err <= kCorrelationTol && range_violations == 0 && column_violations == 0,
          fmt("max abs err %.2e over %d 2x2 instances; %zu range and %zu zero-column violations", err,
              kCorrelationInstances, range_violations, column_violations)};
}

std::pair<bool, std::string> residual_identity() {
  DecoderConfig c;
  auto p = init_params<float>(c, 3);
  for (auto& t : p.tensors())
    if (t.name.starts_with("dscm")) t.value.fill(0.0f);
  std::mt19937_64 rng(303);
  std::normal_distribution<float> n(0, 3);
  Tensor x({c.d, 6, 5, 3, 3});
  for (float& v : x.values()) v = n(rng);
  std::size_t identical = 0;
  for (std::size_t b = 0; b < c.num_dscm; ++b) {
    ad::Graph<float> g;
    ParamBinder<float> bind(g, static_cast<const DecoderParams&>(p));
    identical += dscm_block(g.constant(x), b, bind, c).value() == x;
  }
  return {identical == c.num_dscm, fmt("%zu/%zu blocks bit-identical at d=%zu", identical, c.num_dscm, c.d)};
}

DecoderConfig run_config(bool text) {
  DecoderConfig c;
  c.d = kRunWidth;
  c.use_text = text;
  return c;
}

FoldSpec fold0(const Dataset& data) {
  return make_folds(data.manifest().dataset_id, DatasetStyle::kSynthetic, data.manifest().class_ids()).at(0);
}

double mean(const std::vector<double>& v, std::size_t from, std::size_t to) {
  double s = 0;
  for (std::size_t i = from; i < to; ++i) s += v[i];
  return s / static_cast<double>(to - from);
}

std::pair<bool, std::string> synthetic_overfit(const fs::path& root) {
  const fs::path manifest = root / "overfit" / "manifest.json";
  generate_synthetic(manifest, kClasses, kOverfitImagesPerClass, 11);
  Dataset data(Manifest::load(manifest));
  const FoldSpec fold = fold0(data);
  const DecoderConfig c = run_config(true);
  TrainOptions opt;
  opt.iterations = kOverfitIterations;
  opt.adam.lr = kLearningRate;
  opt.seed = 1;
  opt.episode_pool = kOverfitPool;
  const auto t0 = Clock::now();
  const TrainResult r = train(data, fold, c, opt);
  const EvalResult ev = evaluate_episodes(data, r.pool, fold.train_classes, r.params, c, 1);
  const double secs = seconds_since(t0);
  const double ratio = mean(r.losses, r.losses.size() - 20, r.losses.size()) / mean(r.losses, 0, 20);
  return {ev.miou.miou >= kOverfitMiou && secs <= kOverfitSeconds && ratio < kOverfitLossRatio,
          fmt("training-set 1-shot mIoU %.4f (need >= %.2f) over %zu episodes, %.0f s (limit %.0f), "
              "last/first 20-step loss ratio %.4f (need < %.2f); d=%zu",
              ev.miou.miou, kOverfitMiou, r.pool.size(), secs, kOverfitSeconds, ratio, kOverfitLossRatio,
              kRunWidth)};
}

// Paired protocol: every 1-shot episode is the matching 5-shot episode
// truncated to its first support, so both shot counts and both text settings
// are scored on the same queries.
std::pair<bool, std::string> synthetic_generalisation(const fs::path& root) {
  const fs::path manifest = root / "general" / "manifest.json";
  generate_synthetic(manifest, kClasses, kGenImagesPerClass, 7);
  Dataset data(Manifest::load(manifest));
  const FoldSpec fold = fold0(data);
  auto trained = [&](bool text) {
    TrainOptions opt;
    opt.iterations = kGenIterations;
    opt.adam.lr = kLearningRate;
    opt.seed = 1;
    return train(data, fold, run_config(text), opt).params;
  };
  std::vector<EpisodeRef> five, one;
  rnd::Engine rng = rnd::derive(5, 3);
  for (std::size_t i = 0; i < kGenEpisodes; ++i) {
    five.push_back(sample_episode(data.manifest(), fold, Split::kTest, 5, rng, i));
    one.push_back(five.back());
    one.back().supports.resize(1);
  }
  auto test_miou = [&](const DecoderParams& p, bool text, const std::vector<EpisodeRef>& eps) {
    return evaluate_episodes(data, eps, fold.test_classes, p, run_config(text), 1).miou.miou;
  };
  const DecoderParams with_text = trained(true);
  const double one_shot = test_miou(with_text, true, one);
  const double five_shot = test_miou(with_text, true, five);
  const double mask_only = test_miou(trained(false), false, one);
  return {one_shot >= kGenMiou && five_shot >= one_shot && one_shot >= mask_only,
          fmt("test classes %d,%d: 1-shot %.4f (need >= %.2f), 5-shot %.4f (need >= 1-shot), "
              "mask-only 1-shot %.4f (need <= text 1-shot); %zu iterations, %zu paired episodes, d=%zu",
              fold.test_classes[0], fold.test_classes[1], one_shot, kGenMiou, five_shot, mask_only,
              kGenIterations, kGenEpisodes, kRunWidth)};
}

std::pair<bool, std::string> parameter_budget() {
  const std::size_t n = count_params(init_params<float>(DecoderConfig{}, 0));
  return {n >= kParamsLow && n <= kParamsHigh, fmt("default decoder has %zu learnable parameters", n)};
}

std::pair<bool, std::string> determinism(const fs::path& root) {
  SyntheticOptions small;
  small.grid = 6;
  small.mask_side = 24;
  small.c_feat = 8;
  small.c_vl = 4;
  small.max_prototype_cos = 0.75;
  small.max_text_cos = 0.9;
  const fs::path manifest = root / "det" / "manifest.json";
  generate_synthetic(manifest, kClasses, 4, 13, small);
  Dataset data(Manifest::load(manifest));
  const FoldSpec fold = fold0(data);
  DecoderConfig c;
  c.d = 8;
  c.gn_groups = 4;
  TrainOptions opt;
  opt.iterations = 12;
  opt.adam.lr = 0.01;
  opt.seed = 4;

  std::vector<std::string> csvs;
  for (int run = 0; run < 2; ++run) {
    const TrainResult r = train(data, fold, c, opt);
    save_checkpoint(root / "det" / ("ck" + std::to_string(run)), r.params, c);
    for (std::size_t workers : {1, 3}) {
      EvalOptions eo;
      eo.episodes = 10;
      eo.workers = workers;
      eo.seed = 6;
      eo.shots = 2;
      csvs.push_back(miou_csv(evaluate(data, fold, r.params, c, eo).miou, CsvMetadata{eo.seed, "det", "acceptance", {}}));
    }
  }
  std::size_t files = 0, differing = 0;
  for (const auto& e : fs::directory_iterator(root / "det" / "ck0")) {
    ++files;
    differing += slurp(e.path()) != slurp(root / "det" / "ck1" / e.path().filename());
  }
  bool csv_same = true;
  for (const auto& s : csvs) csv_same = csv_same && s == csvs[0];
  return {files > 0 && differing == 0 && csv_same,
          fmt("%zu checkpoint files, %zu differ across runs; mIoU CSVs %s across 2 runs x {1,3} workers", files,
              differing, csv_same ? "identical" : "differ")};
}

std::pair<bool, std::string> miou_oracle() {
  auto block = [](std::size_t y1, std::size_t x1) {
    Tensor t({4, 4});
    for (std::size_t y = 0; y < y1; ++y)
      for (std::size_t x = 0; x < x1; ++x) t.at({y, x}) = 1;
    return t;
  };
  ConfusionAccumulator hand;
  hand.accumulate(0, block(2, 2), block(1, 4));
  const auto counts = hand.counts_for(0);
  const double hand_iou = miou(hand, {0}).miou;
  bool hand_ok = counts.intersection == 2 && counts.union_ == 6 && hand_iou == 1.0 / 3;

  std::mt19937_64 rng(404);
  auto rmask = [&] {
    Tensor t({5, 5});
    for (float& v : t.values()) v = static_cast<float>(rng() % 3 == 0);
    return t;
  };
  int assoc_failures = 0;
  for (int trial = 0; trial < 100; ++trial) {
    ConfusionAccumulator a, b, c;
    for (auto* acc : {&a, &b, &c})
      for (int i = 0; i < 4; ++i) acc->accumulate(static_cast<int>(rng() % 3), rmask(), rmask());
    ConfusionAccumulator left = a, bc = b, right = a;
    left.merge(b);
    left.merge(c);
    bc.merge(c);
    right.merge(bc);
    assoc_failures += !(left == right) || miou(left, {0, 1, 2}).miou != miou(right, {0, 1, 2}).miou;
  }
  return {hand_ok && assoc_failures == 0,
          fmt("4x4 example I=%llu U=%llu IoU=%.6f; %d/100 merge-associativity failures",
              static_cast<unsigned long long>(counts.intersection), static_cast<unsigned long long>(counts.union_),
              hand_iou, assoc_failures)};
}

}  // namespace
}  // namespace fss

int main() {
  using namespace fss;
  testing::TempDir dir;
  criterion("gradient-suite", gradient_suite);
  criterion("kernel-oracle", kernel_oracle);
  criterion("correlation-oracle", correlation_oracle);
  criterion("residual-identity", residual_identity);
  criterion("parameter-budget", parameter_budget);
  criterion("miou-oracle", miou_oracle);
  criterion("determinism", [&] { return determinism(dir.path()); });
  criterion("synthetic-overfit", [&] { return synthetic_overfit(dir.path()); });
  criterion("synthetic-generalisation", [&] { return synthetic_generalisation(dir.path()); });
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
