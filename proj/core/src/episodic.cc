#include "fss/episodic.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <thread>

#include "fss/kernels.h"

namespace fss {

DatasetStyle parse_dataset_style(const std::string& s) {
  if (s == "pascal") return DatasetStyle::kPascal;
  if (s == "coco") return DatasetStyle::kCoco;
  if (s == "synthetic") return DatasetStyle::kSynthetic;
  throw ConfigError("dataset style must be pascal, coco or synthetic, got '" + s + "'");
}

const char* dataset_style_name(DatasetStyle s) {
  switch (s) {
    case DatasetStyle::kPascal: return "pascal";
    case DatasetStyle::kCoco: return "coco";
    case DatasetStyle::kSynthetic: return "synthetic";
  }
  return "?";
}

std::vector<FoldSpec> make_folds(const std::string& dataset_id, DatasetStyle style,
                                 std::vector<int> class_ids) {
  std::sort(class_ids.begin(), class_ids.end());
  if (std::adjacent_find(class_ids.begin(), class_ids.end()) != class_ids.end()) {
    throw ConfigError("duplicate class ids");
  }
  const std::size_t n = class_ids.size();
  if (n == 0 || n % 4 != 0) {
    throw ConfigError("class count " + std::to_string(n) + " is not divisible into 4 folds");
  }
  if (style == DatasetStyle::kPascal && n != 20) {
    throw ConfigError("PASCAL-style folds need 20 classes, got " + std::to_string(n));
  }
  if (style == DatasetStyle::kCoco && n != 80) {
    throw ConfigError("COCO-style folds need 80 classes, got " + std::to_string(n));
  }
  std::vector<FoldSpec> folds(4);
  for (int f = 0; f < 4; ++f) {
    FoldSpec& spec = folds[f];
    spec.dataset_id = dataset_id;
    spec.fold_index = f;
    for (std::size_t pos = 0; pos < n; ++pos) {
      const bool test = style == DatasetStyle::kCoco ? pos % 4 == static_cast<std::size_t>(f)
                                                     : pos / (n / 4) == static_cast<std::size_t>(f);
      (test ? spec.test_classes : spec.train_classes).push_back(class_ids[pos]);
    }
  }
  return folds;
}

EpisodeRef sample_episode(const Manifest& manifest, const FoldSpec& fold, Split split,
                          std::size_t shots, rnd::Engine& rng, std::uint64_t id) {
  if (shots == 0) throw DataError("an episode needs at least one support (K >= 1)");
  const std::vector<int>& classes = split == Split::kTrain ? fold.train_classes : fold.test_classes;
  if (classes.empty()) throw SamplingError("the requested split has no classes");
  EpisodeRef ref;
  ref.id = id;
  ref.class_id = classes[rnd::below(rng, classes.size())];
  std::vector<std::size_t> pool = manifest.records_with(ref.class_id);
  if (pool.size() < shots + 1) {
    auto name = manifest.classes.find(ref.class_id);
    throw SamplingError("class " + std::to_string(ref.class_id) +
                        (name != manifest.classes.end() ? " (" + name->second + ")" : "") + " has " +
                        std::to_string(pool.size()) + " images, an episode with K=" +
                        std::to_string(shots) + " needs " + std::to_string(shots + 1));
  }
  // Partial Fisher-Yates: the first shots + 1 slots become the draw.
  for (std::size_t i = 0; i < shots + 1; ++i) {
    const std::size_t j = i + rnd::below(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  ref.query = pool[0];
  ref.supports.assign(pool.begin() + 1, pool.begin() + 1 + static_cast<long>(shots));
  return ref;
}

Episode load_episode(const Dataset& data, const EpisodeRef& ref, bool with_text) {
  Episode ep;
  ep.id = ref.id;
  ep.class_id = ref.class_id;
  const auto q = data.image(ref.query);
  ep.query.features = q->features;
  ep.query.vl_features = q->vl_features;
  ep.query.gt_mask = q->mask_for(ref.class_id);
  for (std::size_t s : ref.supports) {
    const auto img = data.image(s);
    SupportSample sup;
    sup.features = img->features;
    sup.vl_features = img->vl_features;
    sup.mask = img->mask_for(ref.class_id);
    sup.class_id = ref.class_id;
    ep.supports.push_back(std::move(sup));
  }
  if (with_text) ep.text = *data.text(ref.class_id);
  return ep;
}

namespace {

std::string describe(const Dataset& data, const EpisodeRef& ref) {
  const auto& recs = data.manifest().records;
  std::string s = "episode " + std::to_string(ref.id) + " (class " + std::to_string(ref.class_id) +
                  ", query " + recs.at(ref.query).image_id + ", supports";
  for (std::size_t i : ref.supports) s += " " + recs.at(i).image_id;
  return s + ")";
}

Tensor argmax_foreground(const Tensor& logits) {
  const std::size_t h = logits.dim(1), w = logits.dim(2), n = h * w;
  Tensor out({h, w});
  for (std::size_t i = 0; i < n; ++i) out[i] = logits[n + i] > logits[i] ? 1.0f : 0.0f;
  return out;
}

}  // namespace

TrainResult train(const Dataset& data, const FoldSpec& fold, const DecoderConfig& config,
                  const TrainOptions& options, const DecoderParams* initial) {
  config.validate();
  options.adam.validate();
  if (config.use_text && !data.manifest().has_vl()) {
    throw DataError("text is enabled but the dataset has no vision-language features");
  }
  TrainResult result;
  result.params = initial ? *initial : init_params<float>(config, options.seed);
  Adam<float> adam(options.adam);
  rnd::Engine rng = rnd::derive(options.seed, 2);
  for (std::size_t i = 0; i < options.episode_pool; ++i) {
    result.pool.push_back(sample_episode(data.manifest(), fold, Split::kTrain, 1, rng, i));
  }
  const std::size_t h = data.manifest().grid.h, w = data.manifest().grid.w;
  for (std::size_t step = 0; step < options.iterations; ++step) {
    const EpisodeRef ref = result.pool.empty()
                               ? sample_episode(data.manifest(), fold, Split::kTrain, 1, rng, step)
                               : result.pool[step % result.pool.size()];
    const Episode ep = load_episode(data, ref, config.use_text);
    const DecoderInput input = make_decoder_input(ep.query, ep.supports[0],
                                                  ep.text ? &*ep.text : nullptr, config);
    const Tensor target = kernels::nearest_resize(ep.query.gt_mask, 2 * h, 2 * w);

    result.params.zero_grad();
    ad::Graph<float> graph;
    ParamBinder<float> binder(graph, result.params);
    ad::Var<float> logits = forward(binder, config, input, 2 * h, 2 * w);
    ad::Var<float> loss = ad::softmax_cross_entropy(logits, target);
    const double loss_value = loss.value()[0];
    if (!std::isfinite(loss_value)) {
      throw NumericError("non-finite loss at step " + std::to_string(step) + " on " +
                         describe(data, ref));
    }
    graph.backward(loss);
    for (const auto& p : result.params.tensors()) {
      if (!p.grad.all_finite()) {
        throw NumericError("non-finite gradient for " + p.name + " at step " +
                           std::to_string(step) + " on " + describe(data, ref));
      }
    }
    adam.step(result.params.tensors());
    result.losses.push_back(loss_value);
    if (options.on_step) options.on_step(step, loss_value);
  }
  result.steps = adam.steps();
  return result;
}

Tensor vote(const std::vector<Tensor>& maps) {
  if (maps.empty()) throw DataError("voting needs at least one prediction (K >= 1)");
  const std::size_t k = maps.size();
  std::vector<std::size_t> count(maps[0].size(), 0);
  for (const Tensor& m : maps) {
    expect_dims(m, maps[0].dims(), "vote map");
    kernels::expect_binary(m, "vote map");
    for (std::size_t i = 0; i < m.size(); ++i) count[i] += m[i] != 0 ? 1 : 0;
  }
  Tensor out(maps[0].dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2 * count[i] >= k ? 1.0f : 0.0f;
  return out;
}

Tensor predict_kshot(const Episode& episode, const DecoderParams& params,
                     const DecoderConfig& config) {
  if (episode.supports.empty()) throw DataError("K-shot prediction needs K >= 1 supports");
  const std::size_t H = episode.query.gt_mask.dim(0), W = episode.query.gt_mask.dim(1);
  std::vector<Tensor> maps;
  for (const SupportSample& s : episode.supports) {
    const DecoderInput input = make_decoder_input(episode.query, s,
                                                  episode.text ? &*episode.text : nullptr, config);
    maps.push_back(argmax_foreground(infer_logits(params, config, input, H, W)));
  }
  return vote(maps);
}

EvalResult evaluate_episodes(const Dataset& data, const std::vector<EpisodeRef>& episodes,
                             const std::vector<int>& classes, const DecoderParams& params,
                             const DecoderConfig& config, std::size_t workers) {
  config.validate();
  workers = std::max<std::size_t>(1, std::min(workers, episodes.size()));
  std::vector<ConfusionAccumulator> partial(workers);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&](std::size_t wi) {
    try {
      for (std::size_t i = next++; i < episodes.size(); i = next++) {
        const Episode ep = load_episode(data, episodes[i], config.use_text);
        const Tensor pred = predict_kshot(ep, params, config);
        partial[wi].accumulate(ep.class_id, pred, ep.query.gt_mask);
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(failure_mu);
      if (!failure) failure = std::current_exception();
      next = episodes.size();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t wi = 0; wi < workers; ++wi) threads.emplace_back(work, wi);
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  EvalResult r;
  for (const auto& acc : partial) r.confusion.merge(acc);
  r.miou = miou(r.confusion, std::set<int>(classes.begin(), classes.end()));
  return r;
}

EvalResult evaluate(const Dataset& data, const FoldSpec& fold, const DecoderParams& params,
                    const DecoderConfig& config, const EvalOptions& options) {
  if (options.shots == 0) throw DataError("K-shot evaluation needs K >= 1");
  rnd::Engine rng = rnd::derive(options.seed, 3);
  std::vector<EpisodeRef> refs;
  refs.reserve(options.episodes);
  for (std::size_t i = 0; i < options.episodes; ++i) {
    refs.push_back(sample_episode(data.manifest(), fold, options.split, options.shots, rng, i));
  }
  const auto& classes = options.split == Split::kTest ? fold.test_classes : fold.train_classes;
  return evaluate_episodes(data, refs, classes, params, config, options.workers);
}

std::string loss_csv(const std::vector<double>& losses) {
  std::string out = "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, losses[i]);
    out += buf;
  }
  return out;
}

}  // namespace fss
