#include "cli.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <ostream>

#include "CLI11.hpp"
#include "fss/checkpoint.h"
#include "fss/container.h"
#include "fss/episodic.h"
#include "fss/knowledge.h"
#include "fss/metrics.h"
#include "fss/synthetic.h"
#include "fss/version.h"
#include "json.hpp"

namespace fss::cli {

using nlohmann::json;
namespace fs = std::filesystem;

void RunConfig::validate() const {
  decoder.validate();
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("--lr must be positive");
  if (fold < 0 || fold > 3) throw ConfigError("--fold must be in 0..3, got " + std::to_string(fold));
  parse_dataset_style(dataset_style);
  if (k == 0) throw ConfigError("--k must be at least 1");
  if (workers == 0) throw ConfigError("--workers must be at least 1");
}

namespace {

template <typename V>
void take(const json& j, const char* key, V& dst) {
  if (j.contains(key)) dst = j.at(key).get<V>();
}

json result_config_object(const RunConfig& c) {
  return json{{"d", c.decoder.d},
              {"gn_groups", c.decoder.gn_groups},
              {"num_dscm", c.decoder.num_dscm},
              {"dscm_repeats", c.decoder.dscm_repeats},
              {"support_stride", c.decoder.support_stride},
              {"fusion", fusion_name(c.decoder.fusion)},
              {"m", c.decoder.m},
              {"use_text", c.decoder.use_text},
              {"fold", c.fold},
              {"dataset_style", c.dataset_style},
              {"k", c.k},
              {"iterations", c.iterations},
              {"lr", c.lr},
              {"seed", c.seed},
              {"episodes", c.episodes},
              {"episode_pool", c.episode_pool},
              {"episode", c.episode}};
}

}  // namespace

void apply_config_json(RunConfig& c, const std::string& json_text) {
  static const std::set<std::string> known = {
      "d",       "gn_groups", "num_dscm",  "dscm_repeats", "support_stride", "fusion",
      "m",       "use_text",  "manifest",  "fold",         "dataset_style",  "k",
      "iterations", "lr",     "seed",      "workers",      "out",            "episodes",
      "checkpoint", "episode_pool", "episode", "classes",   "images_per_class"};
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config file is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config field '" + key + "'");
  }
  try {
    take(j, "d", c.decoder.d);
    take(j, "gn_groups", c.decoder.gn_groups);
    take(j, "num_dscm", c.decoder.num_dscm);
    take(j, "dscm_repeats", c.decoder.dscm_repeats);
    take(j, "support_stride", c.decoder.support_stride);
    if (j.contains("fusion")) c.decoder.fusion = parse_fusion(j.at("fusion").get<std::string>());
    take(j, "m", c.decoder.m);
    take(j, "use_text", c.decoder.use_text);
    take(j, "manifest", c.manifest);
    take(j, "fold", c.fold);
    take(j, "dataset_style", c.dataset_style);
    take(j, "k", c.k);
    take(j, "iterations", c.iterations);
    take(j, "lr", c.lr);
    take(j, "seed", c.seed);
    take(j, "workers", c.workers);
    take(j, "out", c.out);
    take(j, "episodes", c.episodes);
    take(j, "checkpoint", c.checkpoint);
    take(j, "episode_pool", c.episode_pool);
    take(j, "episode", c.episode);
    take(j, "classes", c.classes);
    take(j, "images_per_class", c.images_per_class);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config field: ") + e.what());
  }
}

std::string result_config_json(const RunConfig& config) {
  return result_config_object(config).dump();
}

namespace {

// Flags are bound to scratch values and copied onto the RunConfig only when
// given, after the config file has been applied.
class FlagSet {
 public:
  explicit FlagSet(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "JSON config file; explicit flags win");
  }

  template <typename V>
  CLI::Option* add(const std::string& name, const std::string& help,
                   std::function<void(RunConfig&, const V&)> set) {
    auto holder = std::make_shared<V>();
    CLI::Option* opt = app_->add_option(name, *holder, help);
    setters_.emplace_back(opt, [holder, set](RunConfig& c) { set(c, *holder); });
    return opt;
  }

  void add_bool_flag(const std::string& name, const std::string& help,
                     std::function<void(RunConfig&, bool)> set) {
    auto holder = std::make_shared<bool>(false);
    CLI::Option* opt = app_->add_flag(name, *holder, help);
    setters_.emplace_back(opt, [holder, set](RunConfig& c) { set(c, *holder); });
  }

  void decoder() {
    add<std::size_t>("--d", "hidden channels", [](RunConfig& c, const std::size_t& v) { c.decoder.d = v; });
    add<std::size_t>("--gn-groups", "group-norm groups",
                     [](RunConfig& c, const std::size_t& v) { c.decoder.gn_groups = v; });
    add<std::size_t>("--num-dscm", "DSCM blocks",
                     [](RunConfig& c, const std::size_t& v) { c.decoder.num_dscm = v; });
    add<std::size_t>("--dscm-repeats", "repeats inside each DSCM block",
                     [](RunConfig& c, const std::size_t& v) { c.decoder.dscm_repeats = v; });
    add<int>("--support-stride", "encoder stride on the support dims (1 or 2)",
             [](RunConfig& c, const int& v) { c.decoder.support_stride = v; });
    add<std::string>("--fusion", "early or late", [](RunConfig& c, const std::string& v) {
      c.decoder.fusion = parse_fusion(v);
    })->check(CLI::IsMember({"early", "late"}));
    add<int>("--m", "first vision layer used (1 = all 12)",
             [](RunConfig& c, const int& v) { c.decoder.m = v; });
    add_bool_flag("--use-text,!--no-text", "use the vision-language text channel",
                  [](RunConfig& c, bool v) { c.decoder.use_text = v; });
  }

  void data() {
    add<std::string>("--manifest", "dataset manifest JSON",
                     [](RunConfig& c, const std::string& v) { c.manifest = v; });
    add<int>("--fold", "fold index 0..3", [](RunConfig& c, const int& v) { c.fold = v; });
    add<std::string>("--dataset-style", "pascal, coco or synthetic",
                     [](RunConfig& c, const std::string& v) { c.dataset_style = v; })
        ->check(CLI::IsMember({"pascal", "coco", "synthetic"}));
  }

  void seed_and_out() {
    add<std::uint64_t>("--seed", "random seed", [](RunConfig& c, const std::uint64_t& v) { c.seed = v; });
    add<std::string>("--out", "output directory", [](RunConfig& c, const std::string& v) { c.out = v; });
  }

  RunConfig resolve() const {
    RunConfig c;
    if (!config_path_.empty()) {
      std::ifstream in(config_path_);
      if (!in) throw ConfigError("cannot read config file " + config_path_);
      std::stringstream ss;
      ss << in.rdbuf();
      apply_config_json(c, ss.str());
    }
    for (const auto& [opt, set] : setters_) {
      if (opt->count() > 0) set(c);
    }
    c.validate();
    return c;
  }

 private:
  CLI::App* app_;
  std::string config_path_;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> setters_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string config_hash(const RunConfig& c) { return fnv1a_hex(result_config_json(c)); }

void write_metadata(const fs::path& dir, const std::string& command, const RunConfig& c,
                    json extra = json::object()) {
  json meta{{"command", command},
            {"version", kVersion},
            {"seed", c.seed},
            {"config_hash", config_hash(c)},
            {"config", result_config_object(c)},
            {"manifest", c.manifest},
            {"checkpoint", c.checkpoint},
            {"workers", c.workers}};
  for (auto& [k, v] : extra.items()) meta[k] = v;
  write_text(dir / "run_metadata.json", meta.dump(2) + "\n");
}

fs::path prepare_out(const RunConfig& c) {
  fs::path dir(c.out);
  fs::create_directories(dir);
  return dir;
}

Manifest open_manifest(const RunConfig& c) {
  if (c.manifest.empty()) throw ConfigError("--manifest is required");
  if (!fs::exists(c.manifest)) throw DataError("manifest not found: " + c.manifest);
  Manifest m = Manifest::load(c.manifest);
  m.validate();
  return m;
}

FoldSpec fold_of(const Manifest& m, const RunConfig& c) {
  return make_folds(m.dataset_id, parse_dataset_style(c.dataset_style), m.class_ids()).at(c.fold);
}

// Parameters and the effective decoder config: from --checkpoint when given,
// else a fresh initialisation from the seed.
DecoderParams model_for(RunConfig& c, std::ostream& out) {
  if (c.checkpoint.empty()) {
    out << "no --checkpoint given; using freshly initialised parameters (seed " << c.seed << ")\n";
    return init_params<float>(c.decoder, c.seed);
  }
  if (!fs::exists(fs::path(c.checkpoint) / "manifest.json")) {
    throw DataError("checkpoint not found: " + c.checkpoint);
  }
  Checkpoint ck = load_checkpoint(c.checkpoint);
  c.decoder = ck.config;
  return std::move(ck.params);
}

EpisodeRef nth_test_episode(const Manifest& m, const FoldSpec& fold, const RunConfig& c) {
  rnd::Engine rng = rnd::derive(c.seed, 3);
  EpisodeRef ref;
  for (std::size_t i = 0; i <= c.episode; ++i) ref = sample_episode(m, fold, Split::kTest, c.k, rng, i);
  return ref;
}

int cmd_synth(const RunConfig& c, std::ostream& out) {
  const fs::path dir = prepare_out(c);
  const Manifest m = generate_synthetic(dir / "manifest.json", c.classes, c.images_per_class, c.seed);
  m.validate();
  out << "wrote " << m.records.size() << " images of " << m.classes.size() << " classes to "
      << (dir / "manifest.json").string() << "\n";
  return 0;
}

int cmd_train(RunConfig c, std::ostream& out) {
  Dataset data(open_manifest(c));
  const FoldSpec fold = fold_of(data.manifest(), c);
  const fs::path dir = prepare_out(c);
  TrainOptions opt;
  opt.iterations = c.iterations;
  opt.adam.lr = c.lr;
  opt.seed = c.seed;
  opt.episode_pool = c.episode_pool;
  const std::size_t report = std::max<std::size_t>(1, c.iterations / 20);
  opt.on_step = [&](std::size_t step, double loss) {
    if (step % report == 0 || step + 1 == c.iterations) {
      out << "step " << step << " loss " << loss << "\n" << std::flush;
    }
  };
  const TrainResult r = train(data, fold, c.decoder, opt);
  save_checkpoint(dir / "checkpoint", r.params, c.decoder);
  write_text(dir / "loss.csv", loss_csv(r.losses));
  write_metadata(dir, "train", c, json{{"steps", r.steps}});
  out << "checkpoint written to " << (dir / "checkpoint").string() << "\n";
  return 0;
}

int cmd_eval(RunConfig c, std::ostream& out) {
  Dataset data(open_manifest(c));
  const FoldSpec fold = fold_of(data.manifest(), c);
  const DecoderParams params = model_for(c, out);
  const fs::path dir = prepare_out(c);
  EvalOptions opt;
  opt.episodes = c.episodes;
  opt.shots = c.k;
  opt.workers = c.workers;
  opt.seed = c.seed;
  const EvalResult r = evaluate(data, fold, params, c.decoder, opt);
  CsvMetadata meta{c.seed, config_hash(c), kVersion,
                   {{"fold", std::to_string(c.fold)}, {"k", std::to_string(c.k)},
                    {"episodes", std::to_string(c.episodes)}}};
  write_text(dir / "miou.csv", miou_csv(r.miou, meta));
  write_metadata(dir, "eval", c);
  out << "fold " << c.fold << " " << c.k << "-shot mIoU " << r.miou.miou << " over " << c.episodes
      << " episodes\n";
  return 0;
}

int cmd_predict(RunConfig c, std::ostream& out) {
  Dataset data(open_manifest(c));
  const FoldSpec fold = fold_of(data.manifest(), c);
  const DecoderParams params = model_for(c, out);
  const fs::path dir = prepare_out(c);
  const EpisodeRef ref = nth_test_episode(data.manifest(), fold, c);
  const Episode ep = load_episode(data, ref, c.decoder.use_text);
  const Tensor pred = predict_kshot(ep, params, c.decoder);
  io::write_tensor(dir / "prediction.fmtc", pred);
  io::write_mask_pgm(dir / "prediction.pgm", pred);
  io::write_mask_pgm(dir / "ground_truth.pgm", ep.query.gt_mask);
  ConfusionAccumulator acc;
  acc.accumulate(ep.class_id, pred, ep.query.gt_mask);
  const auto iou = miou(acc, {ep.class_id});
  write_metadata(dir, "predict", c,
                 json{{"class_id", ep.class_id},
                      {"query", data.manifest().records[ref.query].image_id}});
  out << "episode " << c.episode << " class " << ep.class_id << " IoU " << iou.miou << "\n";
  return 0;
}

int cmd_viz(RunConfig c, std::ostream& out) {
  Dataset data(open_manifest(c));
  const FoldSpec fold = fold_of(data.manifest(), c);
  const fs::path dir = prepare_out(c);
  c.k = 1;
  const EpisodeRef ref = nth_test_episode(data.manifest(), fold, c);
  const Episode ep = load_episode(data, ref, c.decoder.use_text && data.manifest().has_vl());
  const FeatureStack masked = mask_support_features(ep.supports[0].features, ep.supports[0].mask);
  const auto maps = build_vision_correlations(ep.query.features, masked, c.decoder.m);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const int layer = c.decoder.m + static_cast<int>(i);
    char name[32];
    std::snprintf(name, sizeof name, "layer_%02d", layer);
    const Tensor avg = averaged_activation_map(maps[i]);
    io::write_tensor(dir / (std::string(name) + ".fmtc"), avg);
    io::write_pgm(dir / (std::string(name) + ".pgm"), avg);
  }
  if (ep.text && ep.query.vl_features) {
    const Tensor t = build_text_activation(*ep.query.vl_features, *ep.text);
    io::write_tensor(dir / "text_activation.fmtc", t);
    io::write_pgm(dir / "text_activation.pgm", t);
  }
  io::write_mask_pgm(dir / "query_mask.pgm", ep.query.gt_mask);
  io::write_mask_pgm(dir / "support_mask.pgm", ep.supports[0].mask);
  write_metadata(dir, "viz", c, json{{"class_id", ep.class_id}});
  out << "wrote " << maps.size() << " activation maps to " << dir.string() << "\n";
  return 0;
}

int cmd_params(const RunConfig& c, std::ostream& out) {
  const DecoderParams p = init_params<float>(c.decoder, c.seed);
  std::map<std::string, std::size_t> groups;
  for (const auto& t : p.tensors()) groups[t.name.substr(0, t.name.find('.'))] += t.value.size();
  out << "learnable parameters: " << count_params(p) << "\n";
  for (const auto& [g, n] : groups) out << "  " << g << ": " << n << "\n";
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot segmentation on frozen foundation-model features", "fss"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic feature store");
  FlagSet synth_flags(synth);
  synth_flags.seed_and_out();
  synth_flags.add<std::size_t>("--classes", "number of classes (multiple of 4)",
                               [](RunConfig& c, const std::size_t& v) { c.classes = v; });
  synth_flags.add<std::size_t>("--images-per-class", "images per class",
                               [](RunConfig& c, const std::size_t& v) { c.images_per_class = v; });

  CLI::App* train_cmd = app.add_subcommand("train", "episodic training; writes a checkpoint and loss.csv");
  FlagSet train_flags(train_cmd);
  train_flags.seed_and_out();
  train_flags.data();
  train_flags.decoder();
  train_flags.add<std::size_t>("--iterations", "training steps (one episode each)",
                               [](RunConfig& c, const std::size_t& v) { c.iterations = v; });
  train_flags.add<double>("--lr", "Adam learning rate", [](RunConfig& c, const double& v) { c.lr = v; });
  train_flags.add<std::size_t>("--episode-pool", "train on a fixed pool of this many episodes (0 = fresh)",
                               [](RunConfig& c, const std::size_t& v) { c.episode_pool = v; });

  CLI::App* eval_cmd = app.add_subcommand("eval", "mIoU over test episodes; writes miou.csv");
  FlagSet eval_flags(eval_cmd);
  eval_flags.seed_and_out();
  eval_flags.data();
  eval_flags.decoder();
  eval_flags.add<std::size_t>("--k", "shots per episode", [](RunConfig& c, const std::size_t& v) { c.k = v; });
  eval_flags.add<std::size_t>("--episodes", "number of test episodes",
                              [](RunConfig& c, const std::size_t& v) { c.episodes = v; });
  eval_flags.add<std::size_t>("--workers", "evaluation threads",
                              [](RunConfig& c, const std::size_t& v) { c.workers = v; });
  eval_flags.add<std::string>("--checkpoint", "checkpoint directory",
                              [](RunConfig& c, const std::string& v) { c.checkpoint = v; });

  CLI::App* predict_cmd = app.add_subcommand("predict", "K-shot mask of one test episode");
  FlagSet predict_flags(predict_cmd);
  predict_flags.seed_and_out();
  predict_flags.data();
  predict_flags.decoder();
  predict_flags.add<std::size_t>("--k", "shots", [](RunConfig& c, const std::size_t& v) { c.k = v; });
  predict_flags.add<std::size_t>("--episode", "index of the test episode",
                                 [](RunConfig& c, const std::size_t& v) { c.episode = v; });
  predict_flags.add<std::string>("--checkpoint", "checkpoint directory",
                                 [](RunConfig& c, const std::string& v) { c.checkpoint = v; });

  CLI::App* viz_cmd = app.add_subcommand("viz", "per-layer averaged activation maps as PGM");
  FlagSet viz_flags(viz_cmd);
  viz_flags.seed_and_out();
  viz_flags.data();
  viz_flags.decoder();
  viz_flags.add<std::size_t>("--episode", "index of the test episode",
                             [](RunConfig& c, const std::size_t& v) { c.episode = v; });

  CLI::App* params_cmd = app.add_subcommand("params", "report the learnable parameter count");
  FlagSet params_flags(params_cmd);
  params_flags.decoder();
  params_flags.add<std::uint64_t>("--seed", "random seed",
                                  [](RunConfig& c, const std::uint64_t& v) { c.seed = v; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_flags.resolve(), out);
    if (train_cmd->parsed()) return cmd_train(train_flags.resolve(), out);
    if (eval_cmd->parsed()) return cmd_eval(eval_flags.resolve(), out);
    if (predict_cmd->parsed()) return cmd_predict(predict_flags.resolve(), out);
    if (viz_cmd->parsed()) return cmd_viz(viz_flags.resolve(), out);
    if (params_cmd->parsed()) return cmd_params(params_flags.resolve(), out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace fss::cli
