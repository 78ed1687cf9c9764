#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fss/adam.h"
#include "fss/decoder.h"
#include "fss/manifest.h"
#include "fss/metrics.h"
#include "fss/random.h"

namespace fss {

enum class DatasetStyle { kPascal, kCoco, kSynthetic };

DatasetStyle parse_dataset_style(const std::string& s);  // pascal | coco | synthetic
const char* dataset_style_name(DatasetStyle s);

struct FoldSpec {
  std::string dataset_id;
  int fold_index = 0;
  std::vector<int> train_classes;
  std::vector<int> test_classes;
};

// Four folds over `class_ids` (taken in ascending order; positions, not ids,
// decide membership). PASCAL style tests positions [5i, 5i + 5) of 20; COCO
// style tests positions {i, i + 4, ...} of 80; synthetic style tests the i-th
// contiguous quarter of any multiple of 4. ConfigError otherwise.
std::vector<FoldSpec> make_folds(const std::string& dataset_id, DatasetStyle style,
                                 std::vector<int> class_ids);

enum class Split { kTrain, kTest };

// An episode by reference: record indices into the manifest.
struct EpisodeRef {
  std::uint64_t id = 0;
  int class_id = 0;
  std::size_t query = 0;
  std::vector<std::size_t> supports;
};

// Uniform class from the split, then K + 1 distinct images containing it;
// the first draw is the query. SamplingError names a class with fewer than
// K + 1 images.
EpisodeRef sample_episode(const Manifest& manifest, const FoldSpec& fold, Split split,
                          std::size_t shots, rnd::Engine& rng, std::uint64_t id = 0);

// A materialised episode: masks are binarised to the episode class.
struct Episode {
  std::uint64_t id = 0;
  int class_id = 0;
  QuerySample query;
  std::vector<SupportSample> supports;
  std::optional<TextEmbedding> text;
};

Episode load_episode(const Dataset& data, const EpisodeRef& ref, bool with_text);

struct TrainOptions {
  std::size_t iterations = 300;
  AdamConfig adam;
  std::uint64_t seed = 0;
  // 0 samples a fresh episode every step; otherwise this many episodes are
  // drawn up front and visited in order, cyclically.
  std::size_t episode_pool = 0;
  std::function<void(std::size_t step, double loss)> on_step;
};

struct TrainResult {
  DecoderParams params;
  std::vector<double> losses;
  std::vector<EpisodeRef> pool;  // the fixed pool, when one was used
  std::uint64_t steps = 0;
};

// Batch-one episodic training with 1-shot episodes from the fold's train
// classes. The query mask is nearest-resized to the logits grid (2h x 2w).
// NumericError, naming the episode, on a non-finite loss.
TrainResult train(const Dataset& data, const FoldSpec& fold, const DecoderConfig& config,
                  const TrainOptions& options, const DecoderParams* initial = nullptr);

// Pixelwise majority vote over K binary maps, ties to foreground. DataError
// for K = 0 or mismatched dims.
Tensor vote(const std::vector<Tensor>& maps);

// One 1-shot forward per support at the query mask resolution, argmax, vote.
Tensor predict_kshot(const Episode& episode, const DecoderParams& params,
                     const DecoderConfig& config);

struct EvalOptions {
  std::size_t episodes = 1000;
  std::size_t shots = 1;
  std::size_t workers = 1;
  std::uint64_t seed = 0;
  Split split = Split::kTest;
};

struct EvalResult {
  ConfusionAccumulator confusion;
  MiouResult miou;
};

// Samples the episodes sequentially from `seed`, then spreads them over
// worker threads with private accumulators. The result does not depend on the
// worker count.
EvalResult evaluate(const Dataset& data, const FoldSpec& fold, const DecoderParams& params,
                    const DecoderConfig& config, const EvalOptions& options);

// Same, over an explicit episode list; `classes` is the mIoU class set.
EvalResult evaluate_episodes(const Dataset& data, const std::vector<EpisodeRef>& episodes,
                             const std::vector<int>& classes, const DecoderParams& params,
                             const DecoderConfig& config, std::size_t workers);

// "step,loss" CSV with fixed formatting.
std::string loss_csv(const std::vector<double>& losses);

}  // namespace fss
