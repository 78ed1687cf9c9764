#pragma once

#include <cstddef>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "fss/knowledge.h"
#include "fss/tensor.h"

// Dataset manifest: a JSON index of per-image FMTC files.
//
//   {
//     "dataset_id": "...",
//     "grid": {"h": 30, "w": 30, "c": 768, "layers": 12, "c_vl": 512},
//     "classes": {"0": "aeroplane", ...},
//     "records": [{"image_id": "...", "class_ids": [0, 4],
//                  "feature_path": "...", "vl_feature_path": "...",
//                  "mask_path": "..."}],
//     "text_embeddings": {"0": "...", ...}
//   }
//
// Paths are relative to the manifest's directory. Feature files are
// [layers, h, w, c]; VL files [h, w, c_vl]; masks [n, H0, W0] with one binary
// plane per entry of class_ids (a plain [H0, W0] is accepted for a single
// class); text embeddings [c_vl]. "c_vl" is 0 (or absent) when the dataset has
// no vision-language features.
namespace fss {

struct GridSpec {
  std::size_t h = 30, w = 30, c = 0, layers = kNumLayers, c_vl = 0;
  bool operator==(const GridSpec&) const = default;
};

struct ManifestRecord {
  std::string image_id;
  std::vector<int> class_ids;
  std::string feature_path;
  std::optional<std::string> vl_feature_path;
  std::string mask_path;
  bool operator==(const ManifestRecord&) const = default;
};

struct Manifest {
  std::string dataset_id;
  GridSpec grid;
  std::map<int, std::string> classes;
  std::vector<ManifestRecord> records;
  std::map<int, std::string> text_embeddings;
  std::filesystem::path base_dir;  // not serialised

  // Parses the JSON. DataError for malformed documents; does not touch the
  // referenced files.
  static Manifest parse(const std::string& json_text, std::filesystem::path base_dir);
  static Manifest load(const std::filesystem::path& path);

  std::string to_json() const;
  void save(const std::filesystem::path& path) const;

  // Checks that every referenced file exists and that its header agrees with
  // the declared grid. Throws DataError naming the first offending record.
  void validate() const;

  std::filesystem::path resolve(const std::string& rel) const { return base_dir / rel; }
  std::vector<int> class_ids() const;
  // Indices of records that contain `class_id`, in manifest order.
  std::vector<std::size_t> records_with(int class_id) const;
  bool has_vl() const { return grid.c_vl > 0; }
};

// One record's tensors, loaded from disk.
struct LoadedImage {
  FeatureStack features;
  std::optional<Tensor> vl_features;
  Tensor masks;  // [n, H0, W0]
  std::vector<int> class_ids;

  // Binary [H0, W0] mask of `class_id`; DataError if the image lacks it.
  Tensor mask_for(int class_id) const;
};

// Thread-safe lazy loader over a manifest with a bounded cache.
class Dataset {
 public:
  explicit Dataset(Manifest manifest, std::size_t cache_capacity = 128);

  const Manifest& manifest() const { return manifest_; }
  std::shared_ptr<const LoadedImage> image(std::size_t record) const;
  std::shared_ptr<const TextEmbedding> text(int class_id) const;

 private:
  Manifest manifest_;
  std::size_t capacity_;
  mutable std::mutex mu_;
  mutable std::map<std::size_t, std::shared_ptr<const LoadedImage>> images_;
  mutable std::deque<std::size_t> order_;
  mutable std::map<int, std::shared_ptr<const TextEmbedding>> texts_;
};

}  // namespace fss
