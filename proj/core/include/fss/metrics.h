#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fss/tensor.h"

namespace fss {

// Per-class intersection and union pixel counts, summed over episodes.
class ConfusionAccumulator {
 public:
  struct Counts {
    std::uint64_t intersection = 0;
    std::uint64_t union_ = 0;
    bool operator==(const Counts&) const = default;
  };

  // Adds |pred & gt| and |pred | gt| for `class_id`. Both maps must be binary
  // and the same dims (DataError / ShapeError otherwise).
  void accumulate(int class_id, const Tensor& pred, const Tensor& gt);

  void add_counts(int class_id, std::uint64_t intersection, std::uint64_t union_count);

  // Folds another accumulator in; integer sums make this exact and associative.
  void merge(const ConfusionAccumulator& other);

  const std::map<int, Counts>& counts() const { return counts_; }
  Counts counts_for(int class_id) const;

  bool operator==(const ConfusionAccumulator&) const = default;

 private:
  std::map<int, Counts> counts_;
};

struct ClassIoU {
  int class_id = 0;
  std::uint64_t intersection = 0;
  std::uint64_t union_ = 0;
  std::optional<double> iou;  // empty when union is zero
};

struct MiouResult {
  double miou = 0;
  std::vector<ClassIoU> per_class;  // ordered by class id
  std::size_t defined_classes = 0;
};

// Unweighted mean of I/U over `classes`; classes with U = 0 are listed but
// excluded from the mean. ConfigError for an empty class set; if no class is
// defined the mean is reported as 0.
MiouResult miou(const ConfusionAccumulator& acc, const std::set<int>& classes);

struct CsvMetadata {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string version;
  std::vector<std::pair<std::string, std::string>> extra;
};

// CSV with '#'-prefixed metadata lines, then class_id,intersection,union,iou
// rows (iou empty when undefined) and a final "miou" row. Fixed formatting, so
// equal inputs give equal bytes.
std::string miou_csv(const MiouResult& result, const CsvMetadata& meta);

// 64-bit FNV-1a, printed as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace fss
