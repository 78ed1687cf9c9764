#include "fss/metrics.h"

#include <cstdio>

#include "fss/kernels.h"

namespace fss {

void ConfusionAccumulator::accumulate(int class_id, const Tensor& pred, const Tensor& gt) {
  expect_dims(pred, gt.dims(), "prediction");
  kernels::expect_binary(pred, "prediction");
  kernels::expect_binary(gt, "ground truth");
  std::uint64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += (p && g) ? 1 : 0;
    uni += (p || g) ? 1 : 0;
  }
  add_counts(class_id, inter, uni);
}

void ConfusionAccumulator::add_counts(int class_id, std::uint64_t intersection,
                                      std::uint64_t union_count) {
  if (intersection > union_count) throw DataError("intersection exceeds union");
  Counts& c = counts_[class_id];
  c.intersection += intersection;
  c.union_ += union_count;
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
  for (const auto& [id, c] : other.counts_) add_counts(id, c.intersection, c.union_);
}

ConfusionAccumulator::Counts ConfusionAccumulator::counts_for(int class_id) const {
  auto it = counts_.find(class_id);
  return it == counts_.end() ? Counts{} : it->second;
}

MiouResult miou(const ConfusionAccumulator& acc, const std::set<int>& classes) {
  if (classes.empty()) throw ConfigError("mIoU over an empty class set");
  MiouResult r;
  double total = 0;
  for (int id : classes) {
    const auto c = acc.counts_for(id);
    ClassIoU row{id, c.intersection, c.union_, std::nullopt};
    if (c.union_ > 0) {
      row.iou = static_cast<double>(c.intersection) / static_cast<double>(c.union_);
      total += *row.iou;
      ++r.defined_classes;
    }
    r.per_class.push_back(row);
  }
  r.miou = r.defined_classes ? total / static_cast<double>(r.defined_classes) : 0.0;
  return r;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string miou_csv(const MiouResult& result, const CsvMetadata& meta) {
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  std::string out;
  out += "# seed=" + std::to_string(meta.seed) + "\n";
  out += "# config_hash=" + meta.config_hash + "\n";
  out += "# version=" + meta.version + "\n";
  out += "# iou_convention=aggregated\n";
  for (const auto& [k, v] : meta.extra) out += "# " + k + "=" + v + "\n";
  std::string undefined;
  for (const auto& c : result.per_class) {
    if (!c.iou) undefined += (undefined.empty() ? "" : ";") + std::to_string(c.class_id);
  }
  if (!undefined.empty()) out += "# undefined_classes=" + undefined + "\n";
  out += "class_id,intersection,union,iou\n";
  for (const auto& c : result.per_class) {
    out += std::to_string(c.class_id) + "," + std::to_string(c.intersection) + "," +
           std::to_string(c.union_) + "," + (c.iou ? fmt(*c.iou) : std::string()) + "\n";
  }
  out += "miou,,," + fmt(result.miou) + "\n";
  return out;
}

}  // namespace fss
