#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "fss/metrics.h"

namespace fss {
namespace {

Tensor block(std::size_t h, std::size_t w, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) {
  Tensor t({h, w});
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) t.at({y, x}) = 1;
  return t;
}

Tensor random_mask(std::mt19937_64& rng, std::size_t n) {
  Tensor t({n, n});
  for (float& v : t.values()) v = static_cast<float>(rng() % 3 == 0);
  return t;
}

TEST(Confusion, HandCountedFourByFour) {
  ConfusionAccumulator acc;
  acc.accumulate(7, block(4, 4, 0, 2, 0, 2), block(4, 4, 0, 1, 0, 4));
  EXPECT_EQ(acc.counts_for(7).intersection, 2u);
  EXPECT_EQ(acc.counts_for(7).union_, 6u);
  EXPECT_DOUBLE_EQ(*miou(acc, {7}).per_class[0].iou, 1.0 / 3);
}

TEST(Confusion, PerfectAndDisjointPredictions) {
  ConfusionAccumulator acc;
  Tensor m = block(5, 5, 1, 3, 1, 4);
  acc.accumulate(1, m, m);
  EXPECT_EQ(acc.counts_for(1).intersection, acc.counts_for(1).union_);
  acc.accumulate(2, block(5, 5, 0, 1, 0, 1), block(5, 5, 4, 5, 3, 5));
  EXPECT_EQ(acc.counts_for(2).intersection, 0u);
  EXPECT_EQ(acc.counts_for(2).union_, 3u);
}

TEST(Confusion, RejectsNonBinaryAndMismatchedInputs) {
  ConfusionAccumulator acc;
  EXPECT_THROW(acc.accumulate(0, Tensor({2, 2}, 0.5f), Tensor({2, 2})), DataError);
  EXPECT_THROW(acc.accumulate(0, Tensor({2, 2}), Tensor({2, 3})), ShapeError);
  EXPECT_THROW(acc.add_counts(0, 3, 2), DataError);
}

TEST(Miou, Arithmetic) {
  ConfusionAccumulator acc;
  acc.add_counts(0, 1, 3);
  acc.add_counts(1, 4, 4);
  EXPECT_DOUBLE_EQ(miou(acc, {0, 1}).miou, 2.0 / 3);
  ConfusionAccumulator perfect;
  perfect.add_counts(3, 10, 10);
  perfect.add_counts(4, 1, 1);
  EXPECT_EQ(miou(perfect, {3, 4}).miou, 1.0);
}

TEST(Miou, UndefinedClassesAreExcludedAndFlagged) {
  ConfusionAccumulator acc;
  acc.add_counts(0, 1, 2);
  const MiouResult r = miou(acc, {0, 5});
  EXPECT_EQ(r.defined_classes, 1u);
  EXPECT_DOUBLE_EQ(r.miou, 0.5);
  EXPECT_FALSE(r.per_class[1].iou.has_value());
  EXPECT_THROW(miou(acc, {}), ConfigError);
}

TEST(Miou, OrderIndependentAndMergeAssociative) {
  std::mt19937_64 rng(3);
  struct Ep {
    int cls;
    Tensor pred, gt;
  };
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Ep> eps;
    for (int i = 0; i < 12; ++i) eps.push_back({static_cast<int>(rng() % 3), random_mask(rng, 6), random_mask(rng, 6)});
    ConfusionAccumulator all;
    for (const Ep& e : eps) all.accumulate(e.cls, e.pred, e.gt);

    std::shuffle(eps.begin(), eps.end(), rng);
    ConfusionAccumulator a, b, c;
    const std::size_t cut1 = rng() % eps.size(), cut2 = cut1 + rng() % (eps.size() - cut1);
    for (std::size_t i = 0; i < eps.size(); ++i) (i < cut1 ? a : i < cut2 ? b : c).accumulate(eps[i].cls, eps[i].pred, eps[i].gt);
    ConfusionAccumulator left = a;  // (a + b) + c
    left.merge(b);
    left.merge(c);
    ConfusionAccumulator bc = b, right = a;  // a + (b + c)
    bc.merge(c);
    right.merge(bc);
    EXPECT_EQ(left, all);
    EXPECT_EQ(right, all);
    EXPECT_EQ(miou(left, {0, 1, 2}).miou, miou(all, {0, 1, 2}).miou);
  }
}

TEST(Miou, BoundedAndMonotoneUnderCorrection) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    Tensor gt = random_mask(rng, 5), pred = random_mask(rng, 5);
    gt[0] = 1;
    ConfusionAccumulator before;
    before.accumulate(0, pred, gt);
    const double m0 = miou(before, {0}).miou;
    EXPECT_GE(m0, 0.0);
    EXPECT_LE(m0, 1.0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == gt[i]) continue;
      pred[i] = gt[i];
      ConfusionAccumulator after;
      after.accumulate(0, pred, gt);
      EXPECT_GE(miou(after, {0}).miou, m0);
      break;
    }
  }
}

TEST(MiouCsv, LayoutAndMetadata) {
  ConfusionAccumulator acc;
  acc.add_counts(0, 1, 3);
  const std::string csv = miou_csv(miou(acc, {0, 1}), CsvMetadata{17, "abc", "1.0", {{"shots", "5"}}});
  EXPECT_NE(csv.find("# seed=17\n"), std::string::npos);
  EXPECT_NE(csv.find("# config_hash=abc\n"), std::string::npos);
  EXPECT_NE(csv.find("# iou_convention=aggregated\n"), std::string::npos);
  EXPECT_NE(csv.find("# shots=5\n"), std::string::npos);
  EXPECT_NE(csv.find("class_id,intersection,union,iou\n"), std::string::npos);
  EXPECT_NE(csv.find("0,1,3,0.333333\n"), std::string::npos);
  EXPECT_NE(csv.find("miou,,,0.333333\n"), std::string::npos);
}

TEST(Fnv1a, KnownVectors) {
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

}  // namespace
}  // namespace fss
