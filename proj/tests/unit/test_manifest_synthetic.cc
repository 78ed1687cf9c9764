#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "fss/container.h"
#include "fss/kernels.h"
#include "fss/synthetic.h"
#include "temp_dir.h"

namespace fss {
namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

// One generated store shared by the read-only tests below.
class SyntheticStore : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing::TempDir;
    manifest_ = new Manifest(generate_synthetic(dir_->path() / "manifest.json", 8, 3, 21));
  }
  static void TearDownTestSuite() {
    delete manifest_;
    delete dir_;
  }
  static testing::TempDir* dir_;
  static Manifest* manifest_;
};
testing::TempDir* SyntheticStore::dir_ = nullptr;
Manifest* SyntheticStore::manifest_ = nullptr;

TEST_F(SyntheticStore, ManifestShapeAndValidation) {
  const Manifest& m = *manifest_;
  EXPECT_EQ(m.dataset_id, "synthetic");
  EXPECT_EQ(m.grid, (GridSpec{30, 30, 64, 12, 32}));
  EXPECT_EQ(m.records.size(), 24u);
  EXPECT_EQ(m.classes.size(), 8u);
  EXPECT_EQ(m.text_embeddings.size(), 8u);
  EXPECT_NO_THROW(m.validate());
  const Manifest reloaded = Manifest::load(dir_->path() / "manifest.json");
  EXPECT_EQ(reloaded.records, m.records);
  EXPECT_EQ(reloaded.to_json(), m.to_json());
}

TEST_F(SyntheticStore, MasksCoverTenToFortyPercent) {
  for (const auto& r : manifest_->records) {
    const Tensor mask = io::read_tensor(manifest_->resolve(r.mask_path));
    ASSERT_EQ(mask.dims(), (Shape{1, 120, 120}));
    double fg = 0;
    for (float v : mask.values()) {
      ASSERT_TRUE(v == 0.0f || v == 1.0f);
      fg += v;
    }
    const double frac = fg / mask.size();
    EXPECT_GE(frac, 0.10) << r.image_id;
    EXPECT_LE(frac, 0.40) << r.image_id;
  }
}

TEST_F(SyntheticStore, PrototypesAreNearlyOrthogonal) {
  const Tensor p = io::read_tensor(dir_->path() / "generator" / "prototypes.fmtc");
  const std::size_t n = p.dim(0), c = p.dim(1);
  ASSERT_EQ(c, 64u);
  for (std::size_t a = 0; a < n; ++a) {
    double na = 0;
    for (std::size_t k = 0; k < c; ++k) na += p[a * c + k] * p[a * c + k];
    EXPECT_NEAR(na, 1.0, 1e-5);
    for (std::size_t b = a + 1; b < n; ++b) {
      double dot = 0;
      for (std::size_t k = 0; k < c; ++k) dot += p[a * c + k] * p[b * c + k];
      EXPECT_LT(std::fabs(dot), 0.3) << a << " vs " << b;
    }
  }
}

TEST_F(SyntheticStore, SameClassForegroundCorrelatesMoreThanBackground) {
  Dataset data(*manifest_);
  for (int cls = 0; cls < 8; ++cls) {
    const auto ids = manifest_->records_with(cls);
    const auto q = data.image(ids[0]), s = data.image(ids[1]);
    const auto maps = build_vision_correlations(q->features, s->features, 12);
    const Tensor qm = kernels::nearest_resize(q->mask_for(cls), 30, 30);
    const Tensor sm = kernels::nearest_resize(s->mask_for(cls), 30, 30);
    double fg_sum = 0, bg_sum = 0;
    std::size_t fg_n = 0, bg_n = 0;
    for (std::size_t i = 0; i < 900; ++i) {
      if (qm[i] == 0) continue;
      for (std::size_t j = 0; j < 900; ++j) {
        const double v = maps[0][i * 900 + j];
        if (sm[j] != 0) {
          fg_sum += v;
          ++fg_n;
        } else {
          bg_sum += v;
          ++bg_n;
        }
      }
    }
    EXPECT_GT(fg_sum / fg_n, bg_sum / bg_n) << "class " << cls;
  }
}

TEST_F(SyntheticStore, NearestPrototypeSeparability) {
  const Tensor protos = io::read_tensor(dir_->path() / "generator" / "prototypes.fmtc");
  const std::size_t np = protos.dim(0), c = protos.dim(1), n_classes = manifest_->classes.size();
  std::size_t correct = 0, total = 0;
  for (const auto& r : manifest_->records) {
    const Tensor f = io::read_tensor(manifest_->resolve(r.feature_path));
    const Tensor label = kernels::nearest_resize(io::read_tensor(manifest_->resolve(r.mask_path)).reshaped({120, 120}), 30, 30);
    const float* last = f.data() + 11 * 900 * c;
    for (std::size_t p = 0; p < 900; ++p) {
      std::size_t best = 0;
      double best_dot = -1e300;
      for (std::size_t k = 0; k < np; ++k) {
        double dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += last[p * c + j] * protos[k * c + j];
        if (dot > best_dot) {
          best_dot = dot;
          best = k;
        }
      }
      const bool fg = label[p] != 0;
      correct += fg ? best == static_cast<std::size_t>(r.class_ids[0]) : best >= n_classes;
      ++total;
    }
  }
  EXPECT_GE(static_cast<double>(correct) / total, 0.95);
}

TEST(Synthetic, ByteIdenticalForFixedSeed) {
  testing::TempDir a, b;
  SyntheticOptions small;
  small.grid = 6;
  small.mask_side = 24;
  small.c_feat = 8;
  small.c_vl = 4;
  small.max_prototype_cos = 0.75;
  generate_synthetic(a.path() / "manifest.json", 4, 2, 5, small);
  generate_synthetic(b.path() / "manifest.json", 4, 2, 5, small);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), a.path());
    EXPECT_EQ(slurp(e.path()), slurp(b.path() / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 20u);
}

TEST(Synthetic, ClassCountMustBeMultipleOfFour) {
  testing::TempDir d;
  EXPECT_THROW(generate_synthetic(d.path() / "manifest.json", 6, 2, 1), ConfigError);
  EXPECT_THROW(generate_synthetic(d.path() / "manifest.json", 0, 2, 1), ConfigError);
}

TEST(Manifest, RejectsRecordsDisagreeingWithGrid) {
  testing::TempDir d;
  SyntheticOptions small;
  small.grid = 4;
  small.mask_side = 8;
  small.c_feat = 8;
  small.c_vl = 4;
  small.max_prototype_cos = 0.9;
  Manifest m = generate_synthetic(d.path() / "manifest.json", 4, 2, 2, small);
  EXPECT_NO_THROW(m.validate());
  io::write_tensor(m.resolve(m.records[3].feature_path), Tensor({12, 4, 4, 7}));
  EXPECT_THROW(m.validate(), DataError);
  io::write_tensor(m.resolve(m.records[3].feature_path), Tensor({12, 4, 4, 8}));
  EXPECT_NO_THROW(m.validate());
  std::filesystem::remove(m.resolve(m.records[1].mask_path));
  EXPECT_THROW(m.validate(), DataError);
}

TEST(Manifest, ParseErrors) {
  EXPECT_THROW(Manifest::parse("{", "."), DataError);
  EXPECT_THROW(Manifest::parse(R"({"dataset_id":"x"})", "."), DataError);
  const char* unknown_class = R"({"dataset_id":"x","grid":{"h":2,"w":2,"c":3},"classes":{"0":"a"},
    "records":[{"image_id":"i","class_ids":[4],"feature_path":"f","mask_path":"m"}]})";
  EXPECT_THROW(Manifest::parse(unknown_class, "."), DataError);
  const char* bad_layers = R"({"dataset_id":"x","grid":{"h":2,"w":2,"c":3,"layers":11},"classes":{},"records":[]})";
  EXPECT_THROW(Manifest::parse(bad_layers, "."), DataError);
  EXPECT_THROW(Manifest::load("/nonexistent/manifest.json"), DataError);
}

TEST(Manifest, DatasetCachesAndLoadsText) {
  testing::TempDir d;
  SyntheticOptions small;
  small.grid = 4;
  small.mask_side = 8;
  small.c_feat = 8;
  small.c_vl = 4;
  small.max_prototype_cos = 0.9;
  Manifest m = generate_synthetic(d.path() / "manifest.json", 4, 2, 2, small);
  Dataset data(m, 2);
  auto first = data.image(0);
  EXPECT_EQ(first.get(), data.image(0).get());
  EXPECT_EQ(first->features.h(), 4u);
  EXPECT_EQ(first->mask_for(m.records[0].class_ids[0]).dims(), (Shape{8, 8}));
  EXPECT_THROW(first->mask_for(99), DataError);
  auto text = data.text(2);
  EXPECT_EQ(text->vector.dims(), (Shape{4}));
  EXPECT_EQ(text->class_id, 2);
}

}  // namespace
}  // namespace fss
