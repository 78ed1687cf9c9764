#include "fss/synthetic.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "fss/container.h"
#include "fss/random.h"

namespace fss {
namespace {

using Vec = std::vector<double>;

Vec random_unit(rnd::Engine& rng, std::size_t n) {
  Vec v(n);
  double norm = 0;
  do {
    norm = 0;
    for (double& x : v) {
      x = rnd::normal(rng);
      norm += x * x;
    }
  } while (norm < 1e-12);
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

double dot(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Unit vectors whose pairwise |cos| stays below `max_cos`; each new vector is
// redrawn until it is compatible with all earlier ones.
std::vector<Vec> separated_units(rnd::Engine& rng, std::size_t count, std::size_t dim,
                                 double max_cos) {
  std::vector<Vec> out;
  for (std::size_t k = 0; k < count; ++k) {
    for (int attempt = 0;; ++attempt) {
      if (attempt == 10000) {
        throw ConfigError("cannot draw " + std::to_string(count) + " prototypes in " +
                          std::to_string(dim) + " dims with |cos| < " + std::to_string(max_cos));
      }
      Vec v = random_unit(rng, dim);
      bool ok = true;
      for (const Vec& u : out) ok = ok && std::fabs(dot(u, v)) < max_cos;
      if (ok) {
        out.push_back(std::move(v));
        break;
      }
    }
  }
  return out;
}

// Filled ellipse or axis-aligned rectangle covering 10-40% of a side x side
// canvas.
std::vector<float> random_shape(rnd::Engine& rng, std::size_t side) {
  const double n = static_cast<double>(side);
  for (;;) {
    const double area = rnd::uniform(rng, 0.1, 0.4) * n * n;
    const double aspect = rnd::uniform(rng, 0.6, 1.6);
    const bool ellipse = rnd::uniform01(rng) < 0.5;
    double rx, ry;
    if (ellipse) {
      rx = std::sqrt(area / (std::numbers::pi * aspect));
      ry = aspect * rx;
    } else {
      rx = 0.5 * std::sqrt(area / aspect);
      ry = aspect * rx;
    }
    if (2 * rx >= n - 2 || 2 * ry >= n - 2) continue;
    const double cx = rnd::uniform(rng, rx, n - rx);
    const double cy = rnd::uniform(rng, ry, n - ry);
    std::vector<float> mask(side * side, 0.0f);
    std::size_t fg = 0;
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
        const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
        const bool inside = ellipse ? dx * dx + dy * dy <= 1.0 : std::fabs(dx) <= 1 && std::fabs(dy) <= 1;
        if (inside) {
          mask[y * side + x] = 1.0f;
          ++fg;
        }
      }
    }
    const double frac = static_cast<double>(fg) / (n * n);
    if (frac >= 0.1 && frac <= 0.4) return mask;
  }
}

// Fraction of foreground mask pixels inside each grid cell.
std::vector<double> coverage(const std::vector<float>& mask, std::size_t side, std::size_t grid) {
  const std::size_t f = side / grid;
  std::vector<double> cov(grid * grid, 0.0);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) cov[(y / f) * grid + x / f] += mask[y * side + x];
  }
  for (double& c : cov) c /= static_cast<double>(f * f);
  return cov;
}

Tensor to_tensor(Shape dims, const std::vector<double>& v) {
  return Tensor(std::move(dims), std::vector<float>(v.begin(), v.end()));
}

std::string padded(const char* prefix, std::size_t i, int width) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

}  // namespace

Manifest generate_synthetic(const std::filesystem::path& manifest_path, std::size_t n_classes,
                            std::size_t images_per_class, std::uint64_t seed,
                            const SyntheticOptions& o) {
  if (n_classes == 0 || n_classes % 4 != 0) {
    throw ConfigError("synthetic class count must be a positive multiple of 4, got " +
                      std::to_string(n_classes));
  }
  if (images_per_class == 0) throw ConfigError("images_per_class must be positive");
  if (o.grid == 0 || o.mask_side % o.grid != 0) {
    throw ConfigError("mask side must be a multiple of the feature grid");
  }

  const std::filesystem::path base = manifest_path.parent_path().empty()
                                         ? std::filesystem::path(".")
                                         : manifest_path.parent_path();
  for (const char* sub : {"features", "vl", "masks", "text", "generator"}) {
    std::filesystem::create_directories(base / sub);
  }

  rnd::Engine proto_rng = rnd::derive(seed, 1);
  const std::vector<Vec> class_protos =
      separated_units(proto_rng, n_classes + o.background_prototypes, o.c_feat, o.max_prototype_cos);
  const std::vector<Vec> texts = separated_units(proto_rng, n_classes, o.c_vl, o.max_text_cos);

  // The generating prototypes are kept for inspection; the manifest does not
  // reference them.
  {
    std::vector<double> flat;
    for (const Vec& v : class_protos) flat.insert(flat.end(), v.begin(), v.end());
    io::write_tensor(base / "generator" / "prototypes.fmtc",
                     to_tensor({class_protos.size(), o.c_feat}, flat));
  }

  Manifest m;
  m.dataset_id = "synthetic";
  m.base_dir = base;
  m.grid = GridSpec{o.grid, o.grid, o.c_feat, kNumLayers, o.c_vl};

  for (std::size_t c = 0; c < n_classes; ++c) {
    const int id = static_cast<int>(c);
    m.classes[id] = padded("synthetic_class_", c, 2);
    const std::string rel = "text/" + padded("class_", c, 3) + ".fmtc";
    io::write_tensor(base / rel, to_tensor({o.c_vl}, texts[c]));
    m.text_embeddings[id] = rel;
  }

  const std::size_t g2 = o.grid * o.grid;
  for (std::size_t c = 0; c < n_classes; ++c) {
    for (std::size_t k = 0; k < images_per_class; ++k) {
      const std::size_t index = c * images_per_class + k;
      rnd::Engine rng = rnd::derive(seed, 1000 + index);
      const std::vector<float> mask = random_shape(rng, o.mask_side);
      const std::vector<double> cov = coverage(mask, o.mask_side, o.grid);

      // Background: two prototypes blended along a random direction.
      const std::size_t b0 = n_classes + rnd::below(rng, o.background_prototypes);
      std::size_t b1 = n_classes + rnd::below(rng, o.background_prototypes);
      if (o.background_prototypes > 1) {
        while (b1 == b0) b1 = n_classes + rnd::below(rng, o.background_prototypes);
      }
      const double theta = rnd::uniform(rng, 0, 2 * std::numbers::pi);
      const Vec nuisance = random_unit(rng, o.c_feat);
      const Vec vl_background = random_unit(rng, o.c_vl);
      Vec appearance = random_unit(rng, o.c_feat);
      const double spread = rnd::uniform(rng, 0, o.appearance_variation);
      double norm = 0;
      for (std::size_t ch = 0; ch < o.c_feat; ++ch) {
        appearance[ch] = class_protos[c][ch] + spread * appearance[ch];
        norm += appearance[ch] * appearance[ch];
      }
      for (double& a : appearance) a /= std::sqrt(norm);

      std::vector<double> feats(kNumLayers * g2 * o.c_feat);
      for (std::size_t l = 0; l < kNumLayers; ++l) {
        const double alpha =
            o.alpha_first + (o.alpha_last - o.alpha_first) * static_cast<double>(l) / (kNumLayers - 1);
        for (std::size_t p = 0; p < g2; ++p) {
          const double u = (static_cast<double>(p % o.grid) + 0.5) / o.grid - 0.5;
          const double v = (static_cast<double>(p / o.grid) + 0.5) / o.grid - 0.5;
          const double mix = std::clamp(0.5 + u * std::cos(theta) + v * std::sin(theta), 0.0, 1.0);
          const double f = cov[p];
          double* out = feats.data() + (l * g2 + p) * o.c_feat;
          for (std::size_t ch = 0; ch < o.c_feat; ++ch) {
            const double bg = mix * class_protos[b0][ch] + (1 - mix) * class_protos[b1][ch];
            const double signal = f * appearance[ch] + (1 - f) * bg;
            out[ch] = alpha * signal + (1 - alpha) * nuisance[ch] + o.feature_noise * rnd::normal(rng);
          }
        }
      }
      const double vl_strength = rnd::uniform(rng, o.vl_strength_min, 1.0);
      std::vector<double> vl(g2 * o.c_vl);
      for (std::size_t p = 0; p < g2; ++p) {
        const double f = vl_strength * cov[p];
        for (std::size_t ch = 0; ch < o.c_vl; ++ch) {
          vl[p * o.c_vl + ch] = f * texts[c][ch] + (1 - f) * vl_background[ch] + o.vl_noise * rnd::normal(rng);
        }
      }

      ManifestRecord rec;
      rec.image_id = padded("img_", index, 5);
      rec.class_ids = {static_cast<int>(c)};
      rec.feature_path = "features/" + rec.image_id + ".fmtc";
      rec.vl_feature_path = "vl/" + rec.image_id + ".fmtc";
      rec.mask_path = "masks/" + rec.image_id + ".fmtc";
      io::write_tensor(base / rec.feature_path, to_tensor({kNumLayers, o.grid, o.grid, o.c_feat}, feats));
      io::write_tensor(base / *rec.vl_feature_path, to_tensor({o.grid, o.grid, o.c_vl}, vl));
      io::write_tensor(base / rec.mask_path,
                       Tensor({1, o.mask_side, o.mask_side}, std::vector<float>(mask)));
      m.records.push_back(std::move(rec));
    }
  }
  m.save(manifest_path);
  return m;
}

}  // namespace fss
