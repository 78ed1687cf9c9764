#pragma once

#include <cstdint>
#include <filesystem>

#include "fss/manifest.h"

namespace fss {

struct SyntheticOptions {
  std::size_t grid = 30;         // feature grid side
  std::size_t mask_side = 120;   // native mask side, a multiple of grid
  std::size_t c_feat = 64;
  std::size_t c_vl = 32;
  std::size_t background_prototypes = 4;
  double alpha_first = 0.2;      // foreground/background signal weight at layer 1
  double alpha_last = 1.0;       // ... and at layer 12
  double feature_noise = 0.2;    // per-channel std of the additive noise
  double vl_noise = 0.25;
  // Per-image strength of the VL foreground response, uniform in
  // [vl_strength_min, 1]. Dense VL maps are unreliable on some images.
  double vl_strength_min = 0.0;
  double max_prototype_cos = 0.3;
  double max_text_cos = 0.5;     // same bound for the class text embeddings
  // Each image draws its own foreground appearance, normalize(u_c + v * r)
  // with r a random unit vector and v uniform in [0, appearance_variation].
  // Images far from the prototype make poor supports.
  double appearance_variation = 1.5;
};

// Writes a synthetic dataset next to `manifest_path` (features/, vl/,
// masks/, text/) and the manifest itself. generator/prototypes.fmtc holds the
// class prototypes followed by the background prototypes, [n + nb, c_feat].
// Every class gets a unit prototype
// and a text embedding; every image a single ellipse or rectangle covering
// 10-40% of the mask. Layer features mix a per-image perturbation of the
// class prototype (foreground) or a background prototype mixture (elsewhere)
// with an image-wide nuisance vector, the class signal growing linearly with
// depth. Output bytes depend only on
// the arguments. ConfigError unless n_classes is a positive multiple of 4.
Manifest generate_synthetic(const std::filesystem::path& manifest_path, std::size_t n_classes,
                            std::size_t images_per_class, std::uint64_t seed,
                            const SyntheticOptions& options = {});

}  // namespace fss
