#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "fss/autodiff.h"

namespace fss::testing {

// Relative-error test for one gradient entry. The denominator floor keeps
// entries whose true value is ~0 from turning round-off into huge ratios.
inline constexpr double kGradRelTol = 1e-3;
inline constexpr double kGradDenomFloor = 1e-4;

inline double grad_rel_err(double analytic, double numeric) {
  return std::fabs(analytic - numeric) /
         std::max({std::fabs(analytic), std::fabs(numeric), kGradDenomFloor});
}

// sum(x * weights), a scalar that exposes every entry of x's gradient.
inline ad::Var<double> project(ad::Var<double> x, const Tensor64& weights) {
  ad::Graph<double>& g = x.graph();
  expect_dims(weights, x.dims(), "projection");
  double acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += x.value()[i] * weights[i];
  return g.record(Tensor64({1}, acc), {x}, [x, weights](ad::Graph<double>& gr, const Tensor64& go) {
    if (Tensor64* s = gr.grad_sink(x)) {
      for (std::size_t i = 0; i < weights.size(); ++i) (*s)[i] += go[0] * weights[i];
    }
  });
}

inline Tensor64 random_tensor(std::mt19937_64& rng, Shape dims, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor64 t(std::move(dims));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Values in +-[lo, hi]: keeps inputs away from ReLU kinks.
inline Tensor64 random_away_from_zero(std::mt19937_64& rng, Shape dims, double lo = 0.05, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor64 t(std::move(dims));
  for (double& v : t.values()) v = (rng() & 1 ? 1 : -1) * u(rng);
  return t;
}

struct GradReport {
  double max_rel_err = 0;
  std::size_t checked = 0;
  std::string worst;  // "<param>[<index>]: analytic vs numeric"
  bool ok() const { return max_rel_err <= kGradRelTol; }
};

using LossBuilder = std::function<ad::Var<double>(ad::Graph<double>&, std::vector<ad::Var<double>>&)>;

// Compares reverse-mode gradients of `build` w.r.t. every entry of `params`
// against central differences with the given step.
inline GradReport grad_check(std::vector<ad::ParamTensor<double>>& params, const LossBuilder& build,
                             double step = 1e-4) {
  auto evaluate = [&](bool with_grad) {
    ad::Graph<double> g;
    std::vector<ad::Var<double>> vars;
    for (auto& p : params) vars.push_back(g.parameter(p));
    ad::Var<double> loss = build(g, vars);
    const double v = loss.value()[0];
    if (with_grad) g.backward(loss);
    return v;
  };
  for (auto& p : params) p.zero_grad();
  evaluate(true);
  GradReport report;
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + step;
      const double up = evaluate(false);
      p.value[i] = orig - step;
      const double down = evaluate(false);
      p.value[i] = orig;
      const double numeric = (up - down) / (2 * step);
      const double err = grad_rel_err(p.grad[i], numeric);
      ++report.checked;
      if (err > report.max_rel_err || report.worst.empty()) {
        report.max_rel_err = std::max(report.max_rel_err, err);
        if (err >= report.max_rel_err) {
          report.worst = p.name + "[" + std::to_string(i) + "]: " + std::to_string(p.grad[i]) + " vs " +
                         std::to_string(numeric);
        }
      }
    }
  }
  return report;
}

}  // namespace fss::testing
