#pragma once

#include <cstdint>
#include <vector>

#include "fss/autodiff.h"
#include "fss/tensor.h"

namespace fss {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  // Throws ConfigError for lr <= 0 or betas outside [0, 1).
  void validate() const;
};

// One bias-corrected Adam update of a single tensor, step number `t` >= 1.
// Updates `param`, `m` and `v` in place and depends on nothing else, so equal
// inputs always produce bit-identical outputs.
template <typename T>
void adam_step(BasicTensor<T>& param, const BasicTensor<T>& grad, BasicTensor<T>& m,
               BasicTensor<T>& v, std::uint64_t t, const AdamConfig& cfg);

// Optimizer state for an ordered list of parameters. Moments are created
// lazily on the first step and must keep matching the parameter shapes.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {});

  void step(std::vector<ad::ParamTensor<T>>& params);

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<BasicTensor<T>>& first_moments() const { return m_; }
  const std::vector<BasicTensor<T>>& second_moments() const { return v_; }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<BasicTensor<T>> m_;
  std::vector<BasicTensor<T>> v_;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace fss
