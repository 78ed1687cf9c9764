#include "fss/adam.h"

#include <cmath>

namespace fss {

void AdamConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) {
    throw ConfigError("learning rate must be positive, got " + std::to_string(lr));
  }
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(eps > 0)) throw ConfigError("Adam eps must be positive");
}

template <typename T>
void adam_step(BasicTensor<T>& param, const BasicTensor<T>& grad, BasicTensor<T>& m,
               BasicTensor<T>& v, std::uint64_t t, const AdamConfig& cfg) {
  cfg.validate();
  if (t == 0) throw StateError("Adam step numbers start at 1");
  expect_dims(grad, param.dims(), "adam grad");
  expect_dims(m, param.dims(), "adam first moment");
  expect_dims(v, param.dims(), "adam second moment");
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = b1 * m[i] + (1.0 - b1) * g;
    const double vi = b2 * v[i] + (1.0 - b2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double step = cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
    param[i] = static_cast<T>(param[i] - step);
  }
}

template <typename T>
Adam<T>::Adam(AdamConfig cfg) : cfg_(cfg) {
  cfg_.validate();
}

template <typename T>
void Adam<T>::step(std::vector<ad::ParamTensor<T>>& params) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.dims());
      v_.emplace_back(p.value.dims());
    }
  }
  if (m_.size() != params.size()) {
    throw StateError("Adam was initialised for " + std::to_string(m_.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  ++t_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.grad.dims() != p.value.dims()) p.zero_grad();
    adam_step(p.value, p.grad, m_[i], v_[i], t_, cfg_);
  }
}

template void adam_step(BasicTensor<float>&, const BasicTensor<float>&, BasicTensor<float>&,
                        BasicTensor<float>&, std::uint64_t, const AdamConfig&);
template void adam_step(BasicTensor<double>&, const BasicTensor<double>&, BasicTensor<double>&,
                        BasicTensor<double>&, std::uint64_t, const AdamConfig&);
template class Adam<float>;
template class Adam<double>;

}  // namespace fss
