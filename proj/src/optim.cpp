#include "semiseg/optim.hpp"

#include <algorithm>
#include <cmath>

namespace semiseg::optim {

double poly_lr(std::int64_t iter, std::int64_t max_iters, double lr0, double power) {
  if (max_iters <= 0) throw ConfigError("poly_lr needs max_iters > 0");
  const double frac = std::clamp(1.0 - static_cast<double>(iter) / static_cast<double>(max_iters), 0.0, 1.0);
  return lr0 * std::pow(frac, power);
}

template <typename T>
void Sgd<T>::step(ParamSet<T>& ps, double lr, const Filter& select) {
  const T m = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_), eta = static_cast<T>(lr);
  for (auto& [name, p] : ps.entries()) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    if (select && !select(name)) continue;
    auto it = velocity_.find(name);
    if (it == velocity_.end()) it = velocity_.emplace(name, Tensor<T>(p.shape())).first;
    Tensor<T>& v = it->second;
    Tensor<T>& theta = p.mutable_value();
    const Tensor<T>& g = p.grad();
    for (std::int64_t i = 0; i < theta.numel(); ++i) {
      v[i] = m * v[i] + g[i] + wd * theta[i];
      theta[i] -= eta * v[i];
    }
  }
}

template <typename T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("EMA decay must lie in [0, 1]");
  const T a = static_cast<T>(alpha), b = static_cast<T>(1.0 - alpha);
  for (auto& [name, t] : teacher.entries()) {
    const Tensor<T>& s = student.at(name).value();
    Tensor<T>& tv = t.mutable_value();
    tv.check_same(s);
    for (std::int64_t i = 0; i < tv.numel(); ++i) tv[i] = a * tv[i] + b * s[i];
  }
}

template class Sgd<float>;
template class Sgd<double>;
template void ema_update<float>(ParamSet<float>&, const ParamSet<float>&, double);
template void ema_update<double>(ParamSet<double>&, const ParamSet<double>&, double);

}  // namespace semiseg::optim
