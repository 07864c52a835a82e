#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>

#include "semiseg/params.hpp"

namespace semiseg::optim {

// lr0 * (1 - iter / max_iters)^power, clamped at zero past the end.
double poly_lr(std::int64_t iter, std::int64_t max_iters, double lr0, double power);

// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
//   v <- m v + g + wd * theta;  theta <- theta - lr v
// Parameters without a gradient this step are left alone.
template <typename T>
class Sgd {
 public:
  Sgd(double momentum = 0.9, double weight_decay = 5e-4) : momentum_(momentum), weight_decay_(weight_decay) {}

  using Filter = std::function<bool(const std::string&)>;
  void step(ParamSet<T>& ps, double lr, const Filter& select = {});

  std::unordered_map<std::string, Tensor<T>>& velocity() { return velocity_; }
  const std::unordered_map<std::string, Tensor<T>>& velocity() const { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  std::unordered_map<std::string, Tensor<T>> velocity_;
};

// teacher <- alpha * teacher + (1 - alpha) * student, for every teacher entry.
template <typename T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, double alpha);

}  // namespace semiseg::optim
