#include "semiseg/losses.hpp"

#include <cmath>
#include <vector>

#include "semiseg/ops.hpp"

namespace semiseg::losses {
namespace {

void require_prob_shape(const Shape& p, const Shape& t, const char* what) {
  if (p != t || p.size() < 2)
    throw ShapeError(std::string(what) + ": prediction " + shape_str(p) + " vs target " + shape_str(t));
}

}  // namespace

template <typename T>
Var<T> supervised(const Var<T>& prob, const Tensor<T>& onehot) {
  require_prob_shape(prob.shape(), onehot.shape(), "supervised loss");
  const std::int64_t C = prob.dim(0), n = prob.numel() / C;
  const T eps = T(kDiceEps), floor = T(kProbFloor);
  const Tensor<T>& p = prob.value();

  std::vector<T> inter(C), psum(C), ysum(C);
  T ce = 0;
  for (std::int64_t c = 0; c < C; ++c) {
    T a = 0, b = 0, d = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const T pv = p[c * n + i], yv = onehot[c * n + i];
      a += pv * yv;
      b += pv;
      d += yv;
      if (yv != T(0)) ce -= yv * std::log(std::max(pv, floor));
    }
    inter[c] = a;
    psum[c] = b;
    ysum[c] = d;
  }
  T dice = 0;
  for (std::int64_t c = 0; c < C; ++c) dice += (T(2) * inter[c] + eps) / (psum[c] + ysum[c] + eps);
  dice /= T(C);
  Tensor<T> out({1});
  out[0] = T(0.5) * (T(1) - dice) + T(0.5) * ce / T(n);

  return record<T>(std::move(out), {prob}, [prob, onehot, inter, psum, ysum, C, n, eps, floor](const Tensor<T>& g) {
    const Tensor<T>& p = prob.value();
    Tensor<T> gp(prob.shape());
    for (std::int64_t c = 0; c < C; ++c) {
      const T den = psum[c] + ysum[c] + eps;
      const T num = T(2) * inter[c] + eps;
      for (std::int64_t i = 0; i < n; ++i) {
        const T yv = onehot[c * n + i], pv = p[c * n + i];
        // d(-0.5 * mean_c dice)/dp
        T d = -T(0.5) / T(C) * (T(2) * yv * den - num) / (den * den);
        if (yv != T(0) && pv > floor) d -= T(0.5) * yv / (pv * T(n));
        gp[c * n + i] = g[0] * d;
      }
    }
    prob.accumulate(gp);
  });
}

template <typename T>
Var<T> supervised_from_scores(const Var<T>& scores, const Tensor<T>& onehot) {
  return supervised(ops::softmax_channels(scores), onehot);
}

template <typename T>
Var<T> unsupervised(const Var<T>& prob, const Tensor<T>& target, T tau) {
  require_prob_shape(prob.shape(), target.shape(), "unsupervised loss");
  const std::int64_t C = prob.dim(0), n = prob.numel() / C;
  const T floor = T(kProbFloor);
  const Tensor<T>& p = prob.value();
  std::vector<std::int64_t> cls(static_cast<std::size_t>(n), -1);
  T total = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < C; ++c)
      if (target[c * n + i] > target[best * n + i]) best = c;
    if (target[best * n + i] < tau) continue;
    cls[i] = best;
    total -= std::log(std::max(p[best * n + i], floor));
  }
  Tensor<T> out({1});
  out[0] = total / T(n);
  return record<T>(std::move(out), {prob}, [prob, cls, n, floor](const Tensor<T>& g) {
    const Tensor<T>& p = prob.value();
    Tensor<T> gp(prob.shape());
    for (std::int64_t i = 0; i < n; ++i) {
      if (cls[i] < 0) continue;
      const T pv = p[cls[i] * n + i];
      if (pv > floor) gp[cls[i] * n + i] = -g[0] / (pv * T(n));
    }
    prob.accumulate(gp);
  });
}

template <typename T>
double reliable_fraction(const Tensor<T>& prob, T tau) {
  const std::int64_t C = prob.dim(0), n = prob.numel() / C;
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    T best = prob[i];
    for (std::int64_t c = 1; c < C; ++c) best = std::max(best, prob[c * n + i]);
    hits += best >= tau;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

template Var<float> supervised<float>(const Var<float>&, const Tensor<float>&);
template Var<double> supervised<double>(const Var<double>&, const Tensor<double>&);
template Var<float> supervised_from_scores<float>(const Var<float>&, const Tensor<float>&);
template Var<double> supervised_from_scores<double>(const Var<double>&, const Tensor<double>&);
template Var<float> unsupervised<float>(const Var<float>&, const Tensor<float>&, float);
template Var<double> unsupervised<double>(const Var<double>&, const Tensor<double>&, double);
template double reliable_fraction<float>(const Tensor<float>&, float);
template double reliable_fraction<double>(const Tensor<double>&, double);

}  // namespace semiseg::losses
