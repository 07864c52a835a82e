#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance binary. Nothing here calls the library routine it checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <vector>

#include "semiseg/autograd.hpp"
#include "semiseg/metrics.hpp"
#include "semiseg/volume.hpp"

namespace oracle {

using semiseg::Tensor;
using semiseg::Var;

// ---------------------------------------------------------------------------
// Finite differences

struct GradReport {
  double max_rel = 0;   // worst over checked tensors of |a - n| / max(|a|, |n|)
  std::size_t checked = 0;
};

// Central differences of a scalar function of `params` against the autograd
// gradient. `loss` rebuilds the graph from the current values each call.
// At most `per_tensor` entries of each tensor are probed, chosen at random.
inline GradReport gradcheck(const std::function<Var<double>()>& loss, std::vector<Var<double>> params,
                            std::size_t per_tensor = 24, double h = 1e-6, std::uint64_t seed = 7) {
  for (auto& p : params) p.zero_grad();
  semiseg::backward(loss());
  GradReport rep;
  std::mt19937_64 rng(seed);
  for (auto& p : params) {
    const std::int64_t n = p.numel();
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    if (idx.size() > per_tensor) idx.resize(per_tensor);
    double diff2 = 0, a2 = 0, n2 = 0;
    for (auto i : idx) {
      double& x = p.mutable_value()[i];
      const double x0 = x;
      x = x0 + h;
      const double fp = loss().value()[0];
      x = x0 - h;
      const double fm = loss().value()[0];
      x = x0;
      const double num = (fp - fm) / (2 * h);
      const double ana = p.has_grad() ? p.grad()[i] : 0.0;
      diff2 += (ana - num) * (ana - num);
      a2 += ana * ana;
      n2 += num * num;
      ++rep.checked;
    }
    const double scale = std::max({std::sqrt(a2), std::sqrt(n2), 1e-7});
    rep.max_rel = std::max(rep.max_rel, std::sqrt(diff2) / scale);
  }
  return rep;
}

template <typename T>
Tensor<T> random_tensor(semiseg::Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& x : t.storage()) x = static_cast<T>(u(rng));
  return t;
}

// Random probability field [C, n] (each column sums to one).
inline Tensor<double> random_simplex(int C, std::int64_t n, std::mt19937_64& rng) {
  Tensor<double> t({C, n});
  std::exponential_distribution<double> e(1.0);
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (int c = 0; c < C; ++c) s += t[c * n + i] = e(rng);
    for (int c = 0; c < C; ++c) t[c * n + i] /= s;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Metrics by exhaustive enumeration

using Mask = semiseg::metrics::Mask;
using Coord = std::array<std::int64_t, 3>;

inline Mask random_mask(std::mt19937_64& rng, std::int64_t max_side = 12) {
  std::uniform_int_distribution<std::int64_t> side(2, max_side);
  const std::int64_t H = side(rng), W = side(rng), D = side(rng);
  Mask m({H, W, D});
  // Mix sparse noise with a random box so surfaces have some structure.
  std::uniform_real_distribution<double> u(0, 1);
  const double density = u(rng) * 0.5;
  for (auto& x : m.storage()) x = u(rng) < density ? 1 : 0;
  std::uniform_int_distribution<std::int64_t> pi(0, H - 1), pj(0, W - 1), pk(0, D - 1);
  const Coord a{pi(rng), pj(rng), pk(rng)}, b{pi(rng), pj(rng), pk(rng)};
  for (std::int64_t i = std::min(a[0], b[0]); i <= std::max(a[0], b[0]); ++i)
    for (std::int64_t j = std::min(a[1], b[1]); j <= std::max(a[1], b[1]); ++j)
      for (std::int64_t k = std::min(a[2], b[2]); k <= std::max(a[2], b[2]); ++k) m[(i * W + j) * D + k] = 1;
  if (u(rng) < 0.05) m.fill(0);
  return m;
}

inline std::int64_t count(const Mask& m) {
  std::int64_t n = 0;
  for (auto x : m.storage()) n += x ? 1 : 0;
  return n;
}

inline std::int64_t count_and(const Mask& a, const Mask& b) {
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) n += (a[i] && b[i]) ? 1 : 0;
  return n;
}

inline double dice(const Mask& a, const Mask& b) {
  const auto na = count(a), nb = count(b);
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(count_and(a, b)) / static_cast<double>(na + nb);
}

inline double jaccard(const Mask& a, const Mask& b) {
  const auto inter = count_and(a, b), uni = count(a) + count(b) - inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline std::vector<Coord> surface(const Mask& m) {
  const std::int64_t H = m.dim(0), W = m.dim(1), D = m.dim(2);
  auto at = [&](std::int64_t i, std::int64_t j, std::int64_t k) -> int {
    if (i < 0 || j < 0 || k < 0 || i >= H || j >= W || k >= D) return 0;
    return m[(i * W + j) * D + k];
  };
  std::vector<Coord> out;
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j)
      for (std::int64_t k = 0; k < D; ++k) {
        if (!at(i, j, k)) continue;
        if (!at(i - 1, j, k) || !at(i + 1, j, k) || !at(i, j - 1, k) || !at(i, j + 1, k) || !at(i, j, k - 1) ||
            !at(i, j, k + 1))
          out.push_back({i, j, k});
      }
  return out;
}

// All-pairs nearest distances from every point of `from` to the set `to`.
inline std::vector<double> nearest(const std::vector<Coord>& from, const std::vector<Coord>& to,
                                   const semiseg::Spacing& sp) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      double d2 = 0;
      for (int a = 0; a < 3; ++a) {
        const double d = static_cast<double>(p[a] - q[a]) * sp[a];
        d2 += d * d;
      }
      best = std::min(best, d2);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

inline std::vector<double> symmetric_distances(const Mask& a, const Mask& b, const semiseg::Spacing& sp) {
  const auto sa = surface(a), sb = surface(b);
  auto d = nearest(sa, sb, sp);
  const auto e = nearest(sb, sa, sp);
  d.insert(d.end(), e.begin(), e.end());
  return d;
}

inline std::optional<double> asd(const Mask& a, const Mask& b, const semiseg::Spacing& sp = {1, 1, 1}) {
  if (count(a) == 0 || count(b) == 0) return std::nullopt;
  const auto d = symmetric_distances(a, b, sp);
  long double s = 0;
  for (double x : d) s += x;
  return static_cast<double>(s / static_cast<long double>(d.size()));
}

inline std::optional<double> hd95(const Mask& a, const Mask& b, const semiseg::Spacing& sp = {1, 1, 1}) {
  if (count(a) == 0 || count(b) == 0) return std::nullopt;
  auto d = symmetric_distances(a, b, sp);
  std::sort(d.begin(), d.end());
  const double pos = 0.95 * static_cast<double>(d.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, d.size() - 1);
  return d[lo] + (pos - static_cast<double>(lo)) * (d[hi] - d[lo]);
}

// ---------------------------------------------------------------------------
// Contrastive sets by direct predicate evaluation on a flat field [C, n].

inline int argmax_at(const Tensor<double>& p, int C, std::int64_t n, std::int64_t i) {
  int best = 0;
  for (int c = 1; c < C; ++c)
    if (p[c * n + i] > p[best * n + i]) best = c;
  return best;
}

inline double max_at(const Tensor<double>& p, int C, std::int64_t n, std::int64_t i) {
  double m = p[i];
  for (int c = 1; c < C; ++c) m = std::max(m, p[c * n + i]);
  return m;
}

// labels == nullptr selects the unlabelled predicates on `pseudo`.
inline std::vector<std::int64_t> anchors(const Tensor<double>& student, const std::vector<int>* labels,
                                         const Tensor<double>* pseudo, int C, double tau, double tau_w, int c) {
  const std::int64_t n = student.numel() / C;
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < n; ++i) {
    const bool uncertain = student[c * n + i] < tau;
    bool keep;
    if (labels) keep = (*labels)[static_cast<std::size_t>(i)] == c && uncertain;
    else keep = uncertain && max_at(*pseudo, C, n, i) > tau_w && argmax_at(*pseudo, C, n, i) == c;
    if (keep) out.push_back(i);
  }
  return out;
}

inline std::vector<std::int64_t> negatives(const std::vector<int>* labels, const Tensor<double>* pseudo, int C,
                                           std::int64_t n, double tau_w, int c) {
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < n; ++i) {
    bool keep;
    if (labels) keep = (*labels)[static_cast<std::size_t>(i)] != c;
    else keep = max_at(*pseudo, C, n, i) > tau_w && argmax_at(*pseudo, C, n, i) != c;
    if (keep) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses by direct formula, in long double.

inline long double cosine(const std::vector<long double>& a, const std::vector<long double>& b) {
  long double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / (std::max(std::sqrt(na), 1e-8L) * std::max(std::sqrt(nb), 1e-8L));
}

inline long double info_nce(const std::vector<std::vector<long double>>& anchors,
                            const std::vector<std::vector<long double>>& negatives,
                            const std::vector<long double>& centre, long double t) {
  long double total = 0;
  for (const auto& a : anchors) {
    const long double pos = std::exp(cosine(a, centre) / t);
    long double den = pos;
    for (const auto& n : negatives) den += std::exp(cosine(a, n) / t);
    total += -std::log(pos / den);
  }
  return total;
}

// 0.5 (1 - mean_c soft Dice) + 0.5 mean cross-entropy; prob and onehot [C, n].
inline long double supervised(const Tensor<double>& prob, const Tensor<double>& onehot, int C) {
  const std::int64_t n = prob.numel() / C;
  long double dice = 0, ce = 0;
  for (int c = 0; c < C; ++c) {
    long double inter = 0, ps = 0, ys = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      inter += static_cast<long double>(prob[c * n + i]) * onehot[c * n + i];
      ps += prob[c * n + i];
      ys += onehot[c * n + i];
    }
    dice += (2 * inter + 1e-5L) / (ps + ys + 1e-5L);
  }
  for (std::int64_t i = 0; i < n; ++i)
    for (int c = 0; c < C; ++c)
      if (onehot[c * n + i] > 0) ce -= std::log(std::max<long double>(prob[c * n + i], 1e-12L));
  return 0.5L * (1 - dice / C) + 0.5L * ce / n;
}

inline long double unsupervised(const Tensor<double>& prob, const Tensor<double>& target, int C, double tau) {
  const std::int64_t n = prob.numel() / C;
  long double s = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (max_at(target, C, n, i) < tau) continue;
    s -= std::log(std::max<long double>(prob[argmax_at(target, C, n, i) * n + i], 1e-12L));
  }
  return s / n;
}

}  // namespace oracle
