#include "semiseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace semiseg::metrics {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_pair(const Mask& a, const Mask& b) {
  if (a.rank() != 3 || a.shape() != b.shape())
    throw ShapeError("metric masks must be 3-D and equal in shape: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// One pass of the lower-envelope transform along a line of n samples at
// positions k * h. f holds squared distances (kInf for none) and is
// overwritten with the result.
void envelope_1d(double* f, std::int64_t n, std::int64_t step, double h, std::vector<double>& val,
                 std::vector<std::int64_t>& v, std::vector<double>& z) {
  std::int64_t k = -1;
  for (std::int64_t q = 0; q < n; ++q) {
    const double fq = f[q * step];
    if (fq == kInf) continue;
    const double xq = static_cast<double>(q) * h;
    while (k >= 0) {
      const double xv = static_cast<double>(v[k]) * h;
      const double s = ((fq + xq * xq) - (val[k] + xv * xv)) / (2.0 * (xq - xv));
      if (s <= z[k]) {
        --k;
        continue;
      }
      z[k + 1] = s;
      break;
    }
    ++k;
    v[k] = q;
    val[k] = fq;
    if (k == 0) z[0] = -kInf;
    z[k + 1] = kInf;
  }
  if (k < 0) return;
  std::int64_t j = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    const double x = static_cast<double>(q) * h;
    while (z[j + 1] < x) ++j;
    const double d = x - static_cast<double>(v[j]) * h;
    f[q * step] = d * d + val[j];
  }
}

}  // namespace

Mask binary(const LabelMask& m, int c) {
  Mask out(m.classes.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = m.classes[i] == c;
  return out;
}

Mask argmax_mask(const Tensor<float>& prob, int c) {
  const std::int64_t C = prob.dim(0), n = prob.numel() / C;
  Mask out({prob.dim(1), prob.dim(2), prob.dim(3)});
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    for (std::int64_t k = 1; k < C; ++k)
      if (prob[k * n + i] > prob[best * n + i]) best = k;
    out[i] = best == c;
  }
  return out;
}

double dice(const Mask& a, const Mask& b) {
  check_pair(a, b);
  std::int64_t sa = 0, sb = 0, inter = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    sa += a[i] != 0;
    sb += b[i] != 0;
    inter += a[i] != 0 && b[i] != 0;
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

double jaccard(const Mask& a, const Mask& b) {
  check_pair(a, b);
  std::int64_t uni = 0, inter = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    uni += a[i] != 0 || b[i] != 0;
    inter += a[i] != 0 && b[i] != 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::array<std::int64_t, 3>> boundary(const Mask& m) {
  if (m.rank() != 3) throw ShapeError("boundary: expected a 3-D mask");
  const std::int64_t X = m.dim(0), Y = m.dim(1), Z = m.dim(2);
  auto fg = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    return i >= 0 && j >= 0 && k >= 0 && i < X && j < Y && k < Z && m[(i * Y + j) * Z + k] != 0;
  };
  std::vector<std::array<std::int64_t, 3>> out;
  for (std::int64_t i = 0; i < X; ++i)
    for (std::int64_t j = 0; j < Y; ++j)
      for (std::int64_t k = 0; k < Z; ++k) {
        if (!fg(i, j, k)) continue;
        if (!fg(i - 1, j, k) || !fg(i + 1, j, k) || !fg(i, j - 1, k) || !fg(i, j + 1, k) || !fg(i, j, k - 1) ||
            !fg(i, j, k + 1))
          out.push_back({i, j, k});
      }
  return out;
}

Tensor<double> squared_distance_to(const Mask& sites, const Spacing& spacing) {
  if (sites.rank() != 3) throw ShapeError("distance transform: expected a 3-D mask");
  const std::int64_t X = sites.dim(0), Y = sites.dim(1), Z = sites.dim(2);
  Tensor<double> f(sites.shape(), kInf);
  for (std::int64_t i = 0; i < f.numel(); ++i)
    if (sites[i]) f[i] = 0.0;
  const std::int64_t longest = std::max({X, Y, Z});
  std::vector<double> val(longest);
  std::vector<std::int64_t> v(longest);
  std::vector<double> z(longest + 1);
  for (std::int64_t i = 0; i < X; ++i)
    for (std::int64_t j = 0; j < Y; ++j) envelope_1d(f.data() + (i * Y + j) * Z, Z, 1, spacing[2], val, v, z);
  for (std::int64_t i = 0; i < X; ++i)
    for (std::int64_t k = 0; k < Z; ++k) envelope_1d(f.data() + i * Y * Z + k, Y, Z, spacing[1], val, v, z);
  for (std::int64_t j = 0; j < Y; ++j)
    for (std::int64_t k = 0; k < Z; ++k) envelope_1d(f.data() + j * Z + k, X, Y * Z, spacing[0], val, v, z);
  return f;
}

std::vector<double> surface_distances(const Mask& a, const Mask& b, const Spacing& spacing) {
  check_pair(a, b);
  Mask sites(b.shape());
  const std::int64_t Y = b.dim(1), Z = b.dim(2);
  for (const auto& p : boundary(b)) sites[(p[0] * Y + p[1]) * Z + p[2]] = 1;
  const Tensor<double> d2 = squared_distance_to(sites, spacing);
  std::vector<double> out;
  for (const auto& p : boundary(a)) out.push_back(std::sqrt(d2[(p[0] * Y + p[1]) * Z + p[2]]));
  return out;
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw ContractViolation("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

namespace {

std::optional<std::vector<double>> combined(const Mask& a, const Mask& b, const Spacing& spacing) {
  check_pair(a, b);
  const bool ea = std::none_of(a.span().begin(), a.span().end(), [](auto x) { return x != 0; });
  const bool eb = std::none_of(b.span().begin(), b.span().end(), [](auto x) { return x != 0; });
  if (ea || eb) return std::nullopt;
  auto d = surface_distances(a, b, spacing);
  auto e = surface_distances(b, a, spacing);
  d.insert(d.end(), e.begin(), e.end());
  return d;
}

}  // namespace

std::optional<double> asd(const Mask& a, const Mask& b, const Spacing& spacing) {
  auto d = combined(a, b, spacing);
  if (!d) return std::nullopt;
  return std::accumulate(d->begin(), d->end(), 0.0) / static_cast<double>(d->size());
}

std::optional<double> hd95(const Mask& a, const Mask& b, const Spacing& spacing) {
  auto d = combined(a, b, spacing);
  if (!d) return std::nullopt;
  return percentile(std::move(*d), 95.0);
}

CaseScores score_case(const std::string& id, const Tensor<float>& prob, const LabelMask& truth,
                      const Spacing& spacing) {
  CaseScores s;
  s.id = id;
  const int C = static_cast<int>(prob.dim(0));
  double sum_asd = 0, sum_hd = 0;
  int n_surf = 0;
  for (int c = 1; c < C; ++c) {
    const Mask p = argmax_mask(prob, c), t = binary(truth, c);
    s.dice += dice(p, t) / (C - 1);
    s.jaccard += jaccard(p, t) / (C - 1);
    auto a = asd(p, t, spacing);
    auto h = hd95(p, t, spacing);
    if (a && h) {
      sum_asd += *a;
      sum_hd += *h;
      ++n_surf;
    }
  }
  if (n_surf > 0) {
    s.asd = sum_asd / n_surf;
    s.hd95 = sum_hd / n_surf;
  }
  return s;
}

double mean_foreground_dice(const Tensor<float>& prob, const LabelMask& truth) {
  const int C = static_cast<int>(prob.dim(0));
  double d = 0;
  for (int c = 1; c < C; ++c) d += dice(argmax_mask(prob, c), binary(truth, c));
  return d / (C - 1);
}

}  // namespace semiseg::metrics
