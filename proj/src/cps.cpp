#include "semiseg/cps.hpp"

#include <algorithm>
#include <cmath>

#include "semiseg/ops.hpp"

namespace semiseg::cps {
namespace {

constexpr double kNormFloor = 1e-8;

template <typename T>
void check_sup(const Supervision<T>& sup) {
  if ((sup.truth == nullptr) == (sup.pseudo == nullptr))
    throw ContractViolation("CPS supervision needs exactly one of a label or a pseudo-label map");
}

template <typename T>
std::int64_t lattice_size(const Supervision<T>& sup) {
  return sup.truth ? sup.truth->classes.numel() : sup.pseudo->numel() / sup.pseudo->dim(0);
}

// argmax and max of the pseudo map at voxel i.
template <typename T>
std::pair<int, T> top(const Tensor<T>& p, std::int64_t i) {
  const std::int64_t C = p.dim(0), n = p.numel() / C;
  int best = 0;
  for (std::int64_t c = 1; c < C; ++c)
    if (p[c * n + i] > p[best * n + i]) best = static_cast<int>(c);
  return {best, p[best * n + i]};
}

template <typename T>
std::vector<std::int64_t> sample(std::vector<std::int64_t> pool, int k, std::mt19937_64& rng) {
  if (static_cast<int>(pool.size()) <= k) return pool;
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(k));
  std::sample(pool.begin(), pool.end(), std::back_inserter(out), k, rng);
  return out;
}

template <typename T>
T norm(const T* v, std::int64_t d) {
  T s = 0;
  for (std::int64_t j = 0; j < d; ++j) s += v[j] * v[j];
  return std::sqrt(s);
}

template <typename T>
T dotp(const T* a, const T* b, std::int64_t d) {
  T s = 0;
  for (std::int64_t j = 0; j < d; ++j) s += a[j] * b[j];
  return s;
}

// d cos(a, b) / d a, scaled by g and added to out.
template <typename T>
void cos_grad(const T* a, const T* b, std::int64_t d, T na_raw, T na, T nb, T cosv, T g, T* out) {
  const bool clamped = na_raw <= T(kNormFloor);
  for (std::int64_t j = 0; j < d; ++j) {
    T v = b[j] / (na * nb);
    if (!clamped) v -= cosv * a[j] / (na * na);
    out[j] += g * v;
  }
}

}  // namespace

void Thresholds::validate() const {
  if (!(tau_w < tau)) throw ConfigError("CPS thresholds need tau_w < tau");
  if (tau <= 0.0 || tau > 1.0 || tau_w < 0.0) throw ConfigError("CPS thresholds must lie in [0, 1]");
}

template <typename T>
std::vector<std::int64_t> anchor_lattice(const Tensor<T>& student, const Supervision<T>& sup, const Thresholds& th,
                                         int c) {
  th.validate();
  check_sup(sup);
  const std::int64_t n = lattice_size(sup);
  if (student.numel() != student.dim(0) * n || c < 0 || c >= student.dim(0))
    throw ShapeError("anchor_lattice: student map does not match the supervision lattice");
  const T tau = static_cast<T>(th.tau), tau_w = static_cast<T>(th.tau_w);
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < n; ++i) {
    if (!(student[c * n + i] < tau)) continue;
    if (sup.truth) {
      if (sup.truth->classes[i] == c) out.push_back(i);
    } else {
      const auto [arg, mx] = top(*sup.pseudo, i);
      if (mx > tau_w && arg == c) out.push_back(i);
    }
  }
  return out;
}

template <typename T>
std::vector<std::int64_t> negative_lattice(const Supervision<T>& sup, const Thresholds& th, int c) {
  th.validate();
  check_sup(sup);
  const std::int64_t n = lattice_size(sup);
  const T tau_w = static_cast<T>(th.tau_w);
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < n; ++i) {
    if (sup.truth) {
      if (sup.truth->classes[i] != c) out.push_back(i);
    } else {
      const auto [arg, mx] = top(*sup.pseudo, i);
      if (mx > tau_w && arg != c) out.push_back(i);
    }
  }
  return out;
}

template <typename T>
std::vector<std::int64_t> positive_lattice(const Supervision<T>& sup, const Thresholds& th, int c) {
  check_sup(sup);
  const std::int64_t n = lattice_size(sup);
  const T tau = static_cast<T>(th.tau);
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < n; ++i) {
    if (sup.truth) {
      if (sup.truth->classes[i] == c) out.push_back(i);
    } else {
      const auto [arg, mx] = top(*sup.pseudo, i);
      if (mx >= tau && arg == c) out.push_back(i);
    }
  }
  return out;
}

template <typename T>
Tensor<T> positive_centre(const Tensor<T>& r_m, const Tensor<T>& proto, T xi) {
  r_m.check_same(proto);
  if (!(xi >= T(0))) throw ConfigError("positive centre needs xi >= 0");
  Tensor<T> out(r_m.shape());
  for (std::int64_t j = 0; j < out.numel(); ++j) out[j] = (r_m[j] + xi * proto[j]) / (T(1) + xi);
  return out;
}

template <typename T>
void init(ParamSet<T>& ps, int F4, int F4p, int F, std::mt19937_64& rng) {
  ps.add("cps.head3.w", he_normal<T>({F4p, F4, 3, 3, 3}, std::int64_t{F4} * 27, rng));
  ps.add("cps.head3.b", Tensor<T>({F4p}));
  ps.add("cps.head1.w", he_normal<T>({F4p, F4p, 1, 1, 1}, F4p, rng, 1.0));
  ps.add("cps.head1.b", Tensor<T>({F4p}));
  ps.add("cps.bridge.w", he_normal<T>({F, F4p}, F, rng, 1.0));
  ps.add("cps.bridge.b", Tensor<T>({F4p}));
}

template <typename T>
Var<T> project(const ParamSet<T>& ps, const Var<T>& f4) {
  auto h = ops::conv3d(f4, ps.at("cps.head3.w"), ps.at("cps.head3.b"), 1, 1);
  return ops::conv3d(h, ps.at("cps.head1.w"), ps.at("cps.head1.b"), 1, 0);
}

template <typename T>
Tensor<T> bridge(const ParamSet<T>& ps, const Tensor<T>& proto_means) {
  return ops::linear(constant(proto_means), detach(ps.at("cps.bridge.w")), detach(ps.at("cps.bridge.b"))).value();
}

template <typename T>
ContrastiveBatch<T> build_batch(const std::vector<SampleView<T>>& views, const Tensor<T>& bridged, T xi,
                                std::vector<std::optional<Tensor<T>>>& class_means, const Thresholds& th,
                                const Sampling& sampling, std::mt19937_64& rng) {
  th.validate();
  ContrastiveBatch<T> batch;
  if (views.empty()) return batch;
  const std::int64_t C = bridged.dim(0), d = bridged.dim(1);
  if (static_cast<std::int64_t>(class_means.size()) != C) class_means.resize(static_cast<std::size_t>(C));

  std::vector<Var<T>> flat;
  for (const auto& v : views) {
    if (v.r.dim(0) != d) throw ShapeError("CPS projection width differs from the bridged prototypes");
    flat.push_back(ops::reshape(v.r, {d, v.r.numel() / d}));
  }

  for (int c = 0; c < C; ++c) {
    // (sample, voxel) pools across the batch.
    std::vector<std::int64_t> anchors, negatives;
    Tensor<T> mean({d});
    std::int64_t support = 0;
    const std::int64_t stride = flat[0].dim(1);
    for (std::size_t s = 0; s < views.size(); ++s) {
      const auto& v = views[s];
      if (flat[s].dim(1) != stride) throw ShapeError("CPS views must share one lattice size");
      for (auto i : anchor_lattice(*v.student, v.sup, th, c)) anchors.push_back(static_cast<std::int64_t>(s) * stride + i);
      for (auto i : negative_lattice(v.sup, th, c)) negatives.push_back(static_cast<std::int64_t>(s) * stride + i);
      const Tensor<T>& rv = flat[s].value();
      for (auto i : positive_lattice(v.sup, th, c)) {
        for (std::int64_t j = 0; j < d; ++j) mean[j] += rv[j * stride + i];
        ++support;
      }
    }
    if (support > 0) {
      for (auto& x : mean.storage()) x /= static_cast<T>(support);
      class_means[c] = mean;
    }
    // Sampling happens even for skipped classes so the RNG stream does not
    // depend on which classes survive.
    anchors = sample<T>(std::move(anchors), sampling.max_anchors, rng);
    negatives = sample<T>(std::move(negatives), sampling.max_negatives, rng);
    if (!class_means[c] || anchors.empty() || negatives.empty()) continue;

    auto gather = [&](const std::vector<std::int64_t>& ids) {
      std::vector<Var<T>> parts;
      for (std::size_t s = 0; s < views.size(); ++s) {
        std::vector<std::int64_t> local;
        for (auto id : ids)
          if (id / stride == static_cast<std::int64_t>(s)) local.push_back(id % stride);
        if (!local.empty()) parts.push_back(ops::gather_columns(flat[s], local));
      }
      return parts.size() == 1 ? parts[0] : ops::concat_rows(parts);
    };
    std::sort(anchors.begin(), anchors.end());
    std::sort(negatives.begin(), negatives.end());

    ClassSet<T> set;
    set.c = c;
    set.anchors = gather(anchors);
    set.negatives = gather(negatives);
    Tensor<T> proto({d});
    std::copy(bridged.data() + c * d, bridged.data() + (c + 1) * d, proto.data());
    set.centre = positive_centre(*class_means[c], proto, xi);
    batch.classes.push_back(std::move(set));
  }
  return batch;
}

template <typename T>
Var<T> info_nce(const Var<T>& anchors, const Var<T>& negatives, const Tensor<T>& centre, T t) {
  if (!(t > T(0))) throw ConfigError("InfoNCE temperature must be positive");
  if (anchors.value().rank() != 2 || negatives.value().rank() != 2 || anchors.dim(1) != negatives.dim(1) ||
      centre.numel() != anchors.dim(1))
    throw ShapeError("info_nce: anchors " + shape_str(anchors.shape()) + ", negatives " +
                     shape_str(negatives.shape()) + ", centre " + shape_str(centre.shape()));
  const std::int64_t K = anchors.dim(0), M = negatives.dim(0), d = anchors.dim(1);
  const T floor = T(kNormFloor);
  const T* A = anchors.value().data();
  const T* N = negatives.value().data();
  const T* P = centre.data();

  std::vector<T> na_raw(K), nn_raw(M);
  for (std::int64_t k = 0; k < K; ++k) na_raw[k] = norm(A + k * d, d);
  for (std::int64_t m = 0; m < M; ++m) nn_raw[m] = norm(N + m * d, d);
  const T np = std::max(norm(P, d), floor);

  // cos_p[k], cos_n[k*M+m] and the softmax weights over {p, n_1..n_M}.
  std::vector<T> cos_p(K), cos_n(K * M), w_p(K), w_n(K * M);
  T total = 0;
  for (std::int64_t k = 0; k < K; ++k) {
    const T na = std::max(na_raw[k], floor);
    cos_p[k] = dotp(A + k * d, P, d) / (na * np);
    T mx = cos_p[k] / t;
    for (std::int64_t m = 0; m < M; ++m) {
      cos_n[k * M + m] = dotp(A + k * d, N + m * d, d) / (na * std::max(nn_raw[m], floor));
      mx = std::max(mx, cos_n[k * M + m] / t);
    }
    T z = std::exp(cos_p[k] / t - mx);
    for (std::int64_t m = 0; m < M; ++m) z += std::exp(cos_n[k * M + m] / t - mx);
    const T lse = mx + std::log(z);
    total += lse - cos_p[k] / t;
    w_p[k] = std::exp(cos_p[k] / t - lse);
    for (std::int64_t m = 0; m < M; ++m) w_n[k * M + m] = std::exp(cos_n[k * M + m] / t - lse);
  }
  Tensor<T> out({1});
  out[0] = total;

  return record<T>(std::move(out), {anchors, negatives},
                   [=](const Tensor<T>& g) {
                     const T* A = anchors.value().data();
                     const T* N = negatives.value().data();
                     const T* Pc = centre.data();
                     Tensor<T> ga(anchors.shape()), gn(negatives.shape());
                     for (std::int64_t k = 0; k < K; ++k) {
                       const T na = std::max(na_raw[k], floor);
                       cos_grad(A + k * d, Pc, d, na_raw[k], na, np, cos_p[k], g[0] * (w_p[k] - T(1)) / t,
                                ga.data() + k * d);
                       for (std::int64_t m = 0; m < M; ++m) {
                         const T nn = std::max(nn_raw[m], floor);
                         const T gs = g[0] * w_n[k * M + m] / t;
                         cos_grad(A + k * d, N + m * d, d, na_raw[k], na, nn, cos_n[k * M + m], gs, ga.data() + k * d);
                         cos_grad(N + m * d, A + k * d, d, nn_raw[m], nn, na, cos_n[k * M + m], gs, gn.data() + m * d);
                       }
                     }
                     anchors.accumulate(ga);
                     negatives.accumulate(gn);
                   });
}

template <typename T>
Var<T> cps_loss(const ContrastiveBatch<T>& batch, T t, Reduction red) {
  if (!(t > T(0))) throw ConfigError("CPS temperature must be positive");
  std::vector<Var<T>> terms;
  for (const auto& s : batch.classes) terms.push_back(info_nce(s.anchors, s.negatives, s.centre, t));
  if (terms.empty()) return constant(Tensor<T>({1}));
  const T w = red == Reduction::Sum ? T(1) : T(1) / static_cast<T>(batch.num_anchors());
  return ops::weighted_sum(terms, std::vector<T>(terms.size(), w));
}

#define SEMISEG_INSTANTIATE_CPS(T)                                                                                 \
  template std::vector<std::int64_t> anchor_lattice<T>(const Tensor<T>&, const Supervision<T>&, const Thresholds&, \
                                                       int);                                                       \
  template std::vector<std::int64_t> negative_lattice<T>(const Supervision<T>&, const Thresholds&, int);           \
  template std::vector<std::int64_t> positive_lattice<T>(const Supervision<T>&, const Thresholds&, int);           \
  template Tensor<T> positive_centre<T>(const Tensor<T>&, const Tensor<T>&, T);                                    \
  template void init<T>(ParamSet<T>&, int, int, int, std::mt19937_64&);                                            \
  template Var<T> project<T>(const ParamSet<T>&, const Var<T>&);                                                   \
  template Tensor<T> bridge<T>(const ParamSet<T>&, const Tensor<T>&);                                              \
  template ContrastiveBatch<T> build_batch<T>(const std::vector<SampleView<T>>&, const Tensor<T>&, T,              \
                                              std::vector<std::optional<Tensor<T>>>&, const Thresholds&,           \
                                              const Sampling&, std::mt19937_64&);                                  \
  template Var<T> info_nce<T>(const Var<T>&, const Var<T>&, const Tensor<T>&, T);                                  \
  template Var<T> cps_loss<T>(const ContrastiveBatch<T>&, T, Reduction);

SEMISEG_INSTANTIATE_CPS(float)
SEMISEG_INSTANTIATE_CPS(double)

}  // namespace semiseg::cps
