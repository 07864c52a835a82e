#include "semiseg/dim.hpp"

#include <cmath>

#include "semiseg/ops.hpp"

namespace semiseg::dim {
namespace {

template <typename T>
void add_linear(ParamSet<T>& ps, const std::string& name, int in, int out, std::mt19937_64& rng) {
  ps.add(name + ".w", he_normal<T>({in, out}, in, rng, 1.0));
  ps.add(name + ".b", Tensor<T>({out}));
}

template <typename T>
void add_conv(ParamSet<T>& ps, const std::string& name, int cin, int cout, int k, std::mt19937_64& rng) {
  ps.add(name + ".w", he_normal<T>({cout, cin, k, k, k}, std::int64_t{cin} * k * k * k, rng, 1.0));
  ps.add(name + ".b", Tensor<T>({cout}));
}

// [ch, X, Y, Z] -> [X*Y*Z, ch]
template <typename T>
Var<T> positions(const Var<T>& f) {
  return ops::transpose(ops::reshape(f, {f.dim(0), f.numel() / f.dim(0)}));
}

template <typename T>
Var<T> conv(const ParamSet<T>& ps, const std::string& name, const Var<T>& x, int pad) {
  return ops::conv3d(x, ps.at(name + ".w"), ps.at(name + ".b"), 1, pad);
}

// Row-block summation matrix [C, C*R].
template <typename T>
Var<T> class_sum_matrix(int C, int R) {
  Tensor<T> s({C, std::int64_t{C} * R});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < R; ++i) s[std::int64_t{c} * C * R + c * R + i] = T(1);
  return constant(std::move(s));
}

}  // namespace

AggMode parse_agg_mode(const std::string& s) {
  if (s == "sum") return AggMode::Sum;
  if (s == "sa") return AggMode::Spatial;
  if (s == "sa-ci") return AggMode::SpatialIntegrate;
  if (s == "full") return AggMode::Full;
  throw ConfigError("unknown aggregation mode '" + s + "' (expected sum, sa, sa-ci or full)");
}

std::string to_string(AggMode m) {
  switch (m) {
    case AggMode::Sum: return "sum";
    case AggMode::Spatial: return "sa";
    case AggMode::SpatialIntegrate: return "sa-ci";
    case AggMode::Full: return "full";
  }
  return "?";
}

void Config::validate() const {
  if (C < 2 || R < 1 || F < 1 || F3 < 1) throw ConfigError("DIM needs C >= 2, R >= 1 and positive widths");
}

template <typename T>
void init(ParamSet<T>& ps, const Config& cfg, std::mt19937_64& rng) {
  cfg.validate();
  Tensor<T> P({cfg.C, cfg.R, cfg.F});
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.F)));
  for (auto& x : P.storage()) x = static_cast<T>(nd(rng));
  ps.add("proto.P", std::move(P));

  add_conv(ps, "dim.r2", cfg.F, cfg.F, 1, rng);
  add_conv(ps, "dim.r3", cfg.F3, cfg.F3, 1, rng);
  add_linear(ps, "dim.b1.q", cfg.F, cfg.F, rng);
  add_linear(ps, "dim.b1.k", cfg.F, cfg.F, rng);
  add_linear(ps, "dim.b1.v", cfg.F, cfg.F, rng);
  add_linear(ps, "dim.b2.q", cfg.F, cfg.F3, rng);
  add_linear(ps, "dim.b2.k", cfg.F3, cfg.F3, rng);
  switch (cfg.agg) {
    case AggMode::Sum: break;
    case AggMode::Spatial:
      for (int c = 0; c < cfg.C; ++c) add_conv(ps, "dim.sa.c" + std::to_string(c), cfg.R, cfg.R, 3, rng);
      break;
    case AggMode::SpatialIntegrate:
      for (int c = 0; c < cfg.C; ++c) {
        add_conv(ps, "dim.sa.c" + std::to_string(c), cfg.R, cfg.R, 3, rng);
        add_conv(ps, "dim.ci.c" + std::to_string(c), cfg.R, 1, 1, rng);
      }
      break;
    case AggMode::Full:
      add_conv(ps, "dim.sa", cfg.R, cfg.R, 3, rng);
      add_conv(ps, "dim.ci", cfg.R, 1, 1, rng);
      break;
  }
}

template <typename T>
Block1Result<T> block1(const Var<T>& p, const Var<T>& r2, const Var<T>& wq, const Var<T>& bq, const Var<T>& wk,
                       const Var<T>& bk, const Var<T>& wv, const Var<T>& bv) {
  if (p.value().rank() != 2 || r2.value().rank() != 2 || p.dim(1) != r2.dim(1) || wq.dim(0) != p.dim(1))
    throw ShapeError("block1: prototypes " + shape_str(p.shape()) + " and positions " + shape_str(r2.shape()) +
                     " disagree");
  const T inv = T(1) / std::sqrt(static_cast<T>(p.dim(1)));
  auto q = ops::linear(p, wq, bq);
  auto k = ops::linear(r2, wk, bk);
  auto v = ops::linear(r2, wv, bv);
  Block1Result<T> out;
  out.m = ops::scale(ops::matmul(q, ops::transpose(k)), inv);
  out.updated = ops::matmul(ops::softmax(out.m, 1), v);
  return out;
}

template <typename T>
Var<T> block2(const Var<T>& p, const Var<T>& r3, const Var<T>& wq, const Var<T>& bq, const Var<T>& wk,
              const Var<T>& bk) {
  if (p.value().rank() != 2 || r3.value().rank() != 2 || wq.dim(0) != p.dim(1) || wk.dim(0) != r3.dim(1) ||
      wq.dim(1) != wk.dim(1))
    throw ShapeError("block2: prototypes " + shape_str(p.shape()) + " and positions " + shape_str(r3.shape()) +
                     " disagree with the projections");
  const T inv = T(1) / std::sqrt(static_cast<T>(r3.dim(1)));
  auto q = ops::linear(p, wq, bq);
  auto k = ops::linear(r3, wk, bk);
  return ops::scale(ops::matmul(q, ops::transpose(k)), inv);
}

template <typename T>
Var<T> aggregate(const ParamSet<T>& ps, const Config& cfg, const Var<T>& m2) {
  if (m2.value().rank() != 4 || m2.dim(0) != std::int64_t{cfg.C} * cfg.R)
    throw ShapeError("aggregate: expected [" + std::to_string(cfg.C * cfg.R) + ",X,Y,Z] for C=" +
                     std::to_string(cfg.C) + ", R=" + std::to_string(cfg.R) + ", got " + shape_str(m2.shape()));
  const Shape sp = {m2.dim(1), m2.dim(2), m2.dim(3)};
  const std::int64_t n = sp[0] * sp[1] * sp[2];
  auto flat = ops::reshape(m2, {m2.dim(0), n});

  Var<T> per_class;  // [C, n]
  if (cfg.agg == AggMode::Sum) {
    per_class = ops::matmul(class_sum_matrix<T>(cfg.C, cfg.R), flat);
  } else {
    std::vector<Var<T>> rows;
    const auto ones = constant(Tensor<T>({1, cfg.R}, T(1)));
    for (int c = 0; c < cfg.C; ++c) {
      auto mc = ops::reshape(ops::slice_rows(flat, std::int64_t{c} * cfg.R, std::int64_t{c + 1} * cfg.R),
                             {cfg.R, sp[0], sp[1], sp[2]});
      const std::string sfx = cfg.agg == AggMode::Full ? "" : ".c" + std::to_string(c);
      auto s = conv(ps, "dim.sa" + sfx, mc, 1);
      Var<T> r;
      if (cfg.agg == AggMode::Spatial)
        r = ops::matmul(ones, ops::reshape(s, {cfg.R, n}));
      else
        r = ops::reshape(conv(ps, "dim.ci" + sfx, s, 0), {1, n});
      rows.push_back(r);
    }
    per_class = ops::concat_rows(rows);
  }
  return ops::upsample_trilinear2x(ops::reshape(per_class, {cfg.C, sp[0], sp[1], sp[2]}));
}

template <typename T>
Var<T> relationship_map(const ParamSet<T>& ps, const Config& cfg, const backbone::FeaturePyramid<T>& pyr) {
  if (pyr.f2.dim(0) != cfg.F || pyr.f3.dim(0) != cfg.F3)
    throw ShapeError("relationship_map: pyramid widths do not match the DIM configuration");
  for (int a = 1; a <= 3; ++a)
    if (pyr.f3.dim(a) != 2 * pyr.f2.dim(a)) throw ShapeError("relationship_map: f3 must be twice the size of f2");

  auto r2 = positions(conv(ps, "dim.r2", pyr.f2, 0));
  auto r3 = positions(conv(ps, "dim.r3", pyr.f3, 0));
  auto p = ops::reshape(ps.at("proto.P"), {std::int64_t{cfg.C} * cfg.R, cfg.F});
  auto b1 = block1(p, r2, ps.at("dim.b1.q.w"), ps.at("dim.b1.q.b"), ps.at("dim.b1.k.w"), ps.at("dim.b1.k.b"),
                   ps.at("dim.b1.v.w"), ps.at("dim.b1.v.b"));
  auto m2 = block2(b1.updated, r3, ps.at("dim.b2.q.w"), ps.at("dim.b2.q.b"), ps.at("dim.b2.k.w"), ps.at("dim.b2.k.b"));
  return aggregate(ps, cfg, ops::reshape(m2, {m2.dim(0), pyr.f3.dim(1), pyr.f3.dim(2), pyr.f3.dim(3)}));
}

template <typename T>
Var<T> prototype_means(const ParamSet<T>& ps, const Config& cfg) {
  Tensor<T> avg({cfg.C, std::int64_t{cfg.C} * cfg.R});
  for (int c = 0; c < cfg.C; ++c)
    for (int i = 0; i < cfg.R; ++i) avg[std::int64_t{c} * cfg.C * cfg.R + c * cfg.R + i] = T(1) / T(cfg.R);
  return ops::matmul(constant(std::move(avg)), ops::reshape(ps.at("proto.P"), {std::int64_t{cfg.C} * cfg.R, cfg.F}));
}

#define SEMISEG_INSTANTIATE_DIM(T)                                                                              \
  template void init<T>(ParamSet<T>&, const Config&, std::mt19937_64&);                                        \
  template Block1Result<T> block1<T>(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, \
                                     const Var<T>&, const Var<T>&, const Var<T>&);                              \
  template Var<T> block2<T>(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&,          \
                            const Var<T>&);                                                                     \
  template Var<T> aggregate<T>(const ParamSet<T>&, const Config&, const Var<T>&);                               \
  template Var<T> relationship_map<T>(const ParamSet<T>&, const Config&, const backbone::FeaturePyramid<T>&);   \
  template Var<T> prototype_means<T>(const ParamSet<T>&, const Config&);

SEMISEG_INSTANTIATE_DIM(float)
SEMISEG_INSTANTIATE_DIM(double)

}  // namespace semiseg::dim
