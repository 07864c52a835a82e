#include "semiseg/crln.hpp"

#include <algorithm>

#include "semiseg/losses.hpp"
#include "semiseg/ops.hpp"

namespace semiseg::crln {

RectMode parse_rect_mode(const std::string& s) {
  if (s == "v1") return RectMode::V1Fixed;
  if (s == "v2") return RectMode::V2Concat;
  if (s == "v3") return RectMode::V3Additive;
  throw ConfigError("unknown rectification mode '" + s + "' (expected v1, v2 or v3)");
}

std::string to_string(RectMode m) {
  switch (m) {
    case RectMode::V1Fixed: return "v1";
    case RectMode::V2Concat: return "v2";
    case RectMode::V3Additive: return "v3";
  }
  return "?";
}

template <typename T>
void init(ParamSet<T>& ps, int num_classes, RectMode mode, std::mt19937_64& rng) {
  ps.add("crln.mu_raw", Tensor<T>({1}));
  if (mode == RectMode::V2Concat) {
    ps.add("crln.v2.w", he_normal<T>({num_classes, 2 * num_classes, 3, 3, 3}, 2 * num_classes * 27, rng, 1.0));
    ps.add("crln.v2.b", Tensor<T>({num_classes}));
  }
}

template <typename T>
Var<T> mu(const ParamSet<T>& ps) {
  return ops::sigmoid(ps.at("crln.mu_raw"));
}

template <typename T>
Var<T> rectify(const Var<T>& pred, const Var<T>& map, const Var<T>& mu) {
  if (pred.shape() != map.shape() || pred.value().rank() < 2)
    throw ShapeError("rectify: prediction " + shape_str(pred.shape()) + " vs map " + shape_str(map.shape()));
  if (mu.numel() != 1) throw ShapeError("rectify: mu must be a scalar");
  const T w = T(1) - mu.value()[0];
  if (w == T(0)) return pred;

  const std::int64_t C = pred.dim(0), n = pred.numel() / C;
  const T floor = T(kRectFloor);
  Tensor<T> out(pred.shape());
  std::vector<T> z(static_cast<std::size_t>(n), T(0));
  // active[c*n+i] marks entries above the clamp.
  std::vector<char> active(static_cast<std::size_t>(pred.numel()));
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t k = c * n + i;
      const T s = pred.value()[k] + w * map.value()[k];
      active[k] = s > floor;
      out[k] = active[k] ? s : floor;
      z[i] += out[k];
    }
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < n; ++i) out[c * n + i] /= z[i];

  Tensor<T> outv = out;
  return record<T>(std::move(out), {pred, map, mu}, [pred, map, mu, outv, z, active, C, n, w](const Tensor<T>& g) {
    // ds = (g - sum_c g*out) / z on active entries.
    Tensor<T> ds(pred.shape());
    for (std::int64_t i = 0; i < n; ++i) {
      T dot = 0;
      for (std::int64_t c = 0; c < C; ++c) dot += g[c * n + i] * outv[c * n + i];
      for (std::int64_t c = 0; c < C; ++c) {
        const std::int64_t k = c * n + i;
        ds[k] = active[k] ? (g[k] - dot) / z[i] : T(0);
      }
    }
    if (mu.requires_grad()) {
      T gm = 0;
      for (std::int64_t k = 0; k < ds.numel(); ++k) gm -= ds[k] * map.value()[k];
      Tensor<T> gmu({1});
      gmu[0] = gm;
      mu.accumulate(gmu);
    }
    if (map.requires_grad()) {
      Tensor<T> gmap = ds;
      for (auto& v : gmap.storage()) v *= w;
      map.accumulate(gmap);
    }
    pred.accumulate(ds);
  });
}

template <typename T>
Tensor<T> rectify_fixed(const Tensor<T>& pred, const Tensor<T>& map, T tau) {
  pred.check_same(map);
  const Tensor<T> q = kernels::softmax_channels(map);
  const std::int64_t C = pred.dim(0), n = pred.numel() / C;
  Tensor<T> out = pred;
  for (std::int64_t i = 0; i < n; ++i) {
    T mp = pred[i], mq = q[i];
    for (std::int64_t c = 1; c < C; ++c) {
      mp = std::max(mp, pred[c * n + i]);
      mq = std::max(mq, q[c * n + i]);
    }
    if (mp < tau && mp < mq)
      for (std::int64_t c = 0; c < C; ++c) out[c * n + i] = q[c * n + i];
  }
  return out;
}

template <typename T>
Var<T> rectify_variant(RectMode mode, const ParamSet<T>& ps, const Var<T>& pred, const Var<T>& map, T tau) {
  switch (mode) {
    case RectMode::V1Fixed: return constant(rectify_fixed(pred.value(), map.value(), tau));
    case RectMode::V2Concat: {
      auto fused = ops::conv3d(ops::concat_rows<T>({pred, map}), ps.at("crln.v2.w"), ps.at("crln.v2.b"), 1, 1);
      return ops::softmax_channels(fused);
    }
    case RectMode::V3Additive: return rectify(pred, map, mu(ps));
  }
  throw ConfigError("unknown rectification mode");
}

template <typename T>
Var<T> mu_loss(RectMode mode, const ParamSet<T>& ps, const Var<T>& pred, const Var<T>& map, const LabelMask* label,
               T tau) {
  if (!label) throw ContractViolation("mu_loss is defined on labelled data only");
  return losses::supervised(rectify_variant(mode, ps, pred, map, tau), label->onehot<T>());
}

#define SEMISEG_INSTANTIATE_CRLN(T)                                                                          \
  template void init<T>(ParamSet<T>&, int, RectMode, std::mt19937_64&);                                      \
  template Var<T> mu<T>(const ParamSet<T>&);                                                                 \
  template Var<T> rectify<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                   \
  template Tensor<T> rectify_fixed<T>(const Tensor<T>&, const Tensor<T>&, T);                                \
  template Var<T> rectify_variant<T>(RectMode, const ParamSet<T>&, const Var<T>&, const Var<T>&, T);         \
  template Var<T> mu_loss<T>(RectMode, const ParamSet<T>&, const Var<T>&, const Var<T>&, const LabelMask*, T);

SEMISEG_INSTANTIATE_CRLN(float)
SEMISEG_INSTANTIATE_CRLN(double)

}  // namespace semiseg::crln
