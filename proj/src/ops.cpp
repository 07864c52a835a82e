#include "semiseg/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>

namespace semiseg {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
CMapMat<T> as_mat(const Tensor<T>& t, std::int64_t rows, std::int64_t cols) {
  return CMapMat<T>(t.data(), rows, cols);
}
template <typename T>
MapMat<T> as_mat(Tensor<T>& t, std::int64_t rows, std::int64_t cols) {
  return MapMat<T>(t.data(), rows, cols);
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
void require_spatial(const Tensor<T>& t, const char* op) {
  require(t.rank() == 4, std::string(op) + ": expected [C,H,W,D], got " + shape_str(t.shape()));
}

// ---- im2col ---------------------------------------------------------------

struct ConvGeom {
  std::int64_t cin, x, y, z;
  int k, stride, pad;
  std::int64_t ox, oy, oz;
  std::int64_t out_voxels() const { return ox * oy * oz; }
  std::int64_t patch() const { return cin * k * k * k; }
};

ConvGeom conv_geom(const Shape& xs, int k, int stride, int pad) {
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], k, stride, pad, 0, 0, 0};
  g.ox = (g.x + 2 * pad - k) / stride + 1;
  g.oy = (g.y + 2 * pad - k) / stride + 1;
  g.oz = (g.z + 2 * pad - k) / stride + 1;
  require(g.ox > 0 && g.oy > 0 && g.oz > 0, "conv3d: kernel larger than padded input " + shape_str(xs));
  return g;
}

// Valid output index range [lo, hi) along one axis for kernel tap `t`.
inline void tap_range(std::int64_t out, std::int64_t in, int stride, int pad, int t, std::int64_t& lo,
                      std::int64_t& hi) {
  // need 0 <= o*stride - pad + t < in
  lo = 0;
  while (lo < out && lo * stride - pad + t < 0) ++lo;
  hi = out;
  while (hi > lo && (hi - 1) * stride - pad + t >= in) --hi;
}

// Fills cols[patch, (ox1-ox0)*oy*oz] for output planes ox in [ox0, ox1).
template <typename T>
void im2col(const T* x, const ConvGeom& g, std::int64_t ox0, std::int64_t ox1, T* cols) {
  const std::int64_t n = (ox1 - ox0) * g.oy * g.oz;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (int a = 0; a < g.k; ++a) {
      std::int64_t xlo, xhi;
      tap_range(g.ox, g.x, g.stride, g.pad, a, xlo, xhi);
      for (int b = 0; b < g.k; ++b) {
        std::int64_t ylo, yhi;
        tap_range(g.oy, g.y, g.stride, g.pad, b, ylo, yhi);
        for (int c = 0; c < g.k; ++c) {
          std::int64_t zlo, zhi;
          tap_range(g.oz, g.z, g.stride, g.pad, c, zlo, zhi);
          const std::int64_t row = ((ci * g.k + a) * g.k + b) * g.k + c;
          T* dst = cols + row * n;
          std::fill(dst, dst + n, T(0));
          for (std::int64_t ox = std::max(xlo, ox0); ox < std::min(xhi, ox1); ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + a;
            for (std::int64_t oy = ylo; oy < yhi; ++oy) {
              const std::int64_t iy = oy * g.stride - g.pad + b;
              const T* src = x + ((ci * g.x + ix) * g.y + iy) * g.z;
              T* d = dst + ((ox - ox0) * g.oy + oy) * g.oz;
              if (g.stride == 1) {
                std::memcpy(d + zlo, src + zlo - g.pad + c, sizeof(T) * static_cast<std::size_t>(zhi - zlo));
              } else {
                for (std::int64_t oz = zlo; oz < zhi; ++oz) d[oz] = src[oz * g.stride - g.pad + c];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, std::int64_t ox0, std::int64_t ox1, T* x) {
  const std::int64_t n = (ox1 - ox0) * g.oy * g.oz;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (int a = 0; a < g.k; ++a) {
      std::int64_t xlo, xhi;
      tap_range(g.ox, g.x, g.stride, g.pad, a, xlo, xhi);
      for (int b = 0; b < g.k; ++b) {
        std::int64_t ylo, yhi;
        tap_range(g.oy, g.y, g.stride, g.pad, b, ylo, yhi);
        for (int c = 0; c < g.k; ++c) {
          std::int64_t zlo, zhi;
          tap_range(g.oz, g.z, g.stride, g.pad, c, zlo, zhi);
          const std::int64_t row = ((ci * g.k + a) * g.k + b) * g.k + c;
          const T* src_row = cols + row * n;
          for (std::int64_t ox = std::max(xlo, ox0); ox < std::min(xhi, ox1); ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + a;
            for (std::int64_t oy = ylo; oy < yhi; ++oy) {
              const std::int64_t iy = oy * g.stride - g.pad + b;
              T* dst = x + ((ci * g.x + ix) * g.y + iy) * g.z;
              const T* s = src_row + ((ox - ox0) * g.oy + oy) * g.oz;
              for (std::int64_t oz = zlo; oz < zhi; ++oz) dst[oz * g.stride - g.pad + c] += s[oz];
            }
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

// Output planes per im2col slab; keeps a slab of columns around 256 KiB.
template <typename T>
std::int64_t slab_planes(const ConvGeom& g) {
  const std::int64_t per_plane = g.patch() * g.oy * g.oz * static_cast<std::int64_t>(sizeof(T));
  return std::clamp<std::int64_t>((std::int64_t{256} << 10) / std::max<std::int64_t>(per_plane, 1), 1, g.ox);
}

// out[cout, voxels] = W * im2col(x) (+ bias added by the caller).
template <typename T>
void conv_gemm(const Tensor<T>& x, const Tensor<T>& w, const ConvGeom& g, Tensor<T>& out) {
  const std::int64_t cout = w.dim(0), n = g.out_voxels(), p = g.patch();
  auto wm = as_mat(w, cout, p);
  auto om = as_mat(out, cout, n);
  if (is_pointwise(g)) {
    om.noalias() = wm * as_mat(x, g.cin, n);
    return;
  }
  const std::int64_t plane = g.oy * g.oz, step = slab_planes<T>(g);
  Buffer<T> cols(static_cast<std::size_t>(p * step * plane));
  for (std::int64_t ox0 = 0; ox0 < g.ox; ox0 += step) {
    const std::int64_t ox1 = std::min(g.ox, ox0 + step), m = (ox1 - ox0) * plane;
    im2col(x.data(), g, ox0, ox1, cols.data());
    om.middleCols(ox0 * plane, m).noalias() = wm * CMapMat<T>(cols.data(), p, m);
  }
}

// Accumulates dW and dx for out = W * im2col(x).
template <typename T>
void conv_gemm_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvGeom& g, const Tensor<T>& gout,
                        Tensor<T>* gw, Tensor<T>* gx) {
  const std::int64_t cout = w.dim(0), n = g.out_voxels(), p = g.patch();
  auto gm = as_mat(gout, cout, n);
  auto wm = as_mat(w, cout, p);
  if (is_pointwise(g)) {
    if (gw) as_mat(*gw, cout, p).noalias() += gm * as_mat(x, p, n).transpose();
    if (gx) as_mat(*gx, p, n).noalias() += wm.transpose() * gm;
    return;
  }
  const std::int64_t plane = g.oy * g.oz, step = slab_planes<T>(g);
  Buffer<T> cols(static_cast<std::size_t>(p * step * plane));
  for (std::int64_t ox0 = 0; ox0 < g.ox; ox0 += step) {
    const std::int64_t ox1 = std::min(g.ox, ox0 + step), m = (ox1 - ox0) * plane;
    auto gslab = gm.middleCols(ox0 * plane, m);
    MapMat<T> cm(cols.data(), p, m);
    if (gw) {
      im2col(x.data(), g, ox0, ox1, cols.data());
      as_mat(*gw, cout, p).noalias() += gslab * cm.transpose();
    }
    if (gx) {
      cm.noalias() = wm.transpose() * gslab;
      col2im_add(cols.data(), g, ox0, ox1, gx->data());
    }
  }
}

// ---- line-wise helpers ----------------------------------------------------

// Views a tensor as [outer, len, inner] around `axis`.
struct Lines {
  std::int64_t outer = 1, len = 1, inner = 1;
};

Lines lines_of(const Shape& s, std::size_t axis) {
  Lines l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= s[i];
  l.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) l.inner *= s[i];
  return l;
}

template <typename T>
void softmax_lines(const T* in, T* out, const Lines& l) {
  std::vector<T> mx(static_cast<std::size_t>(l.inner));
  std::vector<T> den(static_cast<std::size_t>(l.inner));
  for (std::int64_t o = 0; o < l.outer; ++o) {
    const T* src = in + o * l.len * l.inner;
    T* dst = out + o * l.len * l.inner;
    std::copy(src, src + l.inner, mx.begin());
    for (std::int64_t j = 1; j < l.len; ++j)
      for (std::int64_t i = 0; i < l.inner; ++i) mx[i] = std::max(mx[i], src[j * l.inner + i]);
    std::fill(den.begin(), den.end(), T(0));
    for (std::int64_t j = 0; j < l.len; ++j)
      for (std::int64_t i = 0; i < l.inner; ++i) {
        const T e = std::exp(src[j * l.inner + i] - mx[i]);
        dst[j * l.inner + i] = e;
        den[i] += e;
      }
    for (std::int64_t j = 0; j < l.len; ++j)
      for (std::int64_t i = 0; i < l.inner; ++i) dst[j * l.inner + i] /= den[i];
  }
}

template <typename T>
void softmax_lines_backward(const T* y, const T* g, T* gx, const Lines& l) {
  std::vector<T> dot(static_cast<std::size_t>(l.inner));
  for (std::int64_t o = 0; o < l.outer; ++o) {
    const std::int64_t base = o * l.len * l.inner;
    std::fill(dot.begin(), dot.end(), T(0));
    for (std::int64_t j = 0; j < l.len; ++j)
      for (std::int64_t i = 0; i < l.inner; ++i) dot[i] += g[base + j * l.inner + i] * y[base + j * l.inner + i];
    for (std::int64_t j = 0; j < l.len; ++j)
      for (std::int64_t i = 0; i < l.inner; ++i) {
        const std::int64_t k = base + j * l.inner + i;
        gx[k] += y[k] * (g[k] - dot[i]);
      }
  }
}

// 1-D x2 linear upsampling along the middle axis of [outer, len, inner].
template <typename T>
void upsample_line(const T* in, T* out, const Lines& l) {
  const std::int64_t L = l.len, I = l.inner;
  for (std::int64_t o = 0; o < l.outer; ++o) {
    const T* s = in + o * L * I;
    T* d = out + o * 2 * L * I;
    for (std::int64_t j = 0; j < L; ++j) {
      const T* cur = s + j * I;
      const T* prev = s + std::max<std::int64_t>(j - 1, 0) * I;
      const T* next = s + std::min<std::int64_t>(j + 1, L - 1) * I;
      T* even = d + 2 * j * I;
      T* odd = even + I;
      for (std::int64_t i = 0; i < I; ++i) {
        even[i] = T(0.75) * cur[i] + T(0.25) * prev[i];
        odd[i] = T(0.75) * cur[i] + T(0.25) * next[i];
      }
    }
  }
}

template <typename T>
void upsample_line_adjoint(const T* gout, T* gin, const Lines& l) {
  const std::int64_t L = l.len, I = l.inner;
  for (std::int64_t o = 0; o < l.outer; ++o) {
    const T* d = gout + o * 2 * L * I;
    T* s = gin + o * L * I;
    for (std::int64_t j = 0; j < L; ++j) {
      T* cur = s + j * I;
      T* prev = s + std::max<std::int64_t>(j - 1, 0) * I;
      T* next = s + std::min<std::int64_t>(j + 1, L - 1) * I;
      const T* even = d + 2 * j * I;
      const T* odd = even + I;
      for (std::int64_t i = 0; i < I; ++i) {
        cur[i] += T(0.75) * (even[i] + odd[i]);
        prev[i] += T(0.25) * even[i];
        next[i] += T(0.25) * odd[i];
      }
    }
  }
}

template <typename T, typename F>
Tensor<T> map_unary(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace

// ===========================================================================
// kernels
// ===========================================================================
namespace kernels {

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, int stride, int pad) {
  require_spatial(x, "conv3d");
  require(w.rank() == 5 && w.dim(1) == x.dim(0) && w.dim(2) == w.dim(3) && w.dim(3) == w.dim(4),
          "conv3d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  const ConvGeom g = conv_geom(x.shape(), static_cast<int>(w.dim(2)), stride, pad);
  const std::int64_t cout = w.dim(0), n = g.out_voxels();
  Tensor<T> out({cout, g.ox, g.oy, g.oz});
  conv_gemm(x, w, g, out);
  auto om = as_mat(out, cout, n);
  if (b) {
    require(b->numel() == cout, "conv3d: bias size mismatch");
    for (std::int64_t c = 0; c < cout; ++c) om.row(c).array() += (*b)[c];
  }
  return out;
}

template <typename T>
Tensor<T> upsample_trilinear2x(const Tensor<T>& x) {
  require_spatial(x, "upsample");
  Tensor<T> cur = x;
  for (std::size_t axis = 1; axis <= 3; ++axis) {
    Shape s = cur.shape();
    const Lines l = lines_of(s, axis);
    s[axis] *= 2;
    Tensor<T> next(s);
    upsample_line(cur.data(), next.data(), l);
    cur = std::move(next);
  }
  return cur;
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  softmax_lines(x.data(), out.data(), Lines{1, x.dim(0), x.numel() / x.dim(0)});
  return out;
}

}  // namespace kernels

// ===========================================================================
// differentiable ops
// ===========================================================================
namespace ops {

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value());
  Tensor<T> out = a.value();
  out += b.value();
  return record<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    a.accumulate(g);
    b.accumulate(g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value());
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return record<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    a.accumulate(g);
    if (b.requires_grad()) {
      Tensor<T> ng = map_unary(g, [](T v) { return -v; });
      b.accumulate(ng);
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value());
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return record<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    if (a.requires_grad()) {
      Tensor<T> ga(g.shape());
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * b.value()[i];
      a.accumulate(ga);
    }
    if (b.requires_grad()) {
      Tensor<T> gb(g.shape());
      for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] = g[i] * a.value()[i];
      b.accumulate(gb);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = map_unary(a.value(), [s](T v) { return v * s; });
  return record<T>(std::move(out), {a}, [a, s](const Tensor<T>& g) {
    a.accumulate(map_unary(g, [s](T v) { return v * s; }));
  });
}

template <typename T>
Var<T> scale_by(const Var<T>& a, const Var<T>& s) {
  require(s.numel() == 1, "scale_by: scale must have one element");
  const T sv = s.value()[0];
  Tensor<T> out = map_unary(a.value(), [sv](T v) { return v * sv; });
  return record<T>(std::move(out), {a, s}, [a, s, sv](const Tensor<T>& g) {
    if (a.requires_grad()) a.accumulate(map_unary(g, [sv](T v) { return v * sv; }));
    if (s.requires_grad()) {
      T acc = 0;
      for (std::int64_t i = 0; i < g.numel(); ++i) acc += g[i] * a.value()[i];
      s.accumulate(Tensor<T>({1}, std::vector<T>{acc}));
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().span()) acc += v;
  return record<T>(Tensor<T>({1}, std::vector<T>{acc}), {a}, [a](const Tensor<T>& g) {
    a.accumulate(Tensor<T>(a.shape(), g[0]));
  });
}

template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  require(terms.size() == weights.size(), "weighted_sum: size mismatch");
  T acc = 0;
  std::vector<Var<T>> used;
  std::vector<T> used_w;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (!terms[i].defined()) continue;
    require(terms[i].numel() == 1, "weighted_sum: terms must be scalars");
    acc += weights[i] * terms[i].value()[0];
    used.push_back(terms[i]);
    used_w.push_back(weights[i]);
  }
  return record<T>(Tensor<T>({1}, std::vector<T>{acc}), used, [used, used_w](const Tensor<T>& g) {
    for (std::size_t i = 0; i < used.size(); ++i)
      used[i].accumulate(Tensor<T>({1}, std::vector<T>{g[0] * used_w[i]}));
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = map_unary(a.value(), [](T v) { return v > T(0) ? v : T(0); });
  return record<T>(std::move(out), {a}, [a](const Tensor<T>& g) {
    Tensor<T> ga(g.shape());
    for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = a.value()[i] > T(0) ? g[i] : T(0);
    a.accumulate(ga);
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = map_unary(a.value(), [](T v) { return T(1) / (T(1) + std::exp(-v)); });
  Tensor<T> y = out;
  return record<T>(std::move(out), {a}, [a, y](const Tensor<T>& g) {
    Tensor<T> ga(g.shape());
    for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * y[i] * (T(1) - y[i]);
    a.accumulate(ga);
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return record<T>(std::move(out), {a}, [a](const Tensor<T>& g) { a.accumulate(g.reshaped(a.shape())); });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  require(a.value().rank() == 2, "transpose: expected 2-D");
  const std::int64_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out({n, m});
  as_mat(out, n, m) = as_mat(a.value(), m, n).transpose();
  return record<T>(std::move(out), {a}, [a, m, n](const Tensor<T>& g) {
    Tensor<T> ga({m, n});
    as_mat(ga, m, n) = as_mat(g, n, m).transpose();
    a.accumulate(ga);
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  as_mat(out, m, n).noalias() = as_mat(a.value(), m, k) * as_mat(b.value(), k, n);
  return record<T>(std::move(out), {a, b}, [a, b, m, k, n](const Tensor<T>& g) {
    auto gm = as_mat(g, m, n);
    if (a.requires_grad()) {
      Tensor<T> ga({m, k});
      as_mat(ga, m, k).noalias() = gm * as_mat(b.value(), k, n).transpose();
      a.accumulate(ga);
    }
    if (b.requires_grad()) {
      Tensor<T> gb({k, n});
      as_mat(gb, k, n).noalias() = as_mat(a.value(), m, k).transpose() * gm;
      b.accumulate(gb);
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require(x.value().rank() == 2 && w.value().rank() == 2 && x.dim(1) == w.dim(0),
          "linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const std::int64_t n = x.dim(0), fin = x.dim(1), fout = w.dim(1);
  Tensor<T> out({n, fout});
  auto om = as_mat(out, n, fout);
  om.noalias() = as_mat(x.value(), n, fin) * as_mat(w.value(), fin, fout);
  const bool has_bias = b.defined();
  if (has_bias) {
    require(b.numel() == fout, "linear: bias size mismatch");
    for (std::int64_t r = 0; r < n; ++r)
      for (std::int64_t c = 0; c < fout; ++c) om(r, c) += b.value()[c];
  }
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return record<T>(std::move(out), inputs, [x, w, b, has_bias, n, fin, fout](const Tensor<T>& g) {
    auto gm = as_mat(g, n, fout);
    if (x.requires_grad()) {
      Tensor<T> gx({n, fin});
      as_mat(gx, n, fin).noalias() = gm * as_mat(w.value(), fin, fout).transpose();
      x.accumulate(gx);
    }
    if (w.requires_grad()) {
      Tensor<T> gw({fin, fout});
      as_mat(gw, fin, fout).noalias() = as_mat(x.value(), n, fin).transpose() * gm;
      w.accumulate(gw);
    }
    if (has_bias && b.requires_grad()) {
      Tensor<T> gb({fout});
      for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t c = 0; c < fout; ++c) gb[c] += gm(r, c);
      b.accumulate(gb);
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& a, int axis) {
  require(a.value().rank() == 2 && (axis == 0 || axis == 1), "softmax: expected 2-D input and axis 0/1");
  const Lines l = lines_of(a.shape(), static_cast<std::size_t>(axis));
  Tensor<T> out(a.shape());
  softmax_lines(a.value().data(), out.data(), l);
  Tensor<T> y = out;
  return record<T>(std::move(out), {a}, [a, y, l](const Tensor<T>& g) {
    Tensor<T> ga(g.shape());
    softmax_lines_backward(y.data(), g.data(), ga.data(), l);
    a.accumulate(ga);
  });
}

template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
  const Lines l{1, x.dim(0), x.numel() / x.dim(0)};
  Tensor<T> out(x.shape());
  softmax_lines(x.value().data(), out.data(), l);
  Tensor<T> y = out;
  return record<T>(std::move(out), {x}, [x, y, l](const Tensor<T>& g) {
    Tensor<T> gx(g.shape());
    softmax_lines_backward(y.data(), g.data(), gx.data(), l);
    x.accumulate(gx);
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, std::int64_t begin, std::int64_t end) {
  require(a.value().rank() >= 1 && 0 <= begin && begin < end && end <= a.dim(0), "slice_rows: bad range");
  Shape s = a.shape();
  const std::int64_t row = a.numel() / s[0];
  s[0] = end - begin;
  Tensor<T> out(s);
  std::copy(a.value().data() + begin * row, a.value().data() + end * row, out.data());
  return record<T>(std::move(out), {a}, [a, begin, row](const Tensor<T>& g) {
    Tensor<T>& ga = const_cast<Var<T>&>(a).grad_buffer();
    for (std::int64_t i = 0; i < g.numel(); ++i) ga[begin * row + i] += g[i];
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Shape s = parts[0].shape();
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    require(ps.size() == s.size() && std::equal(ps.begin() + 1, ps.end(), s.begin() + 1),
            "concat_rows: trailing shapes differ");
    rows += ps[0];
  }
  s[0] = rows;
  Tensor<T> out(s);
  std::int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.numel(), out.data() + off);
    off += p.numel();
  }
  return record<T>(std::move(out), parts, [parts](const Tensor<T>& g) {
    std::int64_t o = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) {
        Tensor<T> gp(p.shape());
        std::copy(g.data() + o, g.data() + o + p.numel(), gp.data());
        p.accumulate(gp);
      }
      o += p.numel();
    }
  });
}

template <typename T>
Var<T> gather_columns(const Var<T>& a, const std::vector<std::int64_t>& idx) {
  require(a.value().rank() == 2, "gather_columns: expected [d, N]");
  const std::int64_t d = a.dim(0), n = a.dim(1), k = static_cast<std::int64_t>(idx.size());
  Tensor<T> out({k, d});
  for (std::int64_t r = 0; r < k; ++r) {
    require(idx[r] >= 0 && idx[r] < n, "gather_columns: index out of range");
    for (std::int64_t j = 0; j < d; ++j) out[r * d + j] = a.value()[j * n + idx[r]];
  }
  return record<T>(std::move(out), {a}, [a, idx, d, n, k](const Tensor<T>& g) {
    Tensor<T>& ga = const_cast<Var<T>&>(a).grad_buffer();
    for (std::int64_t r = 0; r < k; ++r)
      for (std::int64_t j = 0; j < d; ++j) ga[j * n + idx[r]] += g[r * d + j];
  });
}

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  const bool has_bias = b.defined();
  Tensor<T> out = kernels::conv3d_forward(x.value(), w.value(), has_bias ? &b.value() : nullptr, stride, pad);
  const ConvGeom g = conv_geom(x.shape(), static_cast<int>(w.dim(2)), stride, pad);
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return record<T>(std::move(out), inputs, [x, w, b, g, has_bias](const Tensor<T>& gout) {
    const std::int64_t cout = w.dim(0), n = g.out_voxels();
    Tensor<T>* gw = w.requires_grad() ? &const_cast<Var<T>&>(w).grad_buffer() : nullptr;
    Tensor<T>* gx = x.requires_grad() ? &const_cast<Var<T>&>(x).grad_buffer() : nullptr;
    conv_gemm_backward(x.value(), w.value(), g, gout, gw, gx);
    if (has_bias && b.requires_grad()) {
      auto gm = as_mat(gout, cout, n);
      Tensor<T> gb({cout});
      for (std::int64_t c = 0; c < cout; ++c) gb[c] = gm.row(c).sum();
      b.accumulate(gb);
    }
  });
}

template <typename T>
Var<T> conv_transpose3d_k2s2(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_spatial(x.value(), "conv_transpose3d");
  const Tensor<T>& wv = w.value();
  require(wv.rank() == 5 && wv.dim(0) == x.dim(0) && wv.dim(2) == 2 && wv.dim(3) == 2 && wv.dim(4) == 2,
          "conv_transpose3d: weight " + shape_str(wv.shape()) + " incompatible with input " +
              shape_str(x.shape()));
  const std::int64_t cin = x.dim(0), X = x.dim(1), Y = x.dim(2), Z = x.dim(3);
  const std::int64_t cout = wv.dim(1), n = X * Y * Z, rows = cout * 8;
  // tmp[co*8 + tap, voxel] = sum_ci w[ci, co, tap] * x[ci, voxel]
  Tensor<T> tmp({rows, n});
  as_mat(tmp, rows, n).noalias() = as_mat(wv, cin, rows).transpose() * as_mat(x.value(), cin, n);
  Tensor<T> out({cout, 2 * X, 2 * Y, 2 * Z});
  const std::int64_t OY = 2 * Y, OZ = 2 * Z;
  const bool has_bias = b.defined();
  for (std::int64_t co = 0; co < cout; ++co) {
    const T bias = has_bias ? b.value()[co] : T(0);
    for (int tap = 0; tap < 8; ++tap) {
      const int a = tap >> 2, bb = (tap >> 1) & 1, c = tap & 1;
      const T* src = tmp.data() + (co * 8 + tap) * n;
      for (std::int64_t i = 0; i < X; ++i)
        for (std::int64_t j = 0; j < Y; ++j) {
          T* dst = out.data() + ((co * 2 * X + 2 * i + a) * OY + 2 * j + bb) * OZ + c;
          const T* s = src + (i * Y + j) * Z;
          for (std::int64_t k = 0; k < Z; ++k) dst[2 * k] = s[k] + bias;
        }
    }
  }
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return record<T>(std::move(out), inputs,
                   [x, w, b, has_bias, cin, cout, X, Y, Z, n, rows, OY, OZ](const Tensor<T>& g) {
                     Tensor<T> gtmp({rows, n});
                     for (std::int64_t co = 0; co < cout; ++co)
                       for (int tap = 0; tap < 8; ++tap) {
                         const int a = tap >> 2, bb = (tap >> 1) & 1, c = tap & 1;
                         T* dst = gtmp.data() + (co * 8 + tap) * n;
                         for (std::int64_t i = 0; i < X; ++i)
                           for (std::int64_t j = 0; j < Y; ++j) {
                             const T* s = g.data() + ((co * 2 * X + 2 * i + a) * OY + 2 * j + bb) * OZ + c;
                             T* d = dst + (i * Y + j) * Z;
                             for (std::int64_t k = 0; k < Z; ++k) d[k] = s[2 * k];
                           }
                       }
                     if (w.requires_grad()) {
                       Tensor<T> gw(w.shape());
                       as_mat(gw, cin, rows).noalias() =
                           as_mat(x.value(), cin, n) * as_mat(gtmp, rows, n).transpose();
                       w.accumulate(gw);
                     }
                     if (x.requires_grad()) {
                       Tensor<T> gx(x.shape());
                       as_mat(gx, cin, n).noalias() = as_mat(w.value(), cin, rows) * as_mat(gtmp, rows, n);
                       x.accumulate(gx);
                     }
                     if (has_bias && b.requires_grad()) {
                       Tensor<T> gb({cout});
                       const std::int64_t per = g.numel() / cout;
                       for (std::int64_t co = 0; co < cout; ++co) {
                         T acc = 0;
                         for (std::int64_t i = 0; i < per; ++i) acc += g[co * per + i];
                         gb[co] = acc;
                       }
                       b.accumulate(gb);
                     }
                   });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require_spatial(x.value(), "instance_norm");
  const std::int64_t C = x.dim(0), n = x.numel() / C;
  require(gamma.numel() == C && beta.numel() == C, "instance_norm: affine size mismatch");
  Tensor<T> xhat(x.shape());
  Tensor<T> inv_std({C});
  Tensor<T> out(x.shape());
  for (std::int64_t c = 0; c < C; ++c) {
    const T* src = x.value().data() + c * n;
    T mean = 0;
    for (std::int64_t i = 0; i < n; ++i) mean += src[i];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::int64_t i = 0; i < n; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[c] = is;
    const T gm = gamma.value()[c], bt = beta.value()[c];
    T* xh = xhat.data() + c * n;
    T* o = out.data() + c * n;
    for (std::int64_t i = 0; i < n; ++i) {
      xh[i] = (src[i] - mean) * is;
      o[i] = gm * xh[i] + bt;
    }
  }
  return record<T>(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, C, n](const Tensor<T>& g) {
    Tensor<T> gg({C}), gb({C});
    Tensor<T> gx;
    if (x.requires_grad()) gx = Tensor<T>(x.shape());
    for (std::int64_t c = 0; c < C; ++c) {
      const T* gc = g.data() + c * n;
      const T* xh = xhat.data() + c * n;
      T sg = 0, sgx = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        sg += gc[i];
        sgx += gc[i] * xh[i];
      }
      gg[c] = sgx;
      gb[c] = sg;
      if (x.requires_grad()) {
        const T gm = gamma.value()[c];
        const T k = gm * inv_std[c] / static_cast<T>(n);
        T* d = gx.data() + c * n;
        for (std::int64_t i = 0; i < n; ++i) d[i] = k * (static_cast<T>(n) * gc[i] - sg - xh[i] * sgx);
      }
    }
    gamma.accumulate(gg);
    beta.accumulate(gb);
    if (x.requires_grad()) x.accumulate(gx);
  });
}

template <typename T>
Var<T> upsample_trilinear2x(const Var<T>& x) {
  Tensor<T> out = kernels::upsample_trilinear2x(x.value());
  return record<T>(std::move(out), {x}, [x](const Tensor<T>& g) {
    Tensor<T> cur = g;
    for (std::size_t axis = 3; axis >= 1; --axis) {
      Shape s = cur.shape();
      s[axis] /= 2;
      Tensor<T> prev(s);
      upsample_line_adjoint(cur.data(), prev.data(), lines_of(s, axis));
      cur = std::move(prev);
    }
    x.accumulate(cur);
  });
}

}  // namespace ops

#define SEMISEG_INSTANTIATE_OPS(T)                                                                         \
  template Tensor<T> kernels::conv3d_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, int, \
                                                int);                                                      \
  template Tensor<T> kernels::upsample_trilinear2x<T>(const Tensor<T>&);                                   \
  template Tensor<T> kernels::softmax_channels<T>(const Tensor<T>&);                                       \
  template Var<T> ops::add<T>(const Var<T>&, const Var<T>&);                                               \
  template Var<T> ops::sub<T>(const Var<T>&, const Var<T>&);                                               \
  template Var<T> ops::mul<T>(const Var<T>&, const Var<T>&);                                               \
  template Var<T> ops::scale<T>(const Var<T>&, T);                                                         \
  template Var<T> ops::scale_by<T>(const Var<T>&, const Var<T>&);                                          \
  template Var<T> ops::sum<T>(const Var<T>&);                                                              \
  template Var<T> ops::weighted_sum<T>(const std::vector<Var<T>>&, const std::vector<T>&);                 \
  template Var<T> ops::relu<T>(const Var<T>&);                                                             \
  template Var<T> ops::sigmoid<T>(const Var<T>&);                                                          \
  template Var<T> ops::reshape<T>(const Var<T>&, Shape);                                                   \
  template Var<T> ops::transpose<T>(const Var<T>&);                                                        \
  template Var<T> ops::matmul<T>(const Var<T>&, const Var<T>&);                                            \
  template Var<T> ops::linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                             \
  template Var<T> ops::softmax<T>(const Var<T>&, int);                                                     \
  template Var<T> ops::softmax_channels<T>(const Var<T>&);                                                 \
  template Var<T> ops::slice_rows<T>(const Var<T>&, std::int64_t, std::int64_t);                           \
  template Var<T> ops::concat_rows<T>(const std::vector<Var<T>>&);                                         \
  template Var<T> ops::gather_columns<T>(const Var<T>&, const std::vector<std::int64_t>&);                 \
  template Var<T> ops::conv3d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                   \
  template Var<T> ops::conv_transpose3d_k2s2<T>(const Var<T>&, const Var<T>&, const Var<T>&);              \
  template Var<T> ops::instance_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                   \
  template Var<T> ops::upsample_trilinear2x<T>(const Var<T>&);

SEMISEG_INSTANTIATE_OPS(float)
SEMISEG_INSTANTIATE_OPS(double)

}  // namespace semiseg
