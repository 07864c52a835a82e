#pragma once

#include <cstdint>
#include <vector>

#include "semiseg/autograd.hpp"

// Differentiable primitives. Spatial operands use the [channels, H, W, D]
// layout of a single sample; batching is done by the caller.
namespace semiseg::ops {

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
// a * s where s is a one-element Var.
template <typename T> Var<T> scale_by(const Var<T>& a, const Var<T>& s);
template <typename T> Var<T> sum(const Var<T>& a);
// Weighted sum of one-element Vars; skips undefined entries.
template <typename T> Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);

// 2-D helpers.
template <typename T> Var<T> transpose(const Var<T>& a);
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
// x[N,in] * w[in,out] + b[out]; b may be undefined.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
// Softmax of a 2-D tensor along axis 0 or 1.
template <typename T> Var<T> softmax(const Var<T>& a, int axis);
template <typename T> Var<T> slice_rows(const Var<T>& a, std::int64_t begin, std::int64_t end);
template <typename T> Var<T> concat_rows(const std::vector<Var<T>>& parts);
// Picks columns idx of a [d, N] tensor and returns them as rows of [K, d].
template <typename T> Var<T> gather_columns(const Var<T>& a, const std::vector<std::int64_t>& idx);

// Volumetric ops.
// w: [Cout, Cin, k, k, k]; b: [Cout] or undefined.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);
// Transposed convolution with kernel 2 and stride 2. w: [Cin, Cout, 2, 2, 2].
template <typename T> Var<T> conv_transpose3d_k2s2(const Var<T>& x, const Var<T>& w, const Var<T>& b);
// Per-channel normalisation over the spatial axes with affine gamma/beta.
template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));
// Trilinear x2 upsampling (half-pixel centres, edge clamped).
template <typename T> Var<T> upsample_trilinear2x(const Var<T>& x);
// Softmax over the channel axis of a [C, ...] tensor.
template <typename T> Var<T> softmax_channels(const Var<T>& x);

}  // namespace semiseg::ops

namespace semiseg::kernels {

// Non-differentiable forward kernels shared with inference code.
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, int stride, int pad);
template <typename T> Tensor<T> upsample_trilinear2x(const Tensor<T>& x);
template <typename T> Tensor<T> softmax_channels(const Tensor<T>& x);

}  // namespace semiseg::kernels
