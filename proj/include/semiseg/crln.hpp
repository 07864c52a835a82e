#pragma once

#include <random>
#include <string>

#include "semiseg/params.hpp"
#include "semiseg/volume.hpp"

// Pseudo-label rectification with the learnable correction coefficient mu.
namespace semiseg::crln {

enum class RectMode { V1Fixed, V2Concat, V3Additive };

RectMode parse_rect_mode(const std::string& s);
std::string to_string(RectMode m);

inline constexpr double kRectFloor = 1e-6;

// Adds "crln.mu_raw" (mu = sigmoid(raw), raw = 0) and, for V2Concat, the
// "crln.v2" fusion convolution.
template <typename T>
void init(ParamSet<T>& ps, int num_classes, RectMode mode, std::mt19937_64& rng);

template <typename T>
Var<T> mu(const ParamSet<T>& ps);

// s = pred + (1 - mu) * map, clamped at kRectFloor and renormalised over the
// class axis. mu is a one-element Var. When 1 - mu is exactly zero the
// prediction is returned untouched.
template <typename T>
Var<T> rectify(const Var<T>& pred, const Var<T>& map, const Var<T>& mu);

// Voxels with max pred < tau and max pred < max softmax(map) take softmax(map).
template <typename T>
Tensor<T> rectify_fixed(const Tensor<T>& pred, const Tensor<T>& map, T tau);

template <typename T>
Var<T> rectify_variant(RectMode mode, const ParamSet<T>& ps, const Var<T>& pred, const Var<T>& map, T tau);

// Supervised loss of the rectified labelled prediction. pred and map should be
// detached by the caller so only the rectification parameters receive
// gradients. A null label means the batch is unlabelled, which is an error.
template <typename T>
Var<T> mu_loss(RectMode mode, const ParamSet<T>& ps, const Var<T>& pred, const Var<T>& map, const LabelMask* label,
               T tau);

}  // namespace semiseg::crln
