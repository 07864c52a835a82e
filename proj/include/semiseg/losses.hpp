#pragma once

#include "semiseg/autograd.hpp"

namespace semiseg::losses {

inline constexpr double kDiceEps = 1e-5;
inline constexpr double kProbFloor = 1e-12;

// 0.5 * (1 - mean_c soft Dice) + 0.5 * mean voxel cross-entropy.
// prob: [C, H, W, D] probabilities; onehot: same shape.
template <typename T>
Var<T> supervised(const Var<T>& prob, const Tensor<T>& onehot);

// supervised() applied to softmax over the channel axis of `scores`.
template <typename T>
Var<T> supervised_from_scores(const Var<T>& scores, const Tensor<T>& onehot);

// Mean over voxels of 1[max target >= tau] * -log prob[argmax target].
template <typename T>
Var<T> unsupervised(const Var<T>& prob, const Tensor<T>& target, T tau);

// Fraction of voxels whose maximum class probability reaches tau.
template <typename T>
double reliable_fraction(const Tensor<T>& prob, T tau);

}  // namespace semiseg::losses
