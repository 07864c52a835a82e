#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "semiseg/tensor.hpp"

namespace semiseg {

using Spacing = std::array<double, 3>;
using Dims3 = std::array<std::int64_t, 3>;

// Scalar image volume of shape [H, W, D] with physical spacing in mm.
struct Volume {
  Tensor<float> data;
  Spacing spacing{1.0, 1.0, 1.0};
  std::string id;

  Dims3 dims() const { return {data.dim(0), data.dim(1), data.dim(2)}; }
  std::int64_t voxels() const { return data.numel(); }

  // Throws ShapeError/DataError when the volume breaks its invariants:
  // finite entries, positive spacing, every extent >= 8 and divisible by 4.
  void validate() const;
};

// Index-coded class labels in {0 .. num_classes-1}, shape [H, W, D].
struct LabelMask {
  Tensor<std::int32_t> classes;
  int num_classes = 2;

  Dims3 dims() const { return {classes.dim(0), classes.dim(1), classes.dim(2)}; }
  std::int64_t voxels() const { return classes.numel(); }
  void validate() const;

  // {0,1}-valued [C, H, W, D] view.
  template <typename T>
  Tensor<T> onehot() const {
    const std::int64_t n = classes.numel();
    Tensor<T> out({num_classes, classes.dim(0), classes.dim(1), classes.dim(2)});
    for (std::int64_t i = 0; i < n; ++i) out[classes[i] * n + i] = T(1);
    return out;
  }

  // Binary mask of voxels labelled `c`.
  std::vector<std::uint8_t> binary(int c) const;
};

struct LabelledCase {
  Volume image;
  LabelMask label;
};

// Labelled / unlabelled / validation partition. `unlabelled_truth` holds the
// generator's masks for the unlabelled volumes; training never reads it, it
// only feeds pseudo-label quality diagnostics.
struct DatasetSplit {
  std::vector<LabelledCase> labelled;
  std::vector<Volume> unlabelled;
  std::vector<LabelMask> unlabelled_truth;
  std::vector<LabelledCase> val;

  // |unlabelled| >= |labelled| and ids unique across all splits.
  void validate() const;
};

void check_volume_dims(const Dims3& d);
// Same rule for a size the user asked for; throws ConfigError.
void check_requested_dims(const Dims3& d);

// Zero-mean, unit-std intensity normalisation (identity for constant volumes).
Volume normalize_intensity(const Volume& v);

}  // namespace semiseg
