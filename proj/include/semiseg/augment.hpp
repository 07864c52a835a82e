#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <utility>

#include "semiseg/volume.hpp"

namespace semiseg::augment {

// Half-open box [lo, hi) in view coordinates.
struct Box {
  Dims3 lo{0, 0, 0};
  Dims3 hi{0, 0, 0};

  bool contains(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return i >= lo[0] && i < hi[0] && j >= lo[1] && j < hi[1] && k >= lo[2] && k < hi[2];
  }
  bool empty() const { return hi[0] <= lo[0] || hi[1] <= lo[1] || hi[2] <= lo[2]; }
};

struct CutMix {
  Box box;
  int partner_index = -1;
};

// Everything needed to replay an augmentation. The view voxel v maps to the
// source voxel crop_offset + (flip ? crop_size - 1 - v : v) on each axis.
struct AugRecord {
  Dims3 source_size{0, 0, 0};
  Dims3 crop_offset{0, 0, 0};
  Dims3 crop_size{0, 0, 0};
  std::array<bool, 3> flips{false, false, false};
  std::optional<std::uint64_t> noise_seed;
  double noise_sigma = 0.0;
  std::optional<CutMix> cutmix;

  bool same_geometry(const AugRecord& o) const {
    return source_size == o.source_size && crop_offset == o.crop_offset && crop_size == o.crop_size &&
           flips == o.flips;
  }
  void validate() const;
};

struct StrongOptions {
  double noise_sigma = 0.1;
  double cutmix_prob = 1.0;
  // Box side as a fraction of the crop extent, drawn per axis.
  std::array<double, 2> cutmix_box_range{0.3, 0.6};
};

// Random crop offset and flips for a crop of `crop` inside `source`.
AugRecord sample_geometry(const Dims3& source, const Dims3& crop, std::mt19937_64& rng);

// Crop + flip of a [H,W,D] volume.
Volume apply_geometry(const Volume& v, const AugRecord& rec);
// Crop + flip of a [C,H,W,D] field (probabilities, one-hot labels, ...).
template <typename T>
Tensor<T> apply_geometry(const Tensor<T>& field, const AugRecord& rec);
LabelMask apply_geometry(const LabelMask& m, const AugRecord& rec);

std::pair<Volume, AugRecord> weak_augment(const Volume& v, const Dims3& crop, std::mt19937_64& rng);

// Strong view sharing `geometry`: crop/flip, CutMix with the partner's view
// (same shape as the crop) and additive Gaussian noise, in that order.
std::pair<Volume, AugRecord> strong_augment(const Volume& v, const Volume& partner_view, const AugRecord& geometry,
                                            int partner_index, std::mt19937_64& rng, const StrongOptions& opt);

// Deterministic replay of a strong record (geometry, CutMix, noise).
Volume replay_strong(const Volume& v, const Volume& partner_view, const AugRecord& rec);

// Maps a teacher field computed on the weak view into the strong view. Inside
// the CutMix box the partner's field (already in its view coordinates) is
// used. Throws ContractViolation when the strong crop is not fully covered by
// the weak crop.
template <typename T>
Tensor<T> align_teacher_prediction(const Tensor<T>& teacher_weak, const AugRecord& rec_weak,
                                   const AugRecord& rec_strong, const Tensor<T>* partner);

LabelMask align_label(const LabelMask& weak_label, const AugRecord& rec_weak, const AugRecord& rec_strong,
                      const LabelMask* partner);

}  // namespace semiseg::augment
