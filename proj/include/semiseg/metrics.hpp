#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "semiseg/volume.hpp"

namespace semiseg::metrics {

// Binary mask [H, W, D] with entries 0/1.
using Mask = Tensor<std::uint8_t>;

Mask binary(const LabelMask& m, int c);
// Mask of argmax == c for a probability map [C, H, W, D].
Mask argmax_mask(const Tensor<float>& prob, int c);

// Both empty -> 1.
double dice(const Mask& a, const Mask& b);
double jaccard(const Mask& a, const Mask& b);

// Foreground voxels with at least one background (or out-of-volume) 6-neighbour.
std::vector<std::array<std::int64_t, 3>> boundary(const Mask& m);

// Exact squared Euclidean distance from every voxel to the nearest site
// (non-zero entry of `sites`), with per-axis spacing. Infinity without sites.
Tensor<double> squared_distance_to(const Mask& sites, const Spacing& spacing);

// Directed nearest-surface distances from each boundary voxel of a to the
// boundary of b.
std::vector<double> surface_distances(const Mask& a, const Mask& b, const Spacing& spacing);

// Mean of the combined multiset of both directed distance lists. Undefined
// (nullopt) when either mask is empty.
std::optional<double> asd(const Mask& a, const Mask& b, const Spacing& spacing = {1, 1, 1});
// 95th percentile (linear interpolation between order statistics) of the
// combined multiset.
std::optional<double> hd95(const Mask& a, const Mask& b, const Spacing& spacing = {1, 1, 1});

// Linear-interpolation percentile, q in [0, 100].
double percentile(std::vector<double> v, double q);

struct CaseScores {
  std::string id;
  double dice = 0;
  double jaccard = 0;
  std::optional<double> asd;
  std::optional<double> hd95;
};

// Foreground-class average of each metric (surface metrics over defined classes).
CaseScores score_case(const std::string& id, const Tensor<float>& prob, const LabelMask& truth,
                      const Spacing& spacing);

// Mean over foreground classes of the Dice between argmax(prob) and truth.
double mean_foreground_dice(const Tensor<float>& prob, const LabelMask& truth);

}  // namespace semiseg::metrics
