#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "semiseg/volume.hpp"

namespace semiseg::synthetic {

using Vec3 = std::array<double, 3>;

// Analytic foreground primitive in voxel coordinates (voxel centres at
// integer positions).
struct Primitive {
  enum class Kind { Ellipsoid, Tube };
  Kind kind = Kind::Ellipsoid;
  int label = 1;
  // Ellipsoid: centre, semi-axes and a rotation whose rows are the local axes.
  Vec3 centre{};
  Vec3 radii{};
  std::array<Vec3, 3> axes{};
  // Tube: capsule around the segment [a, b].
  Vec3 a{}, b{};
  double radius = 0.0;

  bool contains(const Vec3& p) const;
  // Depth below the surface in voxels, positive inside.
  double depth(const Vec3& p) const;
};

struct GeneratorOptions {
  Dims3 size{32, 32, 32};
  int num_classes = 2;
  double noise_sigma = 0.3;
  double contrast = 1.0;
  // Width of the low-contrast rim inside each shape and its intensity gap in
  // units of noise_sigma.
  double rim_width = 1.5;
  double rim_gap = 0.1;
  double min_foreground = 0.02;
  double max_foreground = 0.4;
  Spacing spacing{1.0, 1.0, 1.0};
};

struct Case {
  Volume image;
  LabelMask label;
  std::vector<Primitive> shapes;
};

// One synthetic case; a pure function of (seed, stream, index, options).
Case generate_case(std::uint64_t seed, std::uint64_t stream, std::uint64_t index, const GeneratorOptions& opt);

// Rasterises primitives into a mask; later primitives paint over earlier ones.
LabelMask rasterize(const std::vector<Primitive>& shapes, const Dims3& size, int num_classes);

DatasetSplit generate_dataset(std::uint64_t seed, int n_labelled, int n_unlabelled, int n_val,
                              const GeneratorOptions& opt);

}  // namespace semiseg::synthetic
