#pragma once

#include <random>
#include <string>

#include "semiseg/backbone.hpp"
#include "semiseg/params.hpp"

// Prototype bank and the interaction module producing the relationship map.
namespace semiseg::dim {

// Sum: direct summation over the R proximity matrices.
// Spatial: per-class 3x3x3 convolution, then summation.
// SpatialIntegrate: per-class 3x3x3 and 1x1x1 convolutions.
// Full: both convolutions shared across classes.
enum class AggMode { Sum, Spatial, SpatialIntegrate, Full };

AggMode parse_agg_mode(const std::string& s);
std::string to_string(AggMode m);

struct Config {
  int C = 2;
  int R = 16;
  int F = 32;
  int F3 = 16;
  AggMode agg = AggMode::Full;
  void validate() const;
};

// Adds "proto.P" [C,R,F] and the "dim.*" parameters.
template <typename T>
void init(ParamSet<T>& ps, const Config& cfg, std::mt19937_64& rng);

template <typename T>
struct Block1Result {
  Var<T> m;        // [rows, N4] attention logits
  Var<T> updated;  // [rows, F]
};

// Cross attention of prototype rows p [rows, F] against positions r2 [N4, F].
// Weights are [in, out]; biases may be undefined.
template <typename T>
Block1Result<T> block1(const Var<T>& p, const Var<T>& r2, const Var<T>& wq, const Var<T>& bq, const Var<T>& wk,
                       const Var<T>& bk, const Var<T>& wv, const Var<T>& bv);

// Proximity scores of updated prototypes p [rows, F] against r3 [N2, F3].
template <typename T>
Var<T> block2(const Var<T>& p, const Var<T>& r3, const Var<T>& wq, const Var<T>& bq, const Var<T>& wk,
              const Var<T>& bk);

// m2: [C*R, X, Y, Z] with row c*R + i holding prototype set i of class c.
// Returns the upsampled map [C, 2X, 2Y, 2Z].
template <typename T>
Var<T> aggregate(const ParamSet<T>& ps, const Config& cfg, const Var<T>& m2);

// Full module on one sample's pyramid. Returns [C, H, W, D].
template <typename T>
Var<T> relationship_map(const ParamSet<T>& ps, const Config& cfg, const backbone::FeaturePyramid<T>& pyr);

// Mean prototype of every class, [C, F].
template <typename T>
Var<T> prototype_means(const ParamSet<T>& ps, const Config& cfg);

}  // namespace semiseg::dim
