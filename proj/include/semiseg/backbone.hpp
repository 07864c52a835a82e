#pragma once

#include <random>

#include "semiseg/params.hpp"

namespace semiseg::backbone {

struct Config {
  int in_channels = 1;
  int num_classes = 2;
  int F4 = 8;   // full resolution
  int F3 = 16;  // 1/2 resolution
  int F = 32;   // 1/4 resolution
  void validate() const;
};

// Decoder taps and logits of one sample, channels first.
template <typename T>
struct FeaturePyramid {
  Var<T> f2;      // [F, H/4, W/4, D/4]
  Var<T> f3;      // [F3, H/2, W/2, D/2]
  Var<T> f4;      // [F4, H, W, D]
  Var<T> logits;  // [C, H, W, D]
};

// Adds "backbone.*" parameters.
template <typename T>
void init(ParamSet<T>& ps, const Config& cfg, std::mt19937_64& rng);

// x: [in_channels, H, W, D] with H, W, D divisible by 4.
template <typename T>
FeaturePyramid<T> forward(const ParamSet<T>& ps, const Config& cfg, const Var<T>& x);

}  // namespace semiseg::backbone
