#pragma once

#include <optional>
#include <random>
#include <vector>

#include "semiseg/params.hpp"
#include "semiseg/volume.hpp"

// Contrastive supervision of uncertain voxels against prototype-blended
// positive centres.
namespace semiseg::cps {

struct Thresholds {
  double tau = 0.9;
  double tau_w = 0.7;
  void validate() const;
};

// Exactly one of truth / pseudo is set. pseudo is the rectified teacher
// probability map [C, H, W, D] aligned to the student's view.
template <typename T>
struct Supervision {
  const LabelMask* truth = nullptr;
  const Tensor<T>* pseudo = nullptr;
};

// Voxel indices (flattened over H, W, D) of each set for class c.
// student: the student's probabilities on the same view, [C, H, W, D].
template <typename T>
std::vector<std::int64_t> anchor_lattice(const Tensor<T>& student, const Supervision<T>& sup, const Thresholds& th,
                                         int c);
template <typename T>
std::vector<std::int64_t> negative_lattice(const Supervision<T>& sup, const Thresholds& th, int c);
// Voxels contributing to the class-mean representation: labelled y = c,
// unlabelled argmax = c with max >= tau.
template <typename T>
std::vector<std::int64_t> positive_lattice(const Supervision<T>& sup, const Thresholds& th, int c);

// (r_m + xi * proto) / (1 + xi)
template <typename T>
Tensor<T> positive_centre(const Tensor<T>& r_m, const Tensor<T>& proto, T xi);

// Adds "cps.head3", "cps.head1" (projection of f4) and "cps.bridge" (prototype
// space F to projection space).
template <typename T>
void init(ParamSet<T>& ps, int F4, int F4p, int F, std::mt19937_64& rng);

// r = Conv1(Conv3(f4)), [F4', H, W, D].
template <typename T>
Var<T> project(const ParamSet<T>& ps, const Var<T>& f4);

// Bridged class prototype means, [C, F4'], from proto means [C, F].
template <typename T>
Tensor<T> bridge(const ParamSet<T>& ps, const Tensor<T>& proto_means);

template <typename T>
struct ClassSet {
  int c = 0;
  Var<T> anchors;    // [K, d]
  Var<T> negatives;  // [M, d]
  Tensor<T> centre;  // [d], constant
};

template <typename T>
struct ContrastiveBatch {
  std::vector<ClassSet<T>> classes;
  std::int64_t num_anchors() const {
    std::int64_t n = 0;
    for (const auto& s : classes) n += s.anchors.dim(0);
    return n;
  }
};

template <typename T>
struct SampleView {
  Var<T> r;                        // projected field [d, H, W, D]
  const Tensor<T>* student = nullptr;  // student probabilities [C, H, W, D]
  Supervision<T> sup;
};

struct Sampling {
  int max_anchors = 256;
  int max_negatives = 512;
};

// Pools the lattices of every sample in the batch per class, samples anchors
// and negatives uniformly without replacement and builds the centres.
// class_means holds the previous per-class means and is updated in place; a
// class with no support this batch reuses its previous mean or is skipped.
template <typename T>
ContrastiveBatch<T> build_batch(const std::vector<SampleView<T>>& views, const Tensor<T>& bridged, T xi,
                                std::vector<std::optional<Tensor<T>>>& class_means, const Thresholds& th,
                                const Sampling& sampling, std::mt19937_64& rng);

// Sum over anchors of -log(e^{cos(a,p)/t} / (e^{cos(a,p)/t} + sum_n e^{cos(a,n)/t})).
template <typename T>
Var<T> info_nce(const Var<T>& anchors, const Var<T>& negatives, const Tensor<T>& centre, T t);

enum class Reduction { Sum, MeanOverAnchors };

// Zero (no graph) when the batch has no usable class.
template <typename T>
Var<T> cps_loss(const ContrastiveBatch<T>& batch, T t, Reduction red);

}  // namespace semiseg::cps
