#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "semiseg/augment.hpp"
#include "semiseg/backbone.hpp"
#include "semiseg/config.hpp"
#include "semiseg/io.hpp"
#include "semiseg/optim.hpp"

namespace semiseg {

struct StepRecord {
  std::int64_t iter = 0;  // 1-based index of the completed step
  double lr = 0;
  double loss = 0;
  double ls = 0;
  double lm = 0;
  double lu = 0;
  double lcp = 0;
  double lmu = 0;
  double mu = 1;
  bool rectified = false;
  // Pseudo-labels of this step's unlabelled views.
  double reliable_before = 0;
  double reliable_after = 0;
  double pl_dice_before = 0;
  double pl_dice_after = 0;
  nlohmann::json to_json() const;
};

// Teacher pseudo-labels on whole unlabelled volumes with and without
// rectification at the current mu.
struct ProbeRecord {
  std::int64_t iter = 0;
  double mu = 1;
  double reliable_before = 0;
  double reliable_after = 0;
  double pl_dice_before = 0;
  double pl_dice_after = 0;
  nlohmann::json to_json() const;
};

// Per-iteration RNG; every random draw of step `iter` comes from it so a
// resumed run replays exactly.
std::mt19937_64 iteration_rng(std::uint64_t seed, std::int64_t iter);

// Two distinct indices in [0, n).
std::array<int, 2> draw_pair(int n, std::mt19937_64& rng);

class Trainer {
 public:
  // Volumes are z-score normalised on construction.
  Trainer(TrainConfig cfg, DatasetSplit data);

  const TrainConfig& config() const { return cfg_; }
  const DatasetSplit& data() const { return data_; }
  std::int64_t iteration() const { return iter_; }
  double mu() const;

  StepRecord step();
  ProbeRecord probe() const;
  // Mean foreground Dice of the teacher on the validation set.
  double validate() const;
  Tensor<float> predict(const Volume& v) const;
  Tensor<float> predict(const Volume& v, const Dims3& stride) const;

  // Runs to max_iters, writing JSON lines to `log`; checkpoints go to
  // ckpt_dir when given.
  void run(std::ostream& log, const std::optional<std::filesystem::path>& ckpt_dir = std::nullopt);

  io::Checkpoint checkpoint() const;
  void restore(const io::Checkpoint& ckpt);

  ParamSet<float>& student() { return student_; }
  ParamSet<float>& teacher() { return teacher_; }
  const ParamSet<float>& student() const { return student_; }
  const ParamSet<float>& teacher() const { return teacher_; }

  // Multiplies the main loss before backpropagation; tests use 0.
  void set_loss_scale(float s) { loss_scale_ = s; }

  backbone::Config backbone_config() const;
  dim::Config dim_config() const;

 private:
  Tensor<float> teacher_pseudo(const Volume& view, bool rectify, Tensor<float>* raw) const;

  TrainConfig cfg_;
  DatasetSplit data_;
  ParamSet<float> student_;
  ParamSet<float> teacher_;
  optim::Sgd<float> sgd_main_;
  optim::Sgd<float> sgd_mu_;
  std::vector<std::optional<Tensor<float>>> class_means_;
  std::int64_t iter_ = 0;
  float loss_scale_ = 1.0f;
};

}  // namespace semiseg
