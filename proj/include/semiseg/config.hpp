#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "semiseg/crln.hpp"
#include "semiseg/dim.hpp"
#include "semiseg/volume.hpp"

namespace semiseg {

// Flat training configuration. Every key can be set from a JSON file or from
// an environment variable SEMISEG_<KEY in upper case>.
struct TrainConfig {
  // data
  std::uint64_t seed = 0;
  int n_labelled = 8;
  int n_unlabelled = 72;
  int n_val = 8;
  Dims3 volume_size{32, 32, 32};
  int num_classes = 2;
  double data_noise = 0.3;

  // model
  int F4 = 8;
  int F3 = 16;
  int F = 32;
  int cps_dim = 8;
  int R = 16;
  dim::AggMode agg_mode = dim::AggMode::Full;
  crln::RectMode rect_mode = crln::RectMode::V3Additive;

  // optimisation
  double lr0 = 2.5e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double poly_power = 0.9;
  std::int64_t max_iters = 2000;
  std::int64_t S = 800;
  double ema_decay = 0.99;

  // semi-supervision
  double tau = 0.9;
  double tau_w = 0.7;
  double temperature = 0.5;
  double xi = 0.6;
  bool xi_uniform = false;
  bool use_crln = true;
  bool use_cps = true;
  double cps_weight = 1.0;
  int max_anchors = 256;
  int max_negatives = 512;

  // augmentation
  Dims3 crop_size{24, 24, 24};
  bool strong_aug = true;
  double noise_sigma = 0.1;
  double cutmix_prob = 1.0;
  std::array<double, 2> cutmix_box_range{0.3, 0.6};

  // bookkeeping
  std::int64_t log_every = 10;
  std::int64_t probe_every = 100;
  int probe_cases = 4;
  std::int64_t checkpoint_every = 500;
  std::int64_t val_every = 0;
  Dims3 val_stride{8, 8, 8};

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  // Hex FNV-1a digest of the canonical JSON dump.
  std::string hash() const;
};

TrainConfig load_config(const std::filesystem::path& path);
// Applies SEMISEG_* environment variables; values are parsed as JSON, falling
// back to a plain string.
void apply_env_overrides(nlohmann::json& j);

// Ablation names accepted by the command line: no-crln, no-cps, no-strongaug,
// agg-sum, agg-sa, agg-sa-ci, rect-v1, rect-v2.
void apply_ablation(TrainConfig& cfg, const std::string& name);

}  // namespace semiseg
