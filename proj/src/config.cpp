#include "semiseg/config.hpp"

#include <cctype>
#include <cstdlib>
#include <cstdio>
#include <fstream>

namespace semiseg {
namespace {

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  check_requested_dims(volume_size);
  need(num_classes >= 2, "num_classes must be >= 2");
  need(n_labelled >= 2 && n_unlabelled >= 2, "need at least 2 labelled and 2 unlabelled volumes");
  need(n_unlabelled >= n_labelled, "unlabelled set must be at least as large as the labelled set");
  need(n_val >= 0, "n_val must be >= 0");
  need(F4 > 0 && F4 < F3 && F3 < F, "widths must satisfy 0 < F4 < F3 < F");
  need(cps_dim > 0 && R > 0, "cps_dim and R must be positive");
  need(lr0 > 0 && momentum >= 0 && momentum < 1 && weight_decay >= 0 && poly_power > 0, "bad optimiser settings");
  need(max_iters > 0 && S >= 0, "max_iters must be positive and S non-negative");
  need(ema_decay >= 0 && ema_decay <= 1, "ema_decay must lie in [0, 1]");
  need(tau > 0 && tau <= 1 && tau_w >= 0 && tau_w < tau, "thresholds need 0 <= tau_w < tau <= 1");
  need(temperature > 0, "temperature must be positive");
  need(xi > 0 && xi <= 1, "xi must lie in (0, 1]");
  need(cps_weight >= 0 && max_anchors > 0 && max_negatives > 0, "bad CPS settings");
  for (int a = 0; a < 3; ++a) {
    need(crop_size[a] > 0 && crop_size[a] <= volume_size[a], "crop_size must fit inside volume_size");
    need(crop_size[a] % 4 == 0 && crop_size[a] >= 8, "crop_size extents must be >= 8 and divisible by 4");
    need(val_stride[a] > 0, "val_stride must be positive");
  }
  need(noise_sigma >= 0 && cutmix_prob >= 0 && cutmix_prob <= 1, "bad augmentation settings");
  need(cutmix_box_range[0] > 0 && cutmix_box_range[0] <= cutmix_box_range[1] && cutmix_box_range[1] <= 1,
       "cutmix_box_range must satisfy 0 < lo <= hi <= 1");
  need(log_every > 0 && probe_every >= 0 && checkpoint_every >= 0 && val_every >= 0, "bad logging intervals");
  need(probe_cases >= 0 && probe_cases <= n_unlabelled, "probe_cases exceeds the unlabelled set");
}

nlohmann::json TrainConfig::to_json() const {
  return {
      {"seed", seed},
      {"n_labelled", n_labelled},
      {"n_unlabelled", n_unlabelled},
      {"n_val", n_val},
      {"volume_size", volume_size},
      {"num_classes", num_classes},
      {"data_noise", data_noise},
      {"F4", F4},
      {"F3", F3},
      {"F", F},
      {"cps_dim", cps_dim},
      {"R", R},
      {"agg_mode", dim::to_string(agg_mode)},
      {"rect_mode", crln::to_string(rect_mode)},
      {"lr0", lr0},
      {"momentum", momentum},
      {"weight_decay", weight_decay},
      {"poly_power", poly_power},
      {"max_iters", max_iters},
      {"S", S},
      {"ema_decay", ema_decay},
      {"tau", tau},
      {"tau_w", tau_w},
      {"temperature", temperature},
      {"xi", xi},
      {"xi_uniform", xi_uniform},
      {"use_crln", use_crln},
      {"use_cps", use_cps},
      {"cps_weight", cps_weight},
      {"max_anchors", max_anchors},
      {"max_negatives", max_negatives},
      {"crop_size", crop_size},
      {"strong_aug", strong_aug},
      {"noise_sigma", noise_sigma},
      {"cutmix_prob", cutmix_prob},
      {"cutmix_box_range", cutmix_box_range},
      {"log_every", log_every},
      {"probe_every", probe_every},
      {"probe_cases", probe_cases},
      {"checkpoint_every", checkpoint_every},
      {"val_every", val_every},
      {"val_stride", val_stride},
  };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c;
  const nlohmann::json known = c.to_json();
  for (const auto& item : j.items())
    if (!known.contains(item.key())) throw ConfigError("unknown config key '" + item.key() + "'");
  read(j, "seed", c.seed);
  read(j, "n_labelled", c.n_labelled);
  read(j, "n_unlabelled", c.n_unlabelled);
  read(j, "n_val", c.n_val);
  read(j, "volume_size", c.volume_size);
  read(j, "num_classes", c.num_classes);
  read(j, "data_noise", c.data_noise);
  read(j, "F4", c.F4);
  read(j, "F3", c.F3);
  read(j, "F", c.F);
  read(j, "cps_dim", c.cps_dim);
  read(j, "R", c.R);
  std::string s;
  if (j.contains("agg_mode")) {
    read(j, "agg_mode", s);
    c.agg_mode = dim::parse_agg_mode(s);
  }
  if (j.contains("rect_mode")) {
    read(j, "rect_mode", s);
    c.rect_mode = crln::parse_rect_mode(s);
  }
  read(j, "lr0", c.lr0);
  read(j, "momentum", c.momentum);
  read(j, "weight_decay", c.weight_decay);
  read(j, "poly_power", c.poly_power);
  read(j, "max_iters", c.max_iters);
  read(j, "S", c.S);
  read(j, "ema_decay", c.ema_decay);
  read(j, "tau", c.tau);
  read(j, "tau_w", c.tau_w);
  read(j, "temperature", c.temperature);
  read(j, "xi", c.xi);
  read(j, "xi_uniform", c.xi_uniform);
  read(j, "use_crln", c.use_crln);
  read(j, "use_cps", c.use_cps);
  read(j, "cps_weight", c.cps_weight);
  read(j, "max_anchors", c.max_anchors);
  read(j, "max_negatives", c.max_negatives);
  read(j, "crop_size", c.crop_size);
  read(j, "strong_aug", c.strong_aug);
  read(j, "noise_sigma", c.noise_sigma);
  read(j, "cutmix_prob", c.cutmix_prob);
  read(j, "cutmix_box_range", c.cutmix_box_range);
  read(j, "log_every", c.log_every);
  read(j, "probe_every", c.probe_every);
  read(j, "probe_cases", c.probe_cases);
  read(j, "checkpoint_every", c.checkpoint_every);
  read(j, "val_every", c.val_every);
  read(j, "val_stride", c.val_stride);
  c.validate();
  return c;
}

std::string TrainConfig::hash() const {
  const std::string text = to_json().dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void apply_env_overrides(nlohmann::json& j) {
  const nlohmann::json defaults = TrainConfig{}.to_json();
  for (const auto& item : defaults.items()) {
    std::string var = "SEMISEG_";
    for (char ch : item.key()) var += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    const char* val = std::getenv(var.c_str());
    if (!val) continue;
    try {
      j[item.key()] = nlohmann::json::parse(val);
    } catch (const nlohmann::json::exception&) {
      j[item.key()] = std::string(val);
    }
  }
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  apply_env_overrides(j);
  return TrainConfig::from_json(j);
}

void apply_ablation(TrainConfig& cfg, const std::string& name) {
  if (name == "no-crln") cfg.use_crln = false;
  else if (name == "no-cps") cfg.use_cps = false;
  else if (name == "no-strongaug") cfg.strong_aug = false;
  else if (name == "agg-sum") cfg.agg_mode = dim::AggMode::Sum;
  else if (name == "agg-sa") cfg.agg_mode = dim::AggMode::Spatial;
  else if (name == "agg-sa-ci") cfg.agg_mode = dim::AggMode::SpatialIntegrate;
  else if (name == "rect-v1") cfg.rect_mode = crln::RectMode::V1Fixed;
  else if (name == "rect-v2") cfg.rect_mode = crln::RectMode::V2Concat;
  else throw ConfigError("unknown ablation '" + name + "'");
}

}  // namespace semiseg
