#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "semiseg/io.hpp"
#include "semiseg/metrics.hpp"
#include "semiseg/synthetic.hpp"
#include "semiseg/trainer.hpp"

#ifndef SEMISEG_CODE_VERSION
#define SEMISEG_CODE_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace semiseg;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

// Exclusive ownership of a run directory for the lifetime of the process.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw ConfigError("output directory '" + dir.string() + "' is locked by another run");
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

DatasetSplit make_data(const TrainConfig& cfg) {
  synthetic::GeneratorOptions opt;
  opt.size = cfg.volume_size;
  opt.num_classes = cfg.num_classes;
  opt.noise_sigma = cfg.data_noise;
  return synthetic::generate_dataset(cfg.seed, cfg.n_labelled, cfg.n_unlabelled, cfg.n_val, opt);
}

TrainConfig config_of(const io::Checkpoint& ck) {
  if (!ck.manifest.contains("config")) throw DataError("checkpoint manifest lacks the training configuration");
  return TrainConfig::from_json(ck.manifest.at("config"));
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << text;
}

// Cases in a directory: every NAME.f32raw with a matching NAME.label.f32raw.
std::vector<LabelledCase> load_cases(const fs::path& dir, int num_classes) {
  if (!fs::is_directory(dir)) throw DataError("data directory '" + dir.string() + "' does not exist");
  std::vector<fs::path> images;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto p = e.path();
    if (p.extension() != ".f32raw") continue;
    const auto stem = p.stem().string();
    if (stem.size() > 6 && stem.substr(stem.size() - 6) == ".label") continue;
    images.push_back(p);
  }
  std::sort(images.begin(), images.end());
  std::vector<LabelledCase> out;
  for (const auto& p : images) {
    fs::path label = p.parent_path() / (p.stem().string() + ".label.f32raw");
    if (!fs::exists(label)) throw DataError("no label file for '" + p.string() + "'");
    LabelledCase c{io::load_volume(p), io::load_label(label, num_classes)};
    if (c.image.dims() != c.label.dims()) throw DataError("image and label sizes differ for '" + p.string() + "'");
    out.push_back(std::move(c));
  }
  if (out.empty()) throw DataError("no cases found in '" + dir.string() + "'");
  return out;
}

std::string svg_report(const std::vector<ProbeRecord>& recs) {
  const double W = 640, H = 240, pad = 40;
  std::int64_t max_iter = 1;
  for (const auto& r : recs) max_iter = std::max(max_iter, r.iter);
  auto px = [&](std::int64_t it) { return pad + (W - 2 * pad) * static_cast<double>(it) / static_cast<double>(max_iter); };
  auto py = [&](double v, double top) { return top + (H / 2 - pad) * (1.0 - v); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H + 20 << "\">\n";
  struct Series {
    const char* name;
    double top;
    bool after;
    bool dice;
    const char* colour;
  };
  const Series series[] = {{"reliable (before)", 10, false, false, "#888"},
                           {"reliable (after)", 10, true, false, "#c22"},
                           {"pseudo-label Dice (before)", H / 2 + 10, false, true, "#888"},
                           {"pseudo-label Dice (after)", H / 2 + 10, true, true, "#22c"}};
  for (const auto& se : series) {
    s << "<polyline fill=\"none\" stroke=\"" << se.colour << "\" points=\"";
    for (const auto& r : recs) {
      const double v = se.dice ? (se.after ? r.pl_dice_after : r.pl_dice_before)
                               : (se.after ? r.reliable_after : r.reliable_before);
      s << px(r.iter) << "," << py(v, se.top) << " ";
    }
    s << "\"/>\n<text x=\"" << pad << "\" y=\"" << se.top + (se.after ? 24 : 12) << "\" font-size=\"10\" fill=\""
      << se.colour << "\">" << se.name << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

int cmd_train(const std::string& config_path, const fs::path& out, std::optional<std::uint64_t> seed,
              const std::vector<std::string>& ablations, std::optional<int> r, std::optional<double> xi,
              std::optional<std::int64_t> s_iters, std::optional<double> tau, std::optional<double> tau_w,
              const std::string& resume) {
  std::ifstream in(config_path);
  if (!in) throw ConfigError("cannot open config '" + config_path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + config_path + "' is not valid JSON: " + e.what());
  }
  apply_env_overrides(j);
  if (seed) j["seed"] = *seed;
  if (r) j["R"] = *r;
  if (xi) j["xi"] = *xi;
  if (s_iters) j["S"] = *s_iters;
  if (tau) j["tau"] = *tau;
  if (tau_w) j["tau_w"] = *tau_w;
  TrainConfig cfg = TrainConfig::from_json(j);
  for (const auto& a : ablations) apply_ablation(cfg, a);
  cfg.validate();

  DirLock lock(out);
  const fs::path ckpt_dir = out / "checkpoints";
  fs::create_directories(ckpt_dir);
  write_text(out / "config.json", cfg.to_json().dump(2) + "\n");
  const nlohmann::json run = {{"seed", cfg.seed},
                              {"config_hash", cfg.hash()},
                              {"code_version", SEMISEG_CODE_VERSION},
                              {"layout",
                               {{"config", "config.json"},
                                {"metrics", "metrics.jsonl"},
                                {"checkpoints", "checkpoints/"},
                                {"final_checkpoint", "checkpoints/final.ckpt"}}}};
  write_text(out / "run.json", run.dump(2) + "\n");

  Trainer trainer(cfg, make_data(cfg));
  std::ios::openmode mode = std::ios::trunc;
  if (!resume.empty()) {
    trainer.restore(io::load_checkpoint(resume));
    mode = std::ios::app;
  }
  std::ofstream log(out / "metrics.jsonl", mode);
  if (!log) throw DataError("cannot write metrics log in '" + out.string() + "'");
  trainer.run(log, ckpt_dir);
  std::cout << "trained " << cfg.max_iters << " iterations; final checkpoint " << (ckpt_dir / "final.ckpt").string()
            << "\n";
  return kOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::vector<std::int64_t>& stride,
             const std::string& out_path, bool physical) {
  const auto ck = io::load_checkpoint(ckpt_path);
  TrainConfig cfg = config_of(ck);
  if (!stride.empty()) {
    if (stride.size() != 3) throw ConfigError("--stride needs three values");
    cfg.val_stride = {stride[0], stride[1], stride[2]};
  }
  DatasetSplit data = make_data(cfg);
  Trainer trainer(config_of(ck), data);
  trainer.restore(ck);
  std::vector<LabelledCase> cases = data_dir.empty() ? data.val : load_cases(data_dir, cfg.num_classes);

  std::ostringstream table;
  double sum_dice = 0, sum_jac = 0, sum_asd = 0, sum_hd = 0;
  int n_surf = 0;
  for (auto& c : cases) {
    const Volume v = normalize_intensity(c.image);
    const Volume vs = [&] {
      Volume w = v;
      if (!physical) w.spacing = {1, 1, 1};
      return w;
    }();
    const Tensor<float> prob = trainer.predict(v, cfg.val_stride);
    const auto s = metrics::score_case(c.image.id, prob, c.label, vs.spacing);
    nlohmann::json rec = {{"id", s.id}, {"dice", s.dice}, {"jaccard", s.jaccard}};
    rec["asd"] = s.asd ? nlohmann::json(*s.asd) : nlohmann::json(nullptr);
    rec["hd95"] = s.hd95 ? nlohmann::json(*s.hd95) : nlohmann::json(nullptr);
    if (!s.asd) std::cerr << "warning: surface distances undefined for '" << s.id << "' (empty mask)\n";
    table << rec.dump() << "\n";
    sum_dice += s.dice;
    sum_jac += s.jaccard;
    if (s.asd && s.hd95) {
      sum_asd += *s.asd;
      sum_hd += *s.hd95;
      ++n_surf;
    }
  }
  const double n = static_cast<double>(cases.size());
  nlohmann::json summary = {{"mean", true}, {"cases", cases.size()}, {"dice", sum_dice / n}, {"jaccard", sum_jac / n}};
  summary["asd"] = n_surf ? nlohmann::json(sum_asd / n_surf) : nlohmann::json(nullptr);
  summary["hd95"] = n_surf ? nlohmann::json(sum_hd / n_surf) : nlohmann::json(nullptr);
  table << summary.dump() << "\n";
  std::cout << table.str();
  if (!out_path.empty()) write_text(out_path, table.str());
  return kOk;
}

int cmd_rectify_report(std::vector<std::string> ckpts, const std::string& out_path, const std::string& plot_path) {
  std::vector<std::pair<std::int64_t, io::Checkpoint>> loaded;
  for (const auto& p : ckpts) {
    auto ck = io::load_checkpoint(p);
    const auto it = ck.manifest.value("iteration", std::int64_t{0});
    loaded.emplace_back(it, std::move(ck));
  }
  std::stable_sort(loaded.begin(), loaded.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<ProbeRecord> recs;
  std::ostringstream lines;
  std::optional<Trainer> trainer;
  std::string hash;
  for (auto& [it, ck] : loaded) {
    const TrainConfig cfg = config_of(ck);
    if (!trainer || cfg.hash() != hash) {
      trainer.emplace(cfg, make_data(cfg));
      hash = cfg.hash();
    }
    trainer->restore(ck);
    recs.push_back(trainer->probe());
    lines << recs.back().to_json().dump() << "\n";
  }
  std::cout << lines.str();
  if (!out_path.empty()) write_text(out_path, lines.str());
  if (!plot_path.empty()) write_text(plot_path, svg_report(recs));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised volumetric segmentation with prototype rectification"};
  app.require_subcommand(1);

  std::string config_path, out_dir, resume;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> ablations;
  std::optional<int> r;
  std::optional<double> xi, tau, tau_w;
  std::optional<std::int64_t> s_iters;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config_path, "JSON configuration file")->required();
  train->add_option("--out", out_dir, "Run directory")->required();
  train->add_option("--seed", seed, "Random seed");
  train->add_option("--ablate", ablations, "no-crln, no-cps, no-strongaug, agg-sum, agg-sa, agg-sa-ci, rect-v1, rect-v2");
  train->add_option("--r", r, "Prototypes per class");
  train->add_option("--xi", xi, "Positive centre mixing coefficient");
  train->add_option("--s-iters", s_iters, "Iteration at which rectification starts");
  train->add_option("--tau", tau, "Confidence threshold");
  train->add_option("--tau-w", tau_w, "Weak confidence threshold for contrastive sets");
  train->add_option("--resume", resume, "Checkpoint to resume from");

  std::string ckpt, data_dir, eval_out;
  std::vector<std::int64_t> stride;
  bool physical = false;
  auto* eval = app.add_subcommand("eval", "Sliding-window evaluation of a checkpoint");
  eval->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Directory of NAME.f32raw / NAME.label.f32raw pairs (default: synthetic val)");
  eval->add_option("--stride", stride, "Window strides, three values")->expected(3);
  eval->add_option("--out", eval_out, "Also write the records to this file");
  eval->add_flag("--physical", physical, "Report surface distances in spacing units instead of voxels");

  std::vector<std::string> report_ckpts;
  std::string report_out, plot;
  auto* report = app.add_subcommand("rectify-report", "Pseudo-label quality before and after rectification");
  report->add_option("--checkpoints", report_ckpts, "Checkpoint files")->required();
  report->add_option("--out", report_out, "Also write the records to this file");
  report->add_option("--plot", plot, "Write an SVG plot");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return kConfig;
  }

  try {
    if (*train)
      return cmd_train(config_path, out_dir, seed, ablations, r, xi, s_iters, tau, tau_w, resume);
    if (*eval) return cmd_eval(ckpt, data_dir, stride, eval_out, physical);
    if (*report) return cmd_rectify_report(report_ckpts, report_out, plot);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
