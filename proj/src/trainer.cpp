#include "semiseg/trainer.hpp"

#include <cmath>
#include <fstream>

#include "semiseg/cps.hpp"
#include "semiseg/crln.hpp"
#include "semiseg/dim.hpp"
#include "semiseg/inference.hpp"
#include "semiseg/losses.hpp"
#include "semiseg/metrics.hpp"
#include "semiseg/ops.hpp"

namespace semiseg {
namespace {

constexpr std::uint32_t kInitStream = 0x1417u;
constexpr std::uint32_t kStepStream = 0x57e9u;

Var<float> as_input(const Volume& v) {
  return constant(v.data.reshaped({1, v.data.dim(0), v.data.dim(1), v.data.dim(2)}));
}

bool is_crln(const std::string& name) { return name.rfind("crln.", 0) == 0; }

bool teacher_owned(const std::string& name) {
  return name.rfind("backbone.", 0) == 0 || name.rfind("dim.", 0) == 0 || name.rfind("proto.", 0) == 0;
}

double pseudo_dice(const Tensor<float>& prob, const LabelMask& truth) {
  return metrics::mean_foreground_dice(prob, truth);
}

}  // namespace

nlohmann::json StepRecord::to_json() const {
  return {{"iter", iter},
          {"lr", lr},
          {"loss", loss},
          {"ls", ls},
          {"lm", lm},
          {"lu", lu},
          {"lcp", lcp},
          {"lmu", lmu},
          {"mu", mu},
          {"rectified", rectified},
          {"reliable_before", reliable_before},
          {"reliable_after", reliable_after},
          {"pl_dice_before", pl_dice_before},
          {"pl_dice_after", pl_dice_after}};
}

nlohmann::json ProbeRecord::to_json() const {
  return {{"probe", iter},
          {"mu", mu},
          {"reliable_before", reliable_before},
          {"reliable_after", reliable_after},
          {"pl_dice_before", pl_dice_before},
          {"pl_dice_after", pl_dice_after}};
}

std::mt19937_64 iteration_rng(std::uint64_t seed, std::int64_t iter) {
  const auto it = static_cast<std::uint64_t>(iter);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(it), static_cast<std::uint32_t>(it >> 32), kStepStream};
  return std::mt19937_64(seq);
}

std::array<int, 2> draw_pair(int n, std::mt19937_64& rng) {
  if (n < 2) throw ConfigError("need at least two volumes to draw a pair");
  std::uniform_int_distribution<int> first(0, n - 1), second(0, n - 2);
  const int a = first(rng);
  int b = second(rng);
  if (b >= a) ++b;
  return {a, b};
}

backbone::Config Trainer::backbone_config() const {
  return {1, cfg_.num_classes, cfg_.F4, cfg_.F3, cfg_.F};
}

dim::Config Trainer::dim_config() const { return {cfg_.num_classes, cfg_.R, cfg_.F, cfg_.F3, cfg_.agg_mode}; }

Trainer::Trainer(TrainConfig cfg, DatasetSplit data)
    : cfg_(std::move(cfg)), data_(std::move(data)), sgd_main_(cfg_.momentum, cfg_.weight_decay),
      sgd_mu_(cfg_.momentum, 0.0) {
  cfg_.validate();
  data_.validate();
  if (data_.labelled.size() < 2 || data_.unlabelled.size() < 2)
    throw ConfigError("training needs at least 2 labelled and 2 unlabelled volumes");
  auto check = [&](const Volume& v) {
    v.validate();
    for (int a = 0; a < 3; ++a)
      if (cfg_.crop_size[a] > v.dims()[a])
        throw ConfigError("crop_size exceeds the extent of volume '" + v.id + "'");
  };
  for (auto& c : data_.labelled) {
    check(c.image);
    if (c.label.num_classes != cfg_.num_classes) throw DataError("label class count differs from num_classes");
    c.image = normalize_intensity(c.image);
  }
  for (auto& v : data_.unlabelled) {
    check(v);
    v = normalize_intensity(v);
  }
  for (auto& c : data_.val) c.image = normalize_intensity(c.image);

  std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32), kInitStream};
  std::mt19937_64 rng(seq);
  backbone::init(student_, backbone_config(), rng);
  if (cfg_.use_crln) {
    dim::init(student_, dim_config(), rng);
    crln::init(student_, cfg_.num_classes, cfg_.rect_mode, rng);
  }
  if (cfg_.use_cps) cps::init(student_, cfg_.F4, cfg_.cps_dim, cfg_.F, rng);

  for (const auto& [name, v] : student_.entries())
    if (teacher_owned(name)) teacher_.add(name, v.value(), false);
  class_means_.assign(static_cast<std::size_t>(cfg_.num_classes), std::nullopt);
}

double Trainer::mu() const {
  if (!cfg_.use_crln) return 1.0;
  return crln::mu(student_).value()[0];
}

Tensor<float> Trainer::teacher_pseudo(const Volume& view, bool rectify, Tensor<float>* raw) const {
  const auto pyr = backbone::forward(teacher_, backbone_config(), as_input(view));
  Tensor<float> prob = kernels::softmax_channels(pyr.logits.value());
  if (raw) *raw = prob;
  if (!rectify) return prob;
  const auto map = dim::relationship_map(teacher_, dim_config(), pyr);
  const ParamSet<float> rect = student_.copy(false, "crln.");
  return crln::rectify_variant(cfg_.rect_mode, rect, constant(prob), constant(map.value()),
                               static_cast<float>(cfg_.tau))
      .value();
}

StepRecord Trainer::step() {
  if (iter_ >= cfg_.max_iters) throw ContractViolation("training already reached max_iters");
  auto rng = iteration_rng(cfg_.seed, iter_);
  const auto bcfg = backbone_config();
  const auto dcfg = dim_config();
  const float tau = static_cast<float>(cfg_.tau);

  StepRecord rec;
  rec.iter = iter_ + 1;
  rec.lr = optim::poly_lr(iter_, cfg_.max_iters, cfg_.lr0, cfg_.poly_power);
  rec.rectified = cfg_.use_crln && iter_ >= cfg_.S;

  // Batch: 2 labelled + 2 unlabelled.
  const auto li = draw_pair(static_cast<int>(data_.labelled.size()), rng);
  const auto ui = draw_pair(static_cast<int>(data_.unlabelled.size()), rng);

  std::array<Volume, 2> lab_view;
  std::array<LabelMask, 2> lab_mask;
  for (int k = 0; k < 2; ++k) {
    const auto& c = data_.labelled[li[k]];
    const auto g = augment::sample_geometry(c.image.dims(), cfg_.crop_size, rng);
    lab_view[k] = augment::apply_geometry(c.image, g);
    lab_mask[k] = augment::apply_geometry(c.label, g);
  }

  std::array<augment::AugRecord, 2> weak_rec, strong_rec;
  std::array<Volume, 2> weak, strong;
  for (int k = 0; k < 2; ++k) {
    weak_rec[k] = augment::sample_geometry(data_.unlabelled[ui[k]].dims(), cfg_.crop_size, rng);
    weak[k] = augment::apply_geometry(data_.unlabelled[ui[k]], weak_rec[k]);
  }
  augment::StrongOptions sopt{cfg_.noise_sigma, cfg_.cutmix_prob, cfg_.cutmix_box_range};
  for (int k = 0; k < 2; ++k) {
    if (cfg_.strong_aug) {
      auto [v, r] = augment::strong_augment(data_.unlabelled[ui[k]], weak[1 - k], weak_rec[k], 1 - k, rng, sopt);
      strong[k] = std::move(v);
      strong_rec[k] = r;
    } else {
      strong[k] = weak[k];
      strong_rec[k] = weak_rec[k];
    }
  }

  // Teacher pseudo-labels, rectified after S iterations, aligned to the strong views.
  std::array<Tensor<float>, 2> raw, rect;
  for (int k = 0; k < 2; ++k) rect[k] = teacher_pseudo(weak[k], rec.rectified, &raw[k]);
  std::array<Tensor<float>, 2> target, target_raw;
  for (int k = 0; k < 2; ++k) {
    target[k] = augment::align_teacher_prediction(rect[k], weak_rec[k], strong_rec[k], &rect[1 - k]);
    target_raw[k] = rec.rectified
                        ? augment::align_teacher_prediction(raw[k], weak_rec[k], strong_rec[k], &raw[1 - k])
                        : target[k];
  }
  // Diagnostics against the generator's masks of the unlabelled volumes.
  if (data_.unlabelled_truth.size() == data_.unlabelled.size()) {
    for (int k = 0; k < 2; ++k) {
      const LabelMask tw = augment::apply_geometry(data_.unlabelled_truth[ui[k]], weak_rec[k]);
      const LabelMask tp = augment::apply_geometry(data_.unlabelled_truth[ui[1 - k]], weak_rec[1 - k]);
      const LabelMask ts = augment::align_label(tw, weak_rec[k], strong_rec[k], &tp);
      rec.pl_dice_before += 0.5 * pseudo_dice(target_raw[k], ts);
      rec.pl_dice_after += 0.5 * pseudo_dice(target[k], ts);
    }
  }
  for (int k = 0; k < 2; ++k) {
    rec.reliable_before += 0.5 * losses::reliable_fraction(target_raw[k], tau);
    rec.reliable_after += 0.5 * losses::reliable_fraction(target[k], tau);
  }

  // Student forward.
  student_.zero_grad();
  std::vector<Var<float>> ls_terms, lm_terms, lu_terms;
  std::array<backbone::FeaturePyramid<float>, 2> lab_pyr, un_pyr;
  std::array<Var<float>, 2> lab_prob, lab_map, un_prob;
  std::array<Tensor<float>, 2> lab_onehot;
  for (int k = 0; k < 2; ++k) {
    lab_onehot[k] = lab_mask[k].onehot<float>();
    lab_pyr[k] = backbone::forward(student_, bcfg, as_input(lab_view[k]));
    lab_prob[k] = ops::softmax_channels(lab_pyr[k].logits);
    ls_terms.push_back(losses::supervised(lab_prob[k], lab_onehot[k]));
    if (cfg_.use_crln) {
      lab_map[k] = dim::relationship_map(student_, dcfg, lab_pyr[k]);
      lm_terms.push_back(losses::supervised_from_scores(lab_map[k], lab_onehot[k]));
    }
  }
  for (int k = 0; k < 2; ++k) {
    un_pyr[k] = backbone::forward(student_, bcfg, as_input(strong[k]));
    un_prob[k] = ops::softmax_channels(un_pyr[k].logits);
    lu_terms.push_back(losses::unsupervised(un_prob[k], target[k], tau));
  }
  std::vector<Var<float>> terms = {ops::weighted_sum(ls_terms, {0.5f, 0.5f}), ops::weighted_sum(lu_terms, {0.5f, 0.5f})};
  std::vector<float> weights = {1.0f, 1.0f};
  if (cfg_.use_crln) {
    terms.push_back(ops::weighted_sum(lm_terms, {0.5f, 0.5f}));
    weights.push_back(1.0f);
  }

  Var<float> lcp;
  if (cfg_.use_cps && cfg_.cps_weight > 0) {
    float xi = static_cast<float>(cfg_.xi);
    if (cfg_.xi_uniform) {
      // U(0, 1]
      xi = static_cast<float>(1.0 - std::uniform_real_distribution<double>(0.0, 1.0)(rng));
    }
    Tensor<float> bridged({cfg_.num_classes, cfg_.cps_dim});
    if (cfg_.use_crln) bridged = cps::bridge(student_, dim::prototype_means(student_, dcfg).value());
    else xi = 0.0f;
    std::vector<cps::SampleView<float>> views;
    for (int k = 0; k < 2; ++k)
      views.push_back({cps::project(student_, lab_pyr[k].f4), &lab_prob[k].value(), {&lab_mask[k], nullptr}});
    for (int k = 0; k < 2; ++k)
      views.push_back({cps::project(student_, un_pyr[k].f4), &un_prob[k].value(), {nullptr, &target[k]}});
    const cps::Thresholds th{cfg_.tau, cfg_.tau_w};
    const auto batch =
        cps::build_batch(views, bridged, xi, class_means_, th, {cfg_.max_anchors, cfg_.max_negatives}, rng);
    lcp = cps::cps_loss(batch, static_cast<float>(cfg_.temperature), cps::Reduction::MeanOverAnchors);
    terms.push_back(lcp);
    weights.push_back(static_cast<float>(cfg_.cps_weight));
  }

  auto total = ops::weighted_sum(terms, weights);
  rec.ls = terms[0].value()[0];
  rec.lu = terms[1].value()[0];
  rec.lm = cfg_.use_crln ? terms[2].value()[0] : 0.0;
  rec.lcp = lcp.defined() ? lcp.value()[0] : 0.0;
  rec.loss = total.value()[0];
  if (!std::isfinite(rec.loss)) throw NumericError("non-finite loss at iteration " + std::to_string(rec.iter));

  if (loss_scale_ != 1.0f) total = ops::scale(total, loss_scale_);
  backward(total);
  sgd_main_.step(student_, rec.lr, [](const std::string& n) { return !is_crln(n); });
  student_.zero_grad();

  // Correction parameters only, on detached labelled predictions and maps.
  if (cfg_.use_crln && cfg_.rect_mode != crln::RectMode::V1Fixed) {
    std::vector<Var<float>> mterms;
    for (int k = 0; k < 2; ++k)
      mterms.push_back(crln::mu_loss(cfg_.rect_mode, student_, detach(lab_prob[k]), detach(lab_map[k]), &lab_mask[k],
                                     tau));
    auto ml = ops::weighted_sum(mterms, {0.5f, 0.5f});
    rec.lmu = ml.value()[0];
    if (!std::isfinite(rec.lmu)) throw NumericError("non-finite mu loss at iteration " + std::to_string(rec.iter));
    if (loss_scale_ != 1.0f) ml = ops::scale(ml, loss_scale_);
    backward(ml);
    sgd_mu_.step(student_, rec.lr, is_crln);
    student_.zero_grad();
  }

  optim::ema_update(teacher_, student_, cfg_.ema_decay);
  rec.mu = mu();
  ++iter_;
  return rec;
}

ProbeRecord Trainer::probe() const {
  ProbeRecord p;
  p.iter = iter_;
  p.mu = mu();
  const int n = std::min<int>(cfg_.probe_cases, static_cast<int>(data_.unlabelled.size()));
  if (n == 0) return p;
  const bool have_truth = data_.unlabelled_truth.size() == data_.unlabelled.size();
  const float tau = static_cast<float>(cfg_.tau);
  for (int i = 0; i < n; ++i) {
    Tensor<float> raw;
    const Tensor<float> after = teacher_pseudo(data_.unlabelled[i], cfg_.use_crln, &raw);
    p.reliable_before += losses::reliable_fraction(raw, tau) / n;
    p.reliable_after += losses::reliable_fraction(after, tau) / n;
    if (have_truth) {
      p.pl_dice_before += pseudo_dice(raw, data_.unlabelled_truth[i]) / n;
      p.pl_dice_after += pseudo_dice(after, data_.unlabelled_truth[i]) / n;
    }
  }
  return p;
}

Tensor<float> Trainer::predict(const Volume& v) const { return predict(v, cfg_.val_stride); }

Tensor<float> Trainer::predict(const Volume& v, const Dims3& stride) const {
  const auto bcfg = backbone_config();
  auto model = [&](const Tensor<float>& patch) {
    return kernels::softmax_channels(backbone::forward(teacher_, bcfg, constant(patch)).logits.value());
  };
  return inference::sliding_window_predict(model, v, cfg_.crop_size, stride);
}

double Trainer::validate() const {
  if (data_.val.empty()) return 0.0;
  double d = 0;
  for (const auto& c : data_.val) d += metrics::mean_foreground_dice(predict(c.image), c.label);
  return d / static_cast<double>(data_.val.size());
}

void Trainer::run(std::ostream& log, const std::optional<std::filesystem::path>& ckpt_dir) {
  auto emit = [&](const nlohmann::json& j) { log << j.dump() << '\n' << std::flush; };
  while (iter_ < cfg_.max_iters) {
    const StepRecord r = step();
    if (r.iter == 1 || r.iter % cfg_.log_every == 0 || r.iter == cfg_.max_iters) emit(r.to_json());
    if (cfg_.probe_every > 0 && r.iter % cfg_.probe_every == 0) emit(probe().to_json());
    if (cfg_.val_every > 0 && r.iter % cfg_.val_every == 0) emit({{"val", r.iter}, {"dice", validate()}});
    if (ckpt_dir && cfg_.checkpoint_every > 0 && r.iter % cfg_.checkpoint_every == 0)
      io::save_checkpoint(checkpoint(), *ckpt_dir / ("iter_" + std::to_string(r.iter) + ".ckpt"));
  }
  emit({{"val", iter_}, {"dice", validate()}, {"final", true}});
  if (ckpt_dir) io::save_checkpoint(checkpoint(), *ckpt_dir / "final.ckpt");
}

io::Checkpoint Trainer::checkpoint() const {
  io::Checkpoint ck;
  ck.manifest = {{"iteration", iter_},   {"config", cfg_.to_json()}, {"config_hash", cfg_.hash()},
                 {"C", cfg_.num_classes}, {"R", cfg_.R},              {"F", cfg_.F}};
  for (const auto& [name, v] : student_.entries()) ck.add("student/" + name, v.value());
  for (const auto& [name, v] : teacher_.entries()) ck.add("teacher/" + name, v.value());
  for (const auto& [name, v] : sgd_main_.velocity()) ck.add("momentum/" + name, v);
  for (const auto& [name, v] : sgd_mu_.velocity()) ck.add("momentum_mu/" + name, v);
  for (std::size_t c = 0; c < class_means_.size(); ++c)
    if (class_means_[c]) ck.add("class_mean/" + std::to_string(c), *class_means_[c]);
  // Velocity maps are unordered; sort for a stable payload.
  std::stable_sort(ck.arrays.begin(), ck.arrays.end(), [](const auto& a, const auto& b) {
    auto rank = [](const std::string& s) {
      if (s.rfind("student/", 0) == 0) return 0;
      if (s.rfind("teacher/", 0) == 0) return 1;
      return 2;
    };
    const int ra = rank(a.first), rb = rank(b.first);
    return ra != rb ? ra < rb : (ra == 2 && a.first < b.first);
  });
  return ck;
}

void Trainer::restore(const io::Checkpoint& ck) {
  if (ck.manifest.value("config_hash", "") != cfg_.hash())
    throw DataError("checkpoint was written with a different configuration");
  auto load = [&](ParamSet<float>& ps, const std::string& prefix) {
    for (auto& [name, v] : ps.entries()) {
      const Tensor<float>& t = ck.at(prefix + name);
      if (t.shape() != v.shape()) throw DataError("checkpoint array '" + prefix + name + "' has the wrong shape");
      v.mutable_value() = t;
    }
  };
  load(student_, "student/");
  load(teacher_, "teacher/");
  sgd_main_.velocity().clear();
  sgd_mu_.velocity().clear();
  class_means_.assign(static_cast<std::size_t>(cfg_.num_classes), std::nullopt);
  for (const auto& [name, t] : ck.arrays) {
    if (name.rfind("momentum/", 0) == 0) sgd_main_.velocity().emplace(name.substr(9), t);
    else if (name.rfind("momentum_mu/", 0) == 0) sgd_mu_.velocity().emplace(name.substr(12), t);
    else if (name.rfind("class_mean/", 0) == 0) class_means_.at(std::stoul(name.substr(11))) = t;
  }
  iter_ = ck.manifest.at("iteration").get<std::int64_t>();
}

}  // namespace semiseg
