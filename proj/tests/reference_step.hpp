#pragma once

// Plain mean-teacher step: 2 labelled + 2 unlabelled crops with crop/flip
// augmentation only, supervised loss on the labelled pair, thresholded
// pseudo-label loss on the unlabelled pair, SGD with momentum, then EMA.
// It shares only the network, loss primitives and augmentation helpers with
// the library; the step protocol, optimiser and EMA are written out here.

#include <map>
#include <random>
#include <string>

#include "semiseg/augment.hpp"
#include "semiseg/backbone.hpp"
#include "semiseg/config.hpp"
#include "semiseg/losses.hpp"
#include "semiseg/ops.hpp"
#include "semiseg/optim.hpp"

namespace oracle {

struct MeanTeacher {
  semiseg::TrainConfig cfg;
  semiseg::DatasetSplit data;
  semiseg::ParamSet<float> student;  // backbone.* only
  semiseg::ParamSet<float> teacher;
  std::map<std::string, semiseg::Tensor<float>> velocity;
  std::int64_t iter = 0;
  double last_loss = 0;

  // Per-step stream: seed_seq over (seed lo, seed hi, iter lo, iter hi, 0x57e9).
  static std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t iter) {
    const auto it = static_cast<std::uint64_t>(iter);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(it), static_cast<std::uint32_t>(it >> 32), 0x57e9u};
    return std::mt19937_64(seq);
  }

  static std::array<int, 2> pair(int n, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> first(0, n - 1), second(0, n - 2);
    const int a = first(rng);
    int b = second(rng);
    if (b >= a) ++b;
    return {a, b};
  }

  static semiseg::Var<float> input(const semiseg::Volume& v) {
    return semiseg::constant(v.data.reshaped({1, v.data.dim(0), v.data.dim(1), v.data.dim(2)}));
  }

  void step() {
    using namespace semiseg;
    auto rng = step_rng(cfg.seed, iter);
    const backbone::Config bc{1, cfg.num_classes, cfg.F4, cfg.F3, cfg.F};
    const float tau = static_cast<float>(cfg.tau);
    const double lr = cfg.lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(cfg.max_iters),
                                         cfg.poly_power);

    const auto li = pair(static_cast<int>(data.labelled.size()), rng);
    const auto ui = pair(static_cast<int>(data.unlabelled.size()), rng);
    std::array<Volume, 2> lv, uv;
    std::array<LabelMask, 2> lm;
    for (int k = 0; k < 2; ++k) {
      const auto& c = data.labelled[li[k]];
      const auto g = augment::sample_geometry(c.image.dims(), cfg.crop_size, rng);
      lv[k] = augment::apply_geometry(c.image, g);
      lm[k] = augment::apply_geometry(c.label, g);
    }
    for (int k = 0; k < 2; ++k) {
      const auto g = augment::sample_geometry(data.unlabelled[ui[k]].dims(), cfg.crop_size, rng);
      uv[k] = augment::apply_geometry(data.unlabelled[ui[k]], g);
    }

    std::array<Tensor<float>, 2> target;
    for (int k = 0; k < 2; ++k)
      target[k] = kernels::softmax_channels(backbone::forward(teacher, bc, input(uv[k])).logits.value());

    student.zero_grad();
    std::vector<Var<float>> ls, lu;
    for (int k = 0; k < 2; ++k)
      ls.push_back(losses::supervised(ops::softmax_channels(backbone::forward(student, bc, input(lv[k])).logits),
                                      lm[k].onehot<float>()));
    for (int k = 0; k < 2; ++k)
      lu.push_back(losses::unsupervised(ops::softmax_channels(backbone::forward(student, bc, input(uv[k])).logits),
                                        target[k], tau));
    auto loss = ops::weighted_sum<float>({ops::weighted_sum(ls, {0.5f, 0.5f}), ops::weighted_sum(lu, {0.5f, 0.5f})},
                                         {1.0f, 1.0f});
    last_loss = loss.value()[0];
    backward(loss);

    const float m = static_cast<float>(cfg.momentum), wd = static_cast<float>(cfg.weight_decay),
                eta = static_cast<float>(lr);
    for (auto& [name, p] : student.entries()) {
      if (!p.has_grad()) continue;
      auto it = velocity.try_emplace(name, Tensor<float>(p.shape())).first;
      Tensor<float>& v = it->second;
      Tensor<float>& th = p.mutable_value();
      for (std::int64_t i = 0; i < th.numel(); ++i) {
        v[i] = m * v[i] + p.grad()[i] + wd * th[i];
        th[i] -= eta * v[i];
      }
    }
    student.zero_grad();
    const float a = static_cast<float>(cfg.ema_decay), b = static_cast<float>(1.0 - cfg.ema_decay);
    for (auto& [name, t] : teacher.entries()) {
      const auto& s = student.at(name).value();
      auto& tv = t.mutable_value();
      for (std::int64_t i = 0; i < tv.numel(); ++i) tv[i] = a * tv[i] + b * s[i];
    }
    ++iter;
  }
};

// Reference seeded from the trainer's initial backbone weights and data.
template <typename TrainerT>
MeanTeacher mean_teacher_like(const TrainerT& t) {
  MeanTeacher ref;
  ref.cfg = t.config();
  ref.data = t.data();
  for (const auto& [name, v] : t.student().entries())
    if (name.rfind("backbone.", 0) == 0) ref.student.add(name, v.value(), true);
  for (const auto& [name, v] : t.teacher().entries())
    if (name.rfind("backbone.", 0) == 0) ref.teacher.add(name, v.value(), false);
  return ref;
}

}  // namespace oracle
