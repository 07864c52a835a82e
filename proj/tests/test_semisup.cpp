#include <doctest.h>

#include "semiseg/cps.hpp"
#include "semiseg/crln.hpp"
#include "semiseg/losses.hpp"
#include "semiseg/ops.hpp"
#include "semiseg/optim.hpp"
#include "support.hpp"

using namespace semiseg;
using oracle::gradcheck;
using oracle::random_tensor;

namespace {

LabelMask random_label(int C, Dims3 d, std::mt19937_64& rng) {
  LabelMask m;
  m.num_classes = C;
  m.classes = Tensor<std::int32_t>({d[0], d[1], d[2]});
  std::uniform_int_distribution<int> u(0, C - 1);
  for (auto& x : m.classes.storage()) x = u(rng);
  return m;
}

Tensor<double> as4d(const Tensor<double>& flat, Dims3 d) { return flat.reshaped({flat.dim(0), d[0], d[1], d[2]}); }

std::vector<std::vector<long double>> rows(const Tensor<double>& t) {
  std::vector<std::vector<long double>> out(static_cast<std::size_t>(t.dim(0)));
  for (std::int64_t r = 0; r < t.dim(0); ++r)
    for (std::int64_t j = 0; j < t.dim(1); ++j) out[r].push_back(t[r * t.dim(1) + j]);
  return out;
}

}  // namespace

// ---------------------------------------------------------------- losses

TEST_CASE("supervised loss trivial cases") {
  std::mt19937_64 rng(1);
  const auto y = random_label(2, {4, 4, 4}, rng);
  const auto oh = y.onehot<double>();
  CHECK(losses::supervised(constant(oh), oh).value()[0] == doctest::Approx(0.0).epsilon(1e-9));
  // Uniform prediction: cross-entropy ln 2 per voxel.
  const Tensor<double> u(oh.shape(), 0.5);
  const double got = losses::supervised(constant(u), oh).value()[0];
  CHECK(got == doctest::Approx(static_cast<double>(oracle::supervised(u, oh, 2))).epsilon(1e-12));
  long double dice = 0;
  for (int c = 0; c < 2; ++c) {
    long double ys = 0;
    for (std::int64_t i = 0; i < 64; ++i) ys += oh[c * 64 + i];
    dice += (2 * 0.5L * ys + 1e-5L) / (32 + ys + 1e-5L);
  }
  CHECK(got == doctest::Approx(static_cast<double>(0.5L * (1 - dice / 2) + 0.5L * std::log(2.0L))).epsilon(1e-12));
}

TEST_CASE("supervised loss matches the direct formula and finite differences") {
  std::mt19937_64 rng(2);
  for (int C : {2, 3}) {
    const auto y = random_label(C, {4, 4, 4}, rng);
    const auto oh = y.onehot<double>();
    auto scores = parameter(random_tensor<double>({C, 4, 4, 4}, rng, -3, 3));
    const auto prob = ops::softmax_channels(scores);
    const double got = losses::supervised(prob, oh).value()[0];
    CHECK(std::abs(got - static_cast<double>(oracle::supervised(prob.value(), oh, C))) < 1e-6);
    CHECK(losses::supervised_from_scores(scores, oh).value()[0] == doctest::Approx(got).epsilon(1e-12));
    auto f = [&] { return losses::supervised(ops::softmax_channels(scores), oh); };
    CHECK(gradcheck(f, {scores}, 64).max_rel < 1e-4);
  }
}

TEST_CASE("unsupervised loss") {
  std::mt19937_64 rng(3);
  const Dims3 d{2, 2, 2};
  const auto target = as4d(oracle::random_simplex(3, 8, rng), d);
  auto scores = parameter(random_tensor<double>({3, 2, 2, 2}, rng, -2, 2));
  const auto prob = ops::softmax_channels(scores);
  for (double tau : {0.0, 0.4, 0.6, 0.9}) {
    const double got = losses::unsupervised(prob, target, tau).value()[0];
    CHECK(std::abs(got - static_cast<double>(oracle::unsupervised(prob.value(), target, 3, tau))) < 1e-12);
  }
  CHECK(losses::unsupervised(prob, target, 1.0 + 1e-9).value()[0] == 0.0);
  auto f = [&] { return losses::unsupervised(ops::softmax_channels(scores), target, 0.0); };
  CHECK(gradcheck(f, {scores}, 64).max_rel < 1e-4);
  CHECK(losses::reliable_fraction(target, 0.0) == 1.0);
}

// ---------------------------------------------------------------- rectification

TEST_CASE("rectification worked example flips the argmax") {
  const auto pred = constant(Tensor<double>({2, 1}, std::vector<double>{0.6, 0.4}));
  const auto map = constant(Tensor<double>({2, 1}, std::vector<double>{-1, 1}));
  const auto out = crln::rectify(pred, map, constant(Tensor<double>({1}, 0.5))).value();
  // raw scores (0.1, 0.9) already sum to one
  CHECK(out[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(out[1] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(out[1] > out[0]);
}

TEST_CASE("rectification limits and invariants") {
  std::mt19937_64 rng(4);
  const auto pred = as4d(oracle::random_simplex(3, 27, rng), {3, 3, 3});
  const auto map = random_tensor<double>({3, 3, 3, 3}, rng, -2, 2);
  ParamSet<double> ps;
  crln::init(ps, 3, crln::RectMode::V3Additive, rng);
  SUBCASE("mu at one is the identity") {
    ps.at("crln.mu_raw").mutable_value()[0] = 800.0;  // sigmoid saturates to exactly 1
    CHECK(crln::mu(ps).value()[0] == 1.0);
    CHECK(crln::rectify(constant(pred), constant(map), crln::mu(ps)).value() == pred);
  }
  SUBCASE("a zero map is the identity") {
    const auto out = crln::rectify(constant(pred), constant(Tensor<double>(pred.shape())), crln::mu(ps)).value();
    for (std::int64_t i = 0; i < pred.numel(); ++i) CHECK(out[i] == doctest::Approx(pred[i]).epsilon(1e-12));
  }
  SUBCASE("outputs are distributions") {
    const auto out = crln::rectify(constant(pred), constant(map), crln::mu(ps)).value();
    for (std::int64_t i = 0; i < 27; ++i) {
      double s = 0;
      for (int c = 0; c < 3; ++c) {
        CHECK(out[c * 27 + i] >= 0.0);
        s += out[c * 27 + i];
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
  SUBCASE("v3 is rectify") {
    const auto a = crln::rectify_variant(crln::RectMode::V3Additive, ps, constant(pred), constant(map), 0.9).value();
    CHECK(a == crln::rectify(constant(pred), constant(map), crln::mu(ps)).value());
  }
  SUBCASE("mode names") {
    CHECK(crln::parse_rect_mode("v2") == crln::RectMode::V2Concat);
    CHECK_THROWS_AS(crln::parse_rect_mode("v4"), ConfigError);
  }
}

TEST_CASE("fixed rectification") {
  // One uncertain voxel whose map is confident, one confident voxel.
  Tensor<double> pred({2, 2}, std::vector<double>{0.55, 0.95, 0.45, 0.05});
  Tensor<double> map({2, 2}, std::vector<double>{0.0, 0.0, std::log(4.0), std::log(4.0)});  // softmax (0.2, 0.8)
  const auto out = crln::rectify_fixed(pred, map, 0.9);
  CHECK(out[0] == doctest::Approx(0.2));
  CHECK(out[2] == doctest::Approx(0.8));
  CHECK(out[1] == 0.95);
  CHECK(out[3] == 0.05);
  Tensor<double> sure({2, 2}, std::vector<double>{0.95, 0.02, 0.05, 0.98});
  CHECK(crln::rectify_fixed(sure, map, 0.9) == sure);
}

TEST_CASE("rectification and mu loss gradients") {
  std::mt19937_64 rng(5);
  const Dims3 d{2, 2, 2};
  auto scores = parameter(random_tensor<double>({2, 2, 2, 2}, rng, -2, 2));
  auto map = parameter(random_tensor<double>({2, 2, 2, 2}, rng, -0.5, 0.5));
  ParamSet<double> ps;
  crln::init(ps, 2, crln::RectMode::V3Additive, rng);
  ps.at("crln.mu_raw").mutable_value()[0] = 0.3;
  const auto label = random_label(2, d, rng);
  SUBCASE("rectify") {
    std::mt19937_64 r(6);
    const auto w = random_tensor<double>({2, 2, 2, 2}, r);
    auto f = [&] {
      return ops::sum(ops::mul(crln::rectify(ops::softmax_channels(scores), map, crln::mu(ps)), constant(w)));
    };
    CHECK(gradcheck(f, {scores, map, ps.at("crln.mu_raw")}).max_rel < 1e-4);
  }
  SUBCASE("mu loss, additive and concatenating") {
    for (auto mode : {crln::RectMode::V3Additive, crln::RectMode::V2Concat}) {
      ParamSet<double> q;
      std::mt19937_64 r(7);
      crln::init(q, 2, mode, r);
      q.at("crln.mu_raw").mutable_value()[0] = -0.4;
      const auto pred = constant(kernels::softmax_channels(scores.value()));
      const auto m = constant(map.value());
      auto f = [&] { return crln::mu_loss(mode, q, pred, m, &label, 0.9); };
      std::vector<Var<double>> params;
      for (auto& [name, p] : q.entries()) params.push_back(p);
      CHECK(gradcheck(f, params).max_rel < 1e-4);
    }
  }
  SUBCASE("unlabelled batch") {
    CHECK_THROWS_AS(crln::mu_loss(crln::RectMode::V3Additive, ps, detach(scores), detach(map), nullptr, 0.9),
                    ContractViolation);
  }
  SUBCASE("perfect prediction and zero map") {
    const auto oh = label.onehot<double>();
    auto loss = crln::mu_loss(crln::RectMode::V3Additive, ps, constant(oh), constant(Tensor<double>(oh.shape())),
                              &label, 0.9);
    ps.zero_grad();
    backward(loss);
    // Only the probability floor keeps the loss off zero.
    CHECK(loss.value()[0] < 1e-5);
    const double g = ps.at("crln.mu_raw").has_grad() ? ps.at("crln.mu_raw").grad()[0] : 0.0;
    CHECK(std::abs(g) < 1e-9);
  }
}

// ---------------------------------------------------------------- CPS

TEST_CASE("InfoNCE spot values") {
  const Tensor<double> centre({2}, std::vector<double>{1, 0});
  const auto a = constant(Tensor<double>({1, 2}, std::vector<double>{1, 0}));
  const auto n = constant(Tensor<double>({1, 2}, std::vector<double>{0, 1}));
  const double e2 = std::exp(2.0);
  const double l1 = cps::info_nce(a, n, centre, 0.5).value()[0];
  CHECK(std::abs(l1 - (-std::log(e2 / (e2 + 1)))) < 1e-5);
  CHECK(std::abs(l1 - 0.12693) < 1e-5);
  const auto a2 = constant(Tensor<double>({1, 2}, std::vector<double>{0, 1}));
  const double l2 = cps::info_nce(a2, n, centre, 0.5).value()[0];
  CHECK(std::abs(l2 - (-std::log(1 / (1 + e2)))) < 1e-5);
  CHECK(std::abs(l2 - 2.12693) < 1e-5);
  CHECK_THROWS_AS(cps::info_nce(a, n, centre, 0.0), ConfigError);
}

TEST_CASE("InfoNCE matches the direct formula on random tiny batches") {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> cnt(1, 4);
  for (int trial = 0; trial < 200; ++trial) {
    const int K = cnt(rng), M = cnt(rng), d = cnt(rng) + 1;
    const auto A = random_tensor<double>({K, d}, rng), N = random_tensor<double>({M, d}, rng);
    const auto P = random_tensor<double>({d}, rng);
    const double got = cps::info_nce(constant(A), constant(N), P, 0.5).value()[0];
    std::vector<long double> p(P.storage().begin(), P.storage().end());
    const auto expect = oracle::info_nce(rows(A), rows(N), p, 0.5L);
    CHECK(std::abs(got - static_cast<double>(expect)) < 1e-6);
    CHECK(got >= 0.0);
  }
}

TEST_CASE("InfoNCE and cps_loss gradients") {
  std::mt19937_64 rng(9);
  auto A = parameter(random_tensor<double>({3, 4}, rng));
  auto N = parameter(random_tensor<double>({4, 4}, rng));
  const auto P = random_tensor<double>({4}, rng);
  auto f = [&] { return cps::info_nce(A, N, P, 0.5); };
  CHECK(gradcheck(f, {A, N}).max_rel < 1e-4);

  auto A2 = parameter(random_tensor<double>({2, 4}, rng));
  cps::ContrastiveBatch<double> batch;
  batch.classes.push_back({0, A, N, P});
  batch.classes.push_back({1, A2, N, random_tensor<double>({4}, rng)});
  for (auto red : {cps::Reduction::Sum, cps::Reduction::MeanOverAnchors}) {
    auto g = [&] { return cps::cps_loss(batch, 0.5, red); };
    CHECK(gradcheck(g, {A, A2, N}).max_rel < 1e-4);
  }
  const double sum = cps::cps_loss(batch, 0.5, cps::Reduction::Sum).value()[0];
  const double mean = cps::cps_loss(batch, 0.5, cps::Reduction::MeanOverAnchors).value()[0];
  CHECK(mean == doctest::Approx(sum / 5).epsilon(1e-12));
}

TEST_CASE("empty contrastive batch gives zero without a graph") {
  const cps::ContrastiveBatch<double> batch;
  const auto l = cps::cps_loss(batch, 0.5, cps::Reduction::MeanOverAnchors);
  CHECK(l.value()[0] == 0.0);
  CHECK_FALSE(l.requires_grad());
  CHECK_THROWS_AS(cps::cps_loss(batch, -1.0, cps::Reduction::Sum), ConfigError);
}

TEST_CASE("positive centre") {
  const Tensor<double> rm({2}, std::vector<double>{1, 0}), pm({2}, std::vector<double>{0, 1});
  const auto c = cps::positive_centre(rm, pm, 0.6);
  CHECK(c[0] == doctest::Approx(1.0 / 1.6).epsilon(1e-12));
  CHECK(c[1] == doctest::Approx(0.6 / 1.6).epsilon(1e-12));
  CHECK(c[0] == doctest::Approx(0.625));
  CHECK(c[1] == doctest::Approx(0.375));
  const auto tiny = cps::positive_centre(rm, pm, 1e-12);
  CHECK(tiny[0] == doctest::Approx(1.0));
  for (double xi : {0.1, 0.5, 1.0}) CHECK(cps::positive_centre(rm, rm, xi) == rm);
}

TEST_CASE("thresholds must be ordered") {
  CHECK_THROWS_AS((cps::Thresholds{0.7, 0.7}.validate()), ConfigError);
  CHECK_THROWS_AS((cps::Thresholds{0.6, 0.9}.validate()), ConfigError);
  CHECK_NOTHROW((cps::Thresholds{0.9, 0.7}.validate()));
}

TEST_CASE("lattice special cases") {
  const Dims3 d{2, 2, 2};
  LabelMask y;
  y.classes = Tensor<std::int32_t>({2, 2, 2}, 1);
  const Tensor<double> certain = LabelMask{y}.onehot<double>();
  const cps::Supervision<double> lab{&y, nullptr};
  const cps::Thresholds th;
  CHECK(cps::anchor_lattice(certain, lab, th, 1).empty());
  Tensor<double> half(certain.shape(), 0.5);
  CHECK(cps::anchor_lattice(half, lab, th, 1).size() == 8);
  CHECK(cps::negative_lattice(lab, th, 0).size() == 8);
  const cps::Supervision<double> both{&y, &certain};
  CHECK_THROWS_AS(cps::negative_lattice(both, th, 0), ContractViolation);
  (void)d;
}

TEST_CASE("lattices equal exhaustive enumeration") {
  std::mt19937_64 rng(10);
  const cps::Thresholds th{0.9, 0.7};
  const double grid[] = {0.0, 0.05, 0.3, 0.5, 0.7, 0.75, 0.9, 0.95, 1.0};
  std::uniform_int_distribution<int> pick(0, 8);
  for (int trial = 0; trial < 300; ++trial) {
    const int C = 2 + trial % 2;
    for (Dims3 d : {Dims3{2, 2, 2}, Dims3{3, 3, 3}}) {
      const std::int64_t n = d[0] * d[1] * d[2];
      // Values on a grid that includes both thresholds, so ties are exercised.
      auto student = oracle::random_simplex(C, n, rng);
      auto pseudo = oracle::random_simplex(C, n, rng);
      for (std::int64_t i = 0; i < n; ++i)
        if (C == 2 && trial % 3 == 0) {
          student[i] = grid[pick(rng)];
          student[n + i] = 1 - student[i];
          pseudo[i] = grid[pick(rng)];
          pseudo[n + i] = 1 - pseudo[i];
        }
      const auto y = random_label(C, d, rng);
      std::vector<int> labels(y.classes.storage().begin(), y.classes.storage().end());
      const auto s4 = as4d(student, d), p4 = as4d(pseudo, d);
      const cps::Supervision<double> lab{&y, nullptr}, un{nullptr, &p4};
      for (int c = 0; c < C; ++c) {
        CHECK(cps::anchor_lattice(s4, lab, th, c) == oracle::anchors(student, &labels, nullptr, C, 0.9, 0.7, c));
        CHECK(cps::anchor_lattice(s4, un, th, c) == oracle::anchors(student, nullptr, &pseudo, C, 0.9, 0.7, c));
        CHECK(cps::negative_lattice(lab, th, c) == oracle::negatives(&labels, nullptr, C, n, 0.7, c));
        CHECK(cps::negative_lattice(un, th, c) == oracle::negatives(nullptr, &pseudo, C, n, 0.7, c));
        std::vector<std::int64_t> pos_l, pos_u;
        for (std::int64_t i = 0; i < n; ++i) {
          if (labels[i] == c) pos_l.push_back(i);
          if (oracle::argmax_at(pseudo, C, n, i) == c && oracle::max_at(pseudo, C, n, i) >= 0.9) pos_u.push_back(i);
        }
        CHECK(cps::positive_lattice(lab, th, c) == pos_l);
        CHECK(cps::positive_lattice(un, th, c) == pos_u);
      }
    }
  }
}

TEST_CASE("batch construction samples from the lattices and caps the counts") {
  std::mt19937_64 rng(11);
  const Dims3 d{4, 4, 4};
  const int dd = 3;
  auto r0 = parameter(random_tensor<double>({dd, 4, 4, 4}, rng));
  auto r1 = parameter(random_tensor<double>({dd, 4, 4, 4}, rng));
  const auto y = random_label(2, d, rng);
  const auto s0 = as4d(oracle::random_simplex(2, 64, rng), d), s1 = as4d(oracle::random_simplex(2, 64, rng), d);
  const auto pseudo = as4d(oracle::random_simplex(2, 64, rng), d);
  std::vector<cps::SampleView<double>> views{{r0, &s0, {&y, nullptr}}, {r1, &s1, {nullptr, &pseudo}}};
  const auto bridged = random_tensor<double>({2, dd}, rng);
  std::vector<std::optional<Tensor<double>>> means(2);
  const cps::Thresholds th{0.9, 0.3};
  const auto batch = cps::build_batch(views, bridged, 0.6, means, th, {5, 7}, rng);
  REQUIRE_FALSE(batch.classes.empty());
  for (const auto& set : batch.classes) {
    CHECK(set.anchors.dim(0) <= 5);
    CHECK(set.negatives.dim(0) <= 7);
    CHECK(set.anchors.dim(1) == dd);
    // Every sampled anchor row is the representation of some lattice voxel.
    const auto la = cps::anchor_lattice(s0, views[0].sup, th, set.c);
    const auto lu = cps::anchor_lattice(s1, views[1].sup, th, set.c);
    for (std::int64_t k = 0; k < set.anchors.dim(0); ++k) {
      bool found = false;
      for (auto i : la) {
        bool eq = true;
        for (int j = 0; j < dd; ++j) eq &= set.anchors.value()[k * dd + j] == r0.value()[j * 64 + i];
        found |= eq;
      }
      for (auto i : lu) {
        bool eq = true;
        for (int j = 0; j < dd; ++j) eq &= set.anchors.value()[k * dd + j] == r1.value()[j * 64 + i];
        found |= eq;
      }
      CHECK(found);
    }
    // Centre = (class mean + xi * bridged prototype) / (1 + xi)
    std::vector<double> mean(dd, 0.0);
    int support = 0;
    for (auto i : cps::positive_lattice(views[0].sup, th, set.c)) {
      for (int j = 0; j < dd; ++j) mean[j] += r0.value()[j * 64 + i];
      ++support;
    }
    for (auto i : cps::positive_lattice(views[1].sup, th, set.c)) {
      for (int j = 0; j < dd; ++j) mean[j] += r1.value()[j * 64 + i];
      ++support;
    }
    for (int j = 0; j < dd; ++j) {
      const double expect = (mean[j] / support + 0.6 * bridged[set.c * dd + j]) / 1.6;
      CHECK(set.centre[j] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  // Gradients reach the projected fields only through anchors and negatives.
  backward(cps::cps_loss(batch, 0.5, cps::Reduction::MeanOverAnchors));
  CHECK((r0.has_grad() || r1.has_grad()));
}

// ---------------------------------------------------------------- optimiser

TEST_CASE("poly learning rate") {
  CHECK(optim::poly_lr(0, 100, 2.5e-3, 0.9) == 2.5e-3);
  CHECK(optim::poly_lr(100, 100, 2.5e-3, 0.9) == 0.0);
  CHECK(optim::poly_lr(50, 100, 1.0, 0.9) == doctest::Approx(std::pow(0.5, 0.9)).epsilon(1e-15));
  CHECK(optim::poly_lr(50, 100, 1.0, 0.9) == doctest::Approx(0.5359).epsilon(1e-4));
  double prev = 1e9;
  for (int i = 0; i < 100; ++i) {
    const double lr = optim::poly_lr(i, 100, 2.5e-3, 0.9);
    CHECK(lr < prev);
    prev = lr;
  }
}

TEST_CASE("EMA closed form") {
  std::mt19937_64 rng(12);
  ParamSet<double> student, teacher;
  student.add("a", random_tensor<double>({5}, rng));
  teacher.add("a", random_tensor<double>({5}, rng), false);
  const auto t0 = teacher.at("a").value();
  const double alpha = 0.99;
  for (int k = 0; k < 50; ++k) optim::ema_update(teacher, student, alpha);
  for (int i = 0; i < 5; ++i) {
    const double s = student.at("a").value()[i];
    const double expect = s * (1 - std::pow(alpha, 50)) + t0[i] * std::pow(alpha, 50);
    CHECK(std::abs(teacher.at("a").value()[i] - expect) < 1e-10);
  }
  ParamSet<double> z, o;
  z.add("a", Tensor<double>({1}, 0.0), false);
  o.add("a", Tensor<double>({1}, 1.0));
  optim::ema_update(z, o, 0.99);
  CHECK(z.at("a").value()[0] == doctest::Approx(0.01).epsilon(1e-12));
  optim::ema_update(z, o, 1.0);
  CHECK(z.at("a").value()[0] == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("SGD with momentum and weight decay") {
  ParamSet<double> ps;
  ps.add("w", Tensor<double>({1}, 2.0));
  ps.add("frozen", Tensor<double>({1}, 1.0));
  auto& p = ps.at("w");
  optim::Sgd<double> sgd(0.9, 0.1);
  double theta = 2.0, v = 0.0;
  for (int k = 0; k < 3; ++k) {
    ps.zero_grad();
    backward(ops::sum(ops::mul(p, p)));  // g = 2 theta
    sgd.step(ps, 0.05);
    v = 0.9 * v + 2 * theta + 0.1 * theta;
    theta -= 0.05 * v;
    CHECK(p.value()[0] == doctest::Approx(theta).epsilon(1e-12));
  }
  CHECK(ps.at("frozen").value()[0] == 1.0);
}
