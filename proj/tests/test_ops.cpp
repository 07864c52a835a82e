#include <doctest.h>

#include "semiseg/ops.hpp"
#include "support.hpp"

using namespace semiseg;
using oracle::gradcheck;
using oracle::random_tensor;

namespace {

std::mt19937_64 rng(42);

// Weighted sum with fixed random weights so every output entry matters.
Var<double> probe(const Var<double>& y) {
  std::mt19937_64 r(99);
  return ops::sum(ops::mul(y, constant(random_tensor<double>(y.shape(), r))));
}

}  // namespace

TEST_CASE("elementwise and reduction gradients") {
  auto a = parameter(random_tensor<double>({3, 4}, rng));
  auto b = parameter(random_tensor<double>({3, 4}, rng));
  auto s = parameter(random_tensor<double>({1}, rng));
  auto f = [&] {
    auto y = ops::add(ops::mul(a, ops::sigmoid(b)), ops::scale_by(ops::relu(ops::sub(a, b)), s));
    return probe(ops::scale(y, 1.5));
  };
  CHECK(gradcheck(f, {a, b, s}).max_rel < 1e-6);
}

TEST_CASE("matmul, linear, softmax and row ops") {
  auto x = parameter(random_tensor<double>({5, 3}, rng));
  auto w = parameter(random_tensor<double>({3, 4}, rng));
  auto b = parameter(random_tensor<double>({4}, rng));
  auto f = [&] {
    auto y = ops::linear(x, w, b);
    auto z = ops::matmul(ops::softmax(y, 1), ops::transpose(ops::softmax(y, 0)));
    auto rows = ops::concat_rows<double>({ops::slice_rows(z, 1, 3), ops::gather_columns(z, {0, 4})});
    return probe(ops::reshape(rows, {rows.numel()}));
  };
  CHECK(gradcheck(f, {x, w, b}).max_rel < 1e-6);
}

TEST_CASE("softmax rows sum to one") {
  auto y = ops::softmax(constant(random_tensor<double>({4, 6}, rng, -5, 5)), 1);
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int c = 0; c < 6; ++c) s += y.value()[r * 6 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("volumetric op gradients") {
  auto x = parameter(random_tensor<double>({2, 4, 4, 4}, rng));
  auto w3 = parameter(random_tensor<double>({3, 2, 3, 3, 3}, rng));
  auto b3 = parameter(random_tensor<double>({3}, rng));
  auto ws = parameter(random_tensor<double>({3, 3, 2, 2, 2}, rng));
  auto wt = parameter(random_tensor<double>({3, 2, 2, 2, 2}, rng));
  auto g = parameter(random_tensor<double>({2}, rng, 0.5, 1.5));
  auto be = parameter(random_tensor<double>({2}, rng));

  SUBCASE("conv3d stride 1 and 2") {
    auto f = [&] { return probe(ops::conv3d(ops::conv3d(x, w3, b3, 1, 1), ws, Var<double>(), 2, 0)); };
    CHECK(gradcheck(f, {x, w3, b3, ws}).max_rel < 1e-6);
  }
  SUBCASE("transposed conv") {
    auto f = [&] { return probe(ops::conv_transpose3d_k2s2(ops::conv3d(x, w3, b3, 1, 1), wt, be)); };
    CHECK(gradcheck(f, {x, w3, wt, be}).max_rel < 1e-6);
  }
  SUBCASE("instance norm, upsample, channel softmax") {
    auto f = [&] { return probe(ops::softmax_channels(ops::upsample_trilinear2x(ops::instance_norm(x, g, be)))); };
    CHECK(gradcheck(f, {x, g, be}).max_rel < 1e-6);
  }
}

TEST_CASE("conv3d matches a direct loop") {
  auto x = random_tensor<double>({2, 5, 4, 6}, rng);
  auto w = random_tensor<double>({3, 2, 3, 3, 3}, rng);
  auto b = random_tensor<double>({3}, rng);
  const auto y = kernels::conv3d_forward(x, w, &b, 1, 1);
  REQUIRE(y.shape() == Shape{3, 5, 4, 6});
  double worst = 0;
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 4; ++j)
        for (int k = 0; k < 6; ++k) {
          double s = b[o];
          for (int c = 0; c < 2; ++c)
            for (int di = 0; di < 3; ++di)
              for (int dj = 0; dj < 3; ++dj)
                for (int dk = 0; dk < 3; ++dk) {
                  const int ii = i + di - 1, jj = j + dj - 1, kk = k + dk - 1;
                  if (ii < 0 || jj < 0 || kk < 0 || ii >= 5 || jj >= 4 || kk >= 6) continue;
                  s += w[(((o * 2 + c) * 3 + di) * 3 + dj) * 3 + dk] * x[((c * 5 + ii) * 4 + jj) * 6 + kk];
                }
          worst = std::max(worst, std::abs(s - y[((o * 5 + i) * 4 + j) * 6 + k]));
        }
  CHECK(worst < 1e-12);
}

TEST_CASE("upsample keeps constants constant") {
  const auto y = kernels::upsample_trilinear2x(Tensor<double>({2, 3, 3, 3}, 0.75));
  REQUIRE(y.shape() == Shape{2, 6, 6, 6});
  for (auto v : y.storage()) CHECK(v == doctest::Approx(0.75));
}

TEST_CASE("backward needs a scalar root") {
  auto a = parameter(Tensor<double>({2}, 1.0));
  CHECK_THROWS_AS(backward(ops::scale(a, 2.0)), ShapeError);
}
