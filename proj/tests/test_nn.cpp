// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <random>

#include "smol/nn/ops.hpp"
#include "smol/nn/params.hpp"
#include "support/gradcheck.hpp"

using namespace smol;
using nn::Matrix;
using nn::Tape;
using nn::Var;
using testing::check_input;
using testing::random_matrix;
using testing::weighted_sum;

namespace {

constexpr double kTol = 1e-3;

// Conv by direct definition, independent of the im2col path.
Matrix<double> naive_conv(const Matrix<double>& x, int h, int w, const Matrix<double>& wt, int k, int stride, int pad) {
  const int cin = static_cast<int>(x.cols());
  const int cout = static_cast<int>(wt.cols());
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  Matrix<double> out = Matrix<double>::Zero(ho * wo, cout);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox)
      for (int co = 0; co < cout; ++co) {
        double s = 0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx)
            for (int ci = 0; ci < cin; ++ci) {
              const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
              if (iy < 0 || ix < 0 || iy >= h || ix >= w) continue;
              s += x(iy * w + ix, ci) * wt((ky * k + kx) * cin + ci, co);
            }
        out(oy * wo + ox, co) = s;
      }
  return out;
}

}  // namespace

TEST_CASE("conv2d matches the direct definition") {
  std::mt19937_64 rng(1);
  const Matrix<double> x = random_matrix(6 * 5, 3, rng);
  const Matrix<double> w = random_matrix(3 * 3 * 3, 4, rng);
  for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 0}, std::pair{2, 1}}) {
    Tape<double> t(false);
    Var y = nn::conv2d(t, t.constant(x), {6, 5, 3, stride, pad}, t.constant(w), Var{});
    CHECK((t.value(y) - naive_conv(x, 6, 5, w, 3, stride, pad)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("conv_transpose2x2 places each input pixel in its 2x2 block") {
  Matrix<double> x(1, 1);
  x << 2.0;
  Matrix<double> w(1, 4);
  w << 1, 2, 3, 4;
  Matrix<double> b(1, 1);
  b << 0.5;
  Tape<double> t(false);
  const auto& y = t.value(nn::conv_transpose2x2(t, t.constant(x), 1, 1, t.constant(w), t.constant(b)));
  REQUIRE(y.rows() == 4);
  CHECK(y(0, 0) == 2.5);
  CHECK(y(1, 0) == 4.5);
  CHECK(y(2, 0) == 6.5);
  CHECK(y(3, 0) == 8.5);
}

TEST_CASE("max_pool2x2 keeps the block maximum") {
  Matrix<double> x(16, 1);
  for (int i = 0; i < 16; ++i) x(i, 0) = (i * 7) % 16;
  Tape<double> t(false);
  const auto& y = t.value(nn::max_pool2x2(t, t.constant(x), 4, 4));
  for (int by = 0; by < 2; ++by)
    for (int bx = 0; bx < 2; ++bx) {
      double m = -1;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) m = std::max(m, x((2 * by + dy) * 4 + 2 * bx + dx, 0));
      CHECK(y(by * 2 + bx, 0) == m);
    }
}

TEST_CASE("op gradients match central differences") {
  std::mt19937_64 rng(7);
  const Matrix<double> w = random_matrix(5, 4, rng);
  const Matrix<double> probe4 = random_matrix(6, 4, rng);

  SUBCASE("linear + gelu + layer_norm") {
    const Matrix<double> g = random_matrix(1, 4, rng);
    const Matrix<double> b = random_matrix(1, 4, rng);
    auto r = check_input(random_matrix(6, 5, rng), [&](Tape<double>& t, Var x) {
      Var y = nn::gelu(t, nn::linear(t, x, t.constant(w), Var{}));
      return weighted_sum(t, nn::layer_norm(t, y, t.constant(g), t.constant(b)), probe4);
    }, 30, 1);
    CHECK_MESSAGE(r.max_rel_error < kTol, r.worst);
  }
  SUBCASE("attention") {
    const Matrix<double> k = random_matrix(7, 4, rng);
    const Matrix<double> v = random_matrix(7, 4, rng);
    auto r = check_input(random_matrix(6, 4, rng), [&](Tape<double>& t, Var q) {
      return weighted_sum(t, nn::attention(t, q, t.constant(k), t.constant(v), 2), probe4);
    }, 24, 2);
    CHECK_MESSAGE(r.max_rel_error < kTol, r.worst);
    auto rk = check_input(k, [&](Tape<double>& t, Var kk) {
      return weighted_sum(t, nn::attention(t, t.constant(probe4), kk, t.constant(v), 2), probe4);
    }, 24, 3);
    CHECK_MESSAGE(rk.max_rel_error < kTol, rk.worst);
  }
  SUBCASE("strided conv, transposed conv, pooling, concat") {
    const Matrix<double> cw = random_matrix(3 * 3 * 2, 3, rng);
    const Matrix<double> tw = random_matrix(3, 8, rng);
    const Matrix<double> tb = random_matrix(1, 2, rng);
    const Matrix<double> probe = random_matrix(16, 5, rng);
    auto r = check_input(random_matrix(16, 2, rng), [&](Tape<double>& t, Var x) {
      Var d = nn::conv2d(t, x, {4, 4, 3, 2, 1}, t.constant(cw), Var{});  // 2x2x3
      Var u = nn::conv_transpose2x2(t, d, 2, 2, t.constant(tw), t.constant(tb));  // 4x4x2
      Var p = nn::max_pool2x2(t, nn::concat_cols(t, x, u), 4, 4);  // 2x2x4
      Var up = nn::conv_transpose2x2(t, p, 2, 2, t.constant(Matrix<double>::Ones(4, 20)),
                                     t.constant(Matrix<double>::Zero(1, 5)));
      return weighted_sum(t, up, probe);
    }, 32, 4);
    CHECK_MESSAGE(r.max_rel_error < kTol, r.worst);
  }
  SUBCASE("row concat and row mean") {
    const Matrix<double> head = random_matrix(2, 4, rng);
    const Matrix<double> probe = random_matrix(3, 4, rng);
    auto r = check_input(random_matrix(6, 4, rng), [&](Tape<double>& t, Var x) {
      Var y = nn::concat_rows(t, t.constant(head), nn::mean_rows(t, nn::gelu(t, x)));
      return weighted_sum(t, y, probe);
    }, 24, 7);
    CHECK_MESSAGE(r.max_rel_error < kTol, r.worst);
  }
  SUBCASE("losses") {
    Matrix<double> target(6, 4);
    for (int i = 0; i < target.size(); ++i) target.data()[i] = (i % 3 == 0) ? 1.0 : 0.0;
    auto r = check_input(random_matrix(6, 4, rng), [&](Tape<double>& t, Var x) {
      return nn::add(t, nn::bce_with_logits(t, x, target), nn::soft_dice_loss(t, x, target));
    }, 24, 5);
    CHECK_MESSAGE(r.max_rel_error < kTol, r.worst);
    const std::vector<int> labels = {0, 3, 2, 1, 1, 0};
    auto rc = check_input(random_matrix(6, 4, rng), [&](Tape<double>& t, Var x) {
      return nn::softmax_cross_entropy(t, x, labels);
    }, 24, 6);
    CHECK_MESSAGE(rc.max_rel_error < kTol, rc.worst);
  }
}

TEST_CASE("a parameter used twice accumulates both contributions") {
  nn::ParameterSet<double> ps(3);
  auto& w = ps.add("w", 2, 2, nn::Init::normal, 1.0);
  Tape<double> t;
  Matrix<double> x = Matrix<double>::Identity(2, 2);
  Var a = nn::matmul(t, t.constant(x), t.param(w));
  Var b = nn::matmul(t, t.constant(x), t.param(w));
  t.backward(nn::sum(t, nn::add(t, a, b)));
  CHECK(w.grad.isApprox(Matrix<double>::Constant(2, 2, 2.0)));
}

TEST_CASE("AdamW decay is decoupled from the moments") {
  nn::ParameterSet<float> ps(1);
  auto& p = ps.add("p", 3, 3, nn::Init::normal, 1.0);
  const Matrix<float> before = p.value;
  nn::AdamW<float> opt(ps, {.weight_decay = 0.01});
  const double lr = 0.1;
  opt.step(lr);  // zero gradients
  const Matrix<float> expected = before * static_cast<float>(1.0 - lr * 0.01);
  CHECK(p.value == expected);
}

TEST_CASE("AdamW first step moves each weight by lr against the gradient sign") {
  nn::ParameterSet<double> ps(1);
  auto& p = ps.add("p", 1, 3, nn::Init::zeros);
  p.grad << 0.5, -2.0, 1e-3;
  nn::AdamW<double> opt(ps, {.eps = 0.0, .weight_decay = 0.0});
  // The first bias-corrected step is m/sqrt(v) = sign(g).
  opt.step(0.01);
  CHECK(p.value(0, 0) == doctest::Approx(-0.01));
  CHECK(p.value(0, 1) == doctest::Approx(0.01));
  CHECK(p.value(0, 2) == doctest::Approx(-0.01));
}

TEST_CASE("AdamW group scaling touches only the named prefix") {
  nn::ParameterSet<double> ps(1);
  auto& a = ps.add("enc/w", 1, 2, nn::Init::zeros);
  auto& b = ps.add("dec/w", 1, 2, nn::Init::zeros);
  a.grad << 1.0, -1.0;
  b.grad << 1.0, -1.0;
  nn::AdamW<double> opt(ps, {.eps = 0.0, .weight_decay = 0.0});
  opt.scale_group("enc/", 0.1);
  opt.step(0.01);
  CHECK(a.value(0, 0) == doctest::Approx(-0.001));
  CHECK(a.value(0, 1) == doctest::Approx(0.001));
  CHECK(b.value(0, 0) == doctest::Approx(-0.01));
  CHECK(b.value(0, 1) == doctest::Approx(0.01));
}

TEST_CASE("non-recording tapes refuse backward") {
  Tape<double> t(false);
  Var x = t.constant(Matrix<double>::Ones(1, 1));
  CHECK_THROWS_AS(t.backward(x), std::logic_error);
}
