// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include "doctest.h"
#include "dctvae/grad_check.hpp"
#include "dctvae/ops.hpp"
#include "test_util.hpp"

using namespace dctvae;
using dctvae::testing::max_abs_diff;
using dctvae::testing::random_tensor;

namespace {

// Direct quadruple loop over output and kernel taps.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, int stride, int pad) {
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), k = w.dim(2);
  const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor<double> y({B, Cout, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Cout; ++co)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double s = 0;
          for (int ci = 0; ci < Cin; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                if (iy >= 0 && iy < H && ix >= 0 && ix < W) s += x.at(b, ci, iy, ix) * w.at(co, ci, ky, kx);
              }
          y.at(b, co, oy, ox) = s;
        }
  return y;
}

Tensor<double> run_conv(const Tensor<double>& x, const Tensor<double>& w, int stride, int pad) {
  Tape<double> t;
  return conv2d(t.constant(x), t.constant(w), std::nullopt, stride, pad).value();
}

}  // namespace

TEST_CASE("conv2d: identity 1x1 kernel") {
  auto x = random_tensor<double>({2, 1, 5, 5}, 1);
  Tensor<double> w({1, 1, 1, 1}, 1.0);
  CHECK(run_conv(x, w, 1, 0) == x);
}

TEST_CASE("conv2d: zero kernel gives zeros") {
  auto x = random_tensor<double>({1, 2, 6, 6}, 2);
  Tensor<double> w({3, 2, 3, 3});
  auto y = run_conv(x, w, 1, 1);
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("conv2d matches the naive loop oracle") {
  auto x = random_tensor<double>({1, 2, 8, 8}, 3);
  auto w = random_tensor<double>({4, 2, 3, 3}, 4);
  for (int stride : {1, 2})
    for (int pad : {0, 1}) {
      auto y = run_conv(x, w, stride, pad);
      auto ref = naive_conv(x, w, stride, pad);
      REQUIRE(y.shape() == ref.shape());
      CHECK(max_abs_diff(y, ref) < 1e-12);
    }
}

TEST_CASE("conv2d is linear in its input") {
  auto x = random_tensor<double>({2, 3, 7, 7}, 5);
  auto y = random_tensor<double>({2, 3, 7, 7}, 6);
  auto w = random_tensor<double>({2, 3, 3, 3}, 7);
  const double a = 0.7, b = -1.3;
  Tensor<double> mix(x.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
  auto lhs = run_conv(mix, w, 1, 1);
  auto cx = run_conv(x, w, 1, 1), cy = run_conv(y, w, 1, 1);
  for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(std::abs(lhs[i] - (a * cx[i] + b * cy[i])) < 1e-10);
}

TEST_CASE("conv2d rejects mismatched shapes naming both") {
  Tape<double> t;
  auto x = t.constant(Tensor<double>({1, 3, 8, 8}));
  auto w = t.constant(Tensor<double>({4, 2, 3, 3}));
  try {
    conv2d(x, w, std::nullopt, 1, 1);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1,3,8,8]") != std::string::npos);
    CHECK(msg.find("[4,2,3,3]") != std::string::npos);
  }
  auto even = t.constant(Tensor<double>({4, 3, 2, 2}));
  CHECK_THROWS_AS(conv2d(x, even, std::nullopt, 1, 0), std::invalid_argument);
}

TEST_CASE("avg_pool") {
  auto x = random_tensor<double>({1, 1, 4, 4}, 8);
  CHECK(avg_pool(x, 1) == x);
  Tensor<double> block({1, 1, 2, 2}, std::vector<double>{0, 1, 1, 0});
  CHECK(avg_pool(block, 2)[0] == 0.5);
  auto p = avg_pool(x, 2);
  for (int oy = 0; oy < 2; ++oy)
    for (int ox = 0; ox < 2; ++ox) {
      const double m = (x.at(0, 0, 2 * oy, 2 * ox) + x.at(0, 0, 2 * oy + 1, 2 * ox) + x.at(0, 0, 2 * oy, 2 * ox + 1) +
                        x.at(0, 0, 2 * oy + 1, 2 * ox + 1)) / 4.0;
      CHECK(p.at(0, 0, oy, ox) == doctest::Approx(m).epsilon(1e-15));
    }
  CHECK_THROWS_AS(avg_pool(Tensor<double>({1, 1, 5, 4}), 2), std::invalid_argument);
}

TEST_CASE("nearest_upsample") {
  auto x = random_tensor<double>({1, 2, 3, 3}, 9);
  CHECK(nearest_upsample(x, 1) == x);
  Tensor<double> one({1, 1, 1, 1}, 2.5);
  auto up = nearest_upsample(one, 2);
  CHECK(up.shape() == Shape{1, 1, 2, 2});
  for (double v : up.values()) CHECK(v == 2.5);
  CHECK_THROWS_AS(nearest_upsample(x, 0), std::invalid_argument);
}

TEST_CASE("avg_pool inverts nearest_upsample exactly") {
  for (int f : {1, 2, 3, 4}) {
    auto x = random_tensor<double>({2, 3, 5, 5}, 10 + f);
    CHECK(avg_pool(nearest_upsample(x, f), f) == x);
  }
  // Powers of two make the float mean exact as well.
  auto xf = random_tensor<float>({1, 1, 4, 4}, 20);
  CHECK(avg_pool(nearest_upsample(xf, 2), 2) == xf);
}

TEST_CASE("silu values and derivative") {
  Tape<double> t;
  auto x = t.constant(Tensor<double>({3}, std::vector<double>{0.0, 20.0, -3.0}));
  auto y = silu(x).value();
  CHECK(y[0] == 0.0);
  CHECK(std::abs(y[1] - 20.0) < 1e-7);
  CHECK(y[2] == doctest::Approx(-3.0 / (1.0 + std::exp(3.0))));

  Parameter<double> w("w", Tensor<double>({1}, 0.0));
  Tape<double> t2;
  auto out = sum(silu(t2.parameter(w)));
  t2.backward(out);
  CHECK(w.grad()[0] == doctest::Approx(0.5).epsilon(1e-12));
  const double h = 1e-5;
  const double fd = (h / (1 + std::exp(-h)) - (-h) / (1 + std::exp(h))) / (2 * h);
  CHECK(std::abs(fd - 0.5) < 1e-9);
}

TEST_CASE("grad_check: analytic square") {
  Parameter<double> w("w", Tensor<double>({1}, 3.0));
  auto report = grad_check([&](Tape<double>& t) { auto v = t.parameter(w); return sum(mul(v, v)); }, {&w}, 1e-8);
  CHECK(report.passed());
  CHECK(w.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("grad_check: silu chain on random input") {
  Parameter<double> w("w", random_tensor<double>({16}, 30));
  const auto x = random_tensor<double>({16}, 31, -3.0, 3.0);
  auto report = grad_check(
      [&](Tape<double>& t) { return sum(silu(mul(t.parameter(w), t.constant(x)))); }, {&w}, 1e-5);
  CHECK(report.passed());
}

TEST_CASE("grad_check: composed primitive chain") {
  Parameter<double> w1("w1", random_tensor<double>({4, 2, 3, 3}, 40, -0.5, 0.5));
  Parameter<double> b1("b1", random_tensor<double>({4}, 41));
  Parameter<double> w2("w2", random_tensor<double>({3, 6, 1, 1}, 42));
  Parameter<double> bias("bias", random_tensor<double>({2, 3}, 43));
  Parameter<double> table("table", random_tensor<double>({5, 3}, 44));
  const auto x = random_tensor<double>({2, 2, 8, 8}, 45);
  auto fn = [&](Tape<double>& t) {
    auto h = silu(conv2d(t.constant(x), t.parameter(w1), t.parameter(b1), 1, 1));
    auto pooled = avg_pool(h, 2);
    auto both = concat_channels(pooled, slice_channels(pooled, 1, 2));
    auto z = conv2d(both, t.parameter(w2), std::nullopt, 1, 0);
    z = add_channel_bias(z, t.parameter(bias));
    z = add_channel_bias(z, gather_rows(t.parameter(table), {4, 1}));
    auto up = nearest_upsample(z, 2);
    auto e = exp(clamp(scale(up, 0.3), -2.0, 2.0));
    auto per = sum_per_item(mul(e, up));
    return sum(scale_per_item(per, std::vector<double>{0.5, 2.0}));
  };
  auto report = grad_check(fn, {&w1, &b1, &w2, &bias, &table}, 1e-4);
  for (const auto& e : report.entries) INFO(e.name << " " << e.max_rel_error);
  CHECK(report.passed());
  CHECK(report.worst() < 1e-6);
}

TEST_CASE("grad_check reports offending parameter paths") {
  Parameter<double> w("layer.w", Tensor<double>({1}, 2.0));
  // Non-differentiable at the sampled point: clamp edge at exactly 2.
  auto report = grad_check([&](Tape<double>& t) { return sum(clamp(t.parameter(w), -1.0, 2.0)); }, {&w}, 1e-4);
  CHECK_FALSE(report.passed());
  REQUIRE(report.failures.size() == 1);
  CHECK(report.failures[0] == "layer.w");
}

TEST_CASE("tape replay reproduces forward values bit-identically") {
  Parameter<float> w("w", random_tensor<float>({3, 2, 3, 3}, 50));
  const auto x = random_tensor<float>({2, 2, 6, 6}, 51);
  Tape<float> t;
  auto y = sum(silu(conv2d(t.constant(x), t.parameter(w), std::nullopt, 1, 1)));
  const auto before = y.value();
  t.replay();
  CHECK(y.value() == before);
  w.value()[0] += 1.0f;
  t.replay();
  CHECK_FALSE(y.value() == before);
}

TEST_CASE("forward evaluation is deterministic") {
  auto run = [] {
    Parameter<float> w("w", random_tensor<float>({4, 3, 3, 3}, 60));
    const auto x = random_tensor<float>({3, 3, 9, 9}, 61);
    Tape<float> t;
    return silu(conv2d(t.constant(x), t.parameter(w), std::nullopt, 2, 1)).value();
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite forward values abort") {
  Tape<double> t;
  auto x = t.constant(Tensor<double>({1}, 800.0));
  CHECK_THROWS_AS(exp(x), NonFiniteError);
}
