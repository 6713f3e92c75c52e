// SPDX-License-Identifier: Apache-2.0
//
// Scalar reference kernels vs the AVX2 variants.

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "dctvae/simd/kernels.hpp"

using namespace dctvae::simd;

namespace {

template <class T>
std::vector<T> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<T> d(-1, 1);
  std::vector<T> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <class T>
void check_gemm_equivalence(double tol) {
  std::mt19937_64 rng(7);
  const int sizes[] = {1, 3, 4, 5, 8, 15, 16, 17, 33, 49, 196};
  for (Trans ta : {Trans::kNo, Trans::kYes})
    for (Trans tb : {Trans::kNo, Trans::kYes})
      for (int m : {1, 4, 7, 40})
        for (int n : sizes)
          for (int k : {1, 9, 23, 36, 144, 196}) {
            auto a = random_vec<T>(static_cast<std::size_t>(m) * k, rng);
            auto b = random_vec<T>(static_cast<std::size_t>(k) * n, rng);
            auto c0 = random_vec<T>(static_cast<std::size_t>(m) * n, rng);
            auto c1 = c0;
            scalar::gemm(ta, tb, m, n, k, a.data(), b.data(), c0.data());
            avx2::gemm(ta, tb, m, n, k, a.data(), b.data(), c1.data());
            double worst = 0;
            for (std::size_t i = 0; i < c0.size(); ++i) worst = std::max(worst, double(std::abs(c0[i] - c1[i])));
            INFO("m=" << m << " n=" << n << " k=" << k);
            CHECK(worst <= tol * k);
          }
}

}  // namespace

TEST_CASE("scalar gemm computes op(A)*op(B) accumulation") {
  // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
  const double a[] = {1, 2, 3, 4};
  const double b[] = {5, 6, 7, 8};
  double c[4] = {1, 1, 1, 1};
  scalar::gemm(Trans::kNo, Trans::kNo, 2, 2, 2, a, b, c);
  CHECK(c[0] == 20);
  CHECK(c[1] == 23);
  CHECK(c[2] == 44);
  CHECK(c[3] == 51);
  double d[4] = {0, 0, 0, 0};
  scalar::gemm(Trans::kYes, Trans::kYes, 2, 2, 2, a, b, d);  // A^T B^T = (BA)^T
  CHECK(d[0] == 23);
  CHECK(d[1] == 31);
  CHECK(d[2] == 34);
  CHECK(d[3] == 46);
}

TEST_CASE("avx2 gemm matches scalar reference") {
  if (!isa_supported(Isa::kAvx2)) return;
  check_gemm_equivalence<float>(2e-6);
  check_gemm_equivalence<double>(1e-14);
}

TEST_CASE("avx2 dot and axpy match scalar reference") {
  if (!isa_supported(Isa::kAvx2)) return;
  std::mt19937_64 rng(11);
  for (std::size_t n : {0u, 1u, 7u, 8u, 9u, 31u, 100u, 1000u}) {
    auto x = random_vec<double>(n, rng);
    auto y = random_vec<double>(n, rng);
    CHECK(avx2::dot(x.data(), y.data(), n) == doctest::Approx(scalar::dot(x.data(), y.data(), n)).epsilon(1e-13));
    auto y0 = y, y1 = y;
    scalar::axpy(0.37, x.data(), y0.data(), n);
    avx2::axpy(0.37, x.data(), y1.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(y0[i] == doctest::Approx(y1[i]).epsilon(1e-15));
    auto xf = random_vec<float>(n, rng);
    auto yf = random_vec<float>(n, rng);
    CHECK(avx2::dot(xf.data(), yf.data(), n) ==
          doctest::Approx(scalar::dot(xf.data(), yf.data(), n)).epsilon(1e-4));
  }
}

TEST_CASE("avx2 silu and its gradient match scalar reference") {
  if (!isa_supported(Isa::kAvx2)) return;
  std::mt19937_64 rng(5);
  for (std::size_t n : {0u, 1u, 7u, 8u, 9u, 100u, 1001u}) {
    auto x = random_vec<float>(n, rng);
    for (auto& v : x) v *= 12;
    if (n > 3) {
      x[0] = -100;
      x[1] = 100;
      x[2] = 0;
    }
    auto g = random_vec<float>(n, rng);
    std::vector<float> y0(n), y1(n), gx0(n, 0.25f), gx1(n, 0.25f);
    scalar::silu(x.data(), y0.data(), n);
    avx2::silu(x.data(), y1.data(), n);
    scalar::silu_grad(x.data(), g.data(), gx0.data(), n);
    avx2::silu_grad(x.data(), g.data(), gx1.data(), n);
    for (std::size_t i = 0; i < n; ++i) {
      INFO("x=" << x[i]);
      CHECK(std::abs(y0[i] - y1[i]) <= 1e-6f * (1 + std::abs(y0[i])));
      CHECK(std::abs(gx0[i] - gx1[i]) <= 1e-6f * (1 + std::abs(gx0[i])));
    }
  }
  std::vector<double> xd{-3, 0, 0.5, 40}, yd(4), ys(4);
  avx2::silu(xd.data(), yd.data(), 4);
  scalar::silu(xd.data(), ys.data(), 4);
  CHECK(yd == ys);
  CHECK(ys[1] == 0);
  CHECK(ys[2] == doctest::Approx(0.5 / (1 + std::exp(-0.5))).epsilon(1e-15));
}

TEST_CASE("isa selection can be forced and restored") {
  const Isa original = active_isa();
  set_active_isa(Isa::kScalar);
  CHECK(active_isa() == Isa::kScalar);
  const float a[] = {2}, b[] = {3};
  float c[] = {1};
  gemm(Trans::kNo, Trans::kNo, 1, 1, 1, a, b, c);
  CHECK(c[0] == 7);
  if (isa_supported(Isa::kAvx2)) {
    set_active_isa(Isa::kAvx2);
    CHECK(active_isa() == Isa::kAvx2);
  } else {
    CHECK_THROWS_AS(set_active_isa(Isa::kAvx2), std::invalid_argument);
  }
  set_active_isa(original);
  CHECK(isa_name(Isa::kScalar) == "scalar");
}
