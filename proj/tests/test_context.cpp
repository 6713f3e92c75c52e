// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "dctvae/context.hpp"
#include "dctvae/ops.hpp"
#include "test_util.hpp"

using namespace dctvae;
using dctvae::testing::max_abs_diff;
using dctvae::testing::random_tensor;

namespace {

// Direct cosine sum, written from the DCT-II definition without the basis class.
Tensor<double> direct_dct2(const Tensor<double>& x) {
  const int ch = x.dim(0), D = x.dim(1);
  auto alpha = [D](int k) { return k == 0 ? std::sqrt(1.0 / D) : std::sqrt(2.0 / D); };
  Tensor<double> z(x.shape());
  for (int c = 0; c < ch; ++c)
    for (int k = 0; k < D; ++k)
      for (int l = 0; l < D; ++l) {
        double s = 0;
        for (int i = 0; i < D; ++i)
          for (int j = 0; j < D; ++j)
            s += x[(static_cast<std::size_t>(c) * D + i) * D + j] * std::cos(std::numbers::pi * (i + 0.5) * k / D) *
                 std::cos(std::numbers::pi * (j + 0.5) * l / D);
        z[(static_cast<std::size_t>(c) * D + k) * D + l] = alpha(k) * alpha(l) * s;
      }
  return z;
}

double norm2(const Tensor<double>& t) {
  double s = 0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

// A soft filled ellipse on a 28x28 grid, binarized.
Tensor<double> blob_digit(int variant) {
  Tensor<double> x({1, 28, 28});
  for (int i = 0; i < 28; ++i)
    for (int j = 0; j < 28; ++j) {
      const double a = (i - 14.0 + variant) / 9.0, b = (j - 13.0) / (5.0 + variant);
      x[static_cast<std::size_t>(i) * 28 + j] = (a * a + b * b < 1.0 && a * a + b * b > 0.35) ? 1.0 : 0.0;
    }
  return x;
}

ContextCodec fitted_codec(std::span<const Tensor<double>> images, int d) {
  const auto& f = images.front();
  return ContextCodec::dct(f.dim(0), f.dim(1), d, 1.0, fit_normalization(images, d));
}

}  // namespace

TEST_CASE("dct_matrix small cases") {
  auto b1 = dct_matrix(1);
  CHECK(b1(0, 0) == 1.0);
  auto b2 = dct_matrix(2);
  const double r = std::sqrt(0.5);
  CHECK(b2(0, 0) == doctest::Approx(r).epsilon(1e-15));
  CHECK(b2(0, 1) == doctest::Approx(r).epsilon(1e-15));
  CHECK(b2(1, 0) == doctest::Approx(std::cos(std::numbers::pi / 4)).epsilon(1e-15));
  CHECK(b2(1, 1) == doctest::Approx(std::cos(3 * std::numbers::pi / 4)).epsilon(1e-15));
  CHECK(b2(1, 0) == doctest::Approx(0.70711).epsilon(1e-5));
  CHECK_THROWS_AS(dct_matrix(0), std::invalid_argument);
}

TEST_CASE("dct basis is orthonormal for every side 2..64") {
  for (int D = 2; D <= 64; ++D) {
    auto b = dct_matrix(D);
    double worst = 0;
    for (int i = 0; i < D; ++i)
      for (int j = 0; j < D; ++j) {
        double s = 0;
        for (int n = 0; n < D; ++n) s += b(i, n) * b(j, n);
        worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
      }
    CHECK_MESSAGE(worst < 1e-12, "D=" << D);
  }
}

TEST_CASE("dct2 examples") {
  auto b4 = dct_matrix(4);
  auto z = dct2(Tensor<double>({1, 4, 4}, 1.0), b4);
  CHECK(z[0] == doctest::Approx(4.0).epsilon(1e-14));
  for (std::size_t i = 1; i < z.size(); ++i) CHECK(std::abs(z[i]) < 1e-14);

  Tensor<double> imp({1, 2, 2});
  imp[0] = 1;
  auto zi = dct2(imp, dct_matrix(2));
  for (double v : zi.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-14));

  auto x = random_tensor<double>({2, 8, 8}, 7);
  CHECK(max_abs_diff(dct2(x, dct_matrix(8)), direct_dct2(x)) < 1e-10);
  CHECK_THROWS_AS(dct2(x, dct_matrix(4)), std::invalid_argument);
  CHECK_THROWS_AS(idct2(Tensor<double>({1, 8, 7}), dct_matrix(8)), std::invalid_argument);
}

TEST_CASE("idct2 inverts dct2 and preserves the norm") {
  auto b = dct_matrix(8);
  CHECK(idct2(Tensor<double>({1, 8, 8}), b) == Tensor<double>({1, 8, 8}));
  auto x = random_tensor<double>({100, 8, 8}, 11, -5.0, 5.0);
  auto z = dct2(x, b);
  CHECK(max_abs_diff(idct2(z, b), x) < 1e-9);
  CHECK(std::abs(norm2(z) - norm2(x)) < 1e-9);
}

TEST_CASE("low-frequency projection is idempotent") {
  auto b = dct_matrix(16);
  auto low = random_tensor<double>({1, 5, 5}, 12);
  auto smooth = idct2(zero_pad(low, 16), b);
  auto back = dct2(smooth, b);
  CHECK(max_abs_diff(crop_low(back, 5), low) < 1e-12);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j)
      if (i >= 5 || j >= 5) CHECK(std::abs(back[static_cast<std::size_t>(i) * 16 + j]) < 1e-12);
}

TEST_CASE("fit_normalization") {
  auto a = random_tensor<double>({1, 8, 8}, 20);
  auto c = random_tensor<double>({1, 8, 8}, 21);
  std::vector<Tensor<double>> one{a};
  auto s1 = fit_normalization(one, 4);
  auto za = crop_low(dct2(a, dct_matrix(8)), 4);
  for (std::size_t i = 0; i < s1.size(); ++i) CHECK(s1[i] == std::max(std::abs(za[i]), kScaleFloor));

  std::vector<Tensor<double>> two{a, c};
  auto s2 = fit_normalization(two, 4);
  auto zc = crop_low(dct2(c, dct_matrix(8)), 4);
  for (std::size_t i = 0; i < s2.size(); ++i) CHECK(s2[i] == std::max({std::abs(za[i]), std::abs(zc[i]), kScaleFloor}));

  std::vector<Tensor<double>> none;
  CHECK_THROWS_AS(fit_normalization(none, 4), std::invalid_argument);

  // Zero images leave every entry at the floor.
  std::vector<Tensor<double>> zeros{Tensor<double>({1, 8, 8})};
  const auto floored = fit_normalization(zeros, 3);
  for (double v : floored.values()) CHECK(v == kScaleFloor);
}

TEST_CASE("streaming normalization equals the batch fit") {
  std::vector<Tensor<double>> images;
  for (int i = 0; i < 1000; ++i) images.push_back(random_tensor<double>({2, 8, 8}, 1000 + i, 0.0, 255.0));
  const auto batch = fit_normalization(images, 5);
  NormalizationFit stream(2, 8, 5);
  for (auto it = images.rbegin(); it != images.rend(); ++it) stream.add(*it);
  CHECK(stream.count() == 1000);
  CHECK(stream.result() == batch);
}

TEST_CASE("encode/decode with a full-size context") {
  auto x = random_tensor<double>({1, 8, 8}, 30, 0.0, 255.0);
  std::vector<Tensor<double>> train{x};
  auto codec = ContextCodec::dct(1, 8, 8, 255.0, fit_normalization(train, 8));
  auto rec = decode_context(encode_context(x, codec), codec);
  CHECK(max_abs_diff(rec, x) <= 0.5 * 8);
}

TEST_CASE("encode zero image and clamp overflow") {
  std::vector<Tensor<double>> train{random_tensor<double>({1, 8, 8}, 31)};
  auto codec = fitted_codec(train, 4);
  auto zero = encode_context(Tensor<double>({1, 8, 8}), codec);
  for (auto c : zero.coeffs) CHECK(c == 0);

  Tensor<double> big = train[0];
  for (double& v : big.values()) v *= 50.0;
  auto code = encode_context(big, codec);
  auto u = normalized(code, codec);
  auto zb = crop_low(dct2(big, dct_matrix(8)), 4);
  for (std::size_t i = 0; i < u.size(); ++i) {
    CHECK(std::abs(u[i]) <= 1.0);
    if (std::abs(zb[i]) > codec.scale[i]) CHECK(std::abs(code.coeffs[i]) == static_cast<int>(std::floor(codec.scale[i])));
  }

  ContextCodec unfitted;
  CHECK_THROWS_AS(encode_context(Tensor<double>({1, 28, 28}), unfitted), std::invalid_argument);
}

TEST_CASE("decode is a low-pass projection and re-encode is idempotent") {
  std::vector<Tensor<double>> train;
  for (int v = 0; v < 4; ++v) train.push_back(blob_digit(v));
  auto codec = fitted_codec(train, 6);
  CHECK(decode_context(ContextCode{1, 6, std::vector<std::int32_t>(36)}, codec) == Tensor<double>({1, 28, 28}));
  for (const auto& x : train) {
    auto code = encode_context(x, codec);
    auto smooth = decode_context(code, codec);
    auto z = dct2(smooth, dct_matrix(28));
    for (int i = 0; i < 28; ++i)
      for (int j = 0; j < 28; ++j)
        if (i >= 6 || j >= 6) CHECK(std::abs(z[static_cast<std::size_t>(i) * 28 + j]) < 1e-10);
    CHECK(encode_context(smooth, codec) == code);
  }
  CHECK_THROWS_AS(decode_context(ContextCode{1, 5, std::vector<std::int32_t>(25)}, codec), std::invalid_argument);
}

TEST_CASE("normalized codes stay in [-1, 1] on arbitrary inputs") {
  std::vector<Tensor<double>> train{random_tensor<double>({3, 16, 16}, 40, 0.0, 1.0)};
  auto codec = ContextCodec::dct(3, 16, 6, 1.0, fit_normalization(train, 6));
  for (int t = 0; t < 50; ++t) {
    auto x = random_tensor<double>({3, 16, 16}, 41 + t, -100.0, 100.0);
    auto code = encode_context(x, codec);
    const auto u = normalized(code, codec);
    for (double v : u.values()) CHECK(std::abs(v) <= 1.0);
    CHECK(from_normalized(normalized(code, codec), codec) == code);
  }
}

TEST_CASE("downsample context") {
  auto codec = ContextCodec::downsample(1, 8, 2, 1.0);
  Tensor<double> flat({1, 8, 8}, 0.6);
  auto code = encode_context_downsample(flat, codec);
  for (auto c : code.coeffs) CHECK(c == code.coeffs[0]);
  auto rec = decode_context_downsample(code, codec);
  for (double v : rec.values()) CHECK(v == rec[0]);

  Tensor<double> level({1, 8, 8}, 153.0 / 255.0);
  CHECK(decode_context_downsample(encode_context_downsample(level, codec), codec) == level);

  auto id = ContextCodec::downsample(1, 8, 1, 255.0);
  Tensor<double> q = random_tensor<double>({1, 8, 8}, 50, 0.0, 255.0);
  for (double& v : q.values()) v = std::round(v);
  CHECK(decode_context_downsample(encode_context_downsample(q, id), id) == q);

  // 2x2 checkerboard averages to 0.5, reproduced within half a level.
  Tensor<double> board({1, 8, 8});
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) board[static_cast<std::size_t>(i) * 8 + j] = (i + j) % 2;
  auto br = decode_context_downsample(encode_context_downsample(board, codec), codec);
  for (double v : br.values()) {
    CHECK(v == br[0]);
    CHECK(std::abs(v - 0.5) <= 0.5 / 255.0);
  }
  CHECK_THROWS_AS(ContextCodec::downsample(1, 28, 3, 1.0), std::invalid_argument);
}

TEST_CASE("context file round trip") {
  std::vector<Tensor<double>> train{random_tensor<double>({3, 32, 32}, 60, 0.0, 255.0)};
  auto codec = ContextCodec::dct(3, 32, 6, 255.0, fit_normalization(train, 6));
  auto code = encode_context(random_tensor<double>({3, 32, 32}, 61, 0.0, 255.0), codec);
  auto bytes = serialize_context(code, codec);
  CHECK(bytes.size() == 4 + 2 + 8 + 3 * 36 * 8 + 3 * 36 * 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "DCTX");
  CHECK(bytes[10] == 6);  // d, low byte
  std::size_t used = 0;
  auto rec = parse_context(bytes, &used);
  CHECK(used == bytes.size());
  CHECK(rec.code == code);
  CHECK(rec.scale == codec.scale);
  CHECK_NOTHROW(check_record_matches(rec, codec));
  CHECK(serialize_context(rec.code, codec) == bytes);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_WITH_AS(parse_context(truncated), doctest::Contains("byte offset"), std::runtime_error);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(parse_context(bad), doctest::Contains("byte offset 0"), std::runtime_error);

  auto ds = ContextCodec::downsample(1, 28, 4, 1.0);
  auto dcode = encode(blob_digit(1), ds);
  auto dbytes = serialize_context(dcode, ds);
  CHECK(dbytes.size() == 14 + 49 * 4);
  CHECK(parse_context(dbytes).code == dcode);
}
