// SPDX-License-Identifier: Apache-2.0
//
// Fixed, non-trainable context transforms: a cropped and quantized 2-D DCT,
// and an average-pooling alternative.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dctvae/tensor.hpp"

namespace dctvae {

// Orthonormal DCT-II matrix, row k holds frequency k.
class DctBasis {
 public:
  explicit DctBasis(int side);

  int side() const { return side_; }
  double operator()(int k, int n) const { return c_[static_cast<std::size_t>(k) * side_ + n]; }
  std::span<const double> matrix() const { return c_; }

 private:
  int side_;
  std::vector<double> c_;
};

DctBasis dct_matrix(int side);

// Per-channel C x C^T over a [Ch, D, D] tensor.
Tensor<double> dct2(const Tensor<double>& x, const DctBasis& basis);
// Per-channel C^T z C.
Tensor<double> idct2(const Tensor<double>& z, const DctBasis& basis);

// Keeps the top-left d x d block of each channel.
Tensor<double> crop_low(const Tensor<double>& z, int d);
// Inverse of crop_low with zeros in the discarded block.
Tensor<double> zero_pad(const Tensor<double>& z, int side);

inline constexpr double kScaleFloor = 1e-6;

// Streaming elementwise max of |crop(dct2(x))|.
class NormalizationFit {
 public:
  NormalizationFit(int channels, int side, int context_side);
  void add(const Tensor<double>& image);
  std::size_t count() const { return count_; }
  // Floored at kScaleFloor. Throws if no image was added.
  Tensor<double> result() const;

 private:
  DctBasis basis_;
  int context_side_;
  Tensor<double> max_;
  std::size_t count_ = 0;
};

Tensor<double> fit_normalization(std::span<const Tensor<double>> images, int context_side);

enum class ContextMode : std::uint8_t { kDct = 0, kDownsample = 1 };

const char* context_mode_name(ContextMode m);
ContextMode parse_context_mode(const std::string& s);

struct ContextCodec {
  ContextMode mode = ContextMode::kDct;
  int channels = 1;
  int side = 28;          // D
  int context_side = 6;   // d, dct mode
  int window = 4;         // v, downsample mode
  double pixel_max = 1.0; // pixel range is [0, pixel_max]
  Tensor<double> scale;   // S, [Ch, d, d], dct mode

  static ContextCodec dct(int channels, int side, int context_side, double pixel_max, Tensor<double> scale);
  static ContextCodec downsample(int channels, int side, int window, double pixel_max);

  // Side of the stored code grid: d, or D / v.
  int code_side() const;
  Shape code_shape() const { return {channels, code_side(), code_side()}; }
  std::size_t code_size() const { return shape_size(code_shape()); }
  bool fitted() const;
  // Throws std::invalid_argument naming the violated constraint.
  void validate() const;
};

struct ContextCode {
  int channels = 0;
  int side = 0;
  std::vector<std::int32_t> coeffs;  // row-major per channel

  friend bool operator==(const ContextCode&, const ContextCode&) = default;
};

ContextCode encode_context(const Tensor<double>& x, const ContextCodec& codec);
Tensor<double> decode_context(const ContextCode& code, const ContextCodec& codec);

// 256 uniform levels over [0, pixel_max].
ContextCode encode_context_downsample(const Tensor<double>& x, const ContextCodec& codec);
Tensor<double> decode_context_downsample(const ContextCode& code, const ContextCodec& codec);

// Mode-dispatching forms.
ContextCode encode(const Tensor<double>& x, const ContextCodec& codec);
Tensor<double> decode(const ContextCode& code, const ContextCodec& codec);

// View of a code on the [-1, 1] grid seen by the diffusion prior.
Tensor<double> normalized(const ContextCode& code, const ContextCodec& codec);
// Nearest grid point for each normalized value (clamped to the grid).
ContextCode from_normalized(const Tensor<double>& u, const ContextCodec& codec);
// Per-coordinate half bin width on the normalized grid.
Tensor<double> bin_halfwidth(const ContextCodec& codec);
// Largest representable normalized magnitude per coordinate; bins touching it
// extend to infinity.
Tensor<double> grid_edge(const ContextCodec& codec);

// Binary context record, little-endian:
// "DCTX" | version u8 | mode u8 | Ch, D, d, v as u16 | S as f64 (dct mode) |
// coefficients as i32.
inline constexpr std::uint8_t kContextFormatVersion = 1;

std::vector<std::uint8_t> serialize_context(const ContextCode& code, const ContextCodec& codec);

struct ContextRecord {
  ContextMode mode;
  int channels, side, context_side, window;
  Tensor<double> scale;
  ContextCode code;
};
// Throws std::runtime_error with the byte offset on malformed input.
ContextRecord parse_context(std::span<const std::uint8_t> bytes, std::size_t* consumed = nullptr);
// Throws if the header disagrees with the codec.
void check_record_matches(const ContextRecord& rec, const ContextCodec& codec);

}  // namespace dctvae
