// SPDX-License-Identifier: Apache-2.0

#include "dctvae/context.hpp"

#include <cmath>
#include <numbers>

#include "dctvae/binary_io.hpp"
#include "dctvae/ops.hpp"

namespace dctvae {

namespace {

void require_square_planes(const Tensor<double>& x, int side, const char* what) {
  if (x.rank() != 3 || x.dim(1) != side || x.dim(2) != side)
    throw std::invalid_argument(std::string(what) + ": expected [Ch," + std::to_string(side) + "," +
                                std::to_string(side) + "], got " + shape_str(x.shape()));
}

// C X C^T when kForward, else C^T X C, per channel.
template <bool kForward>
Tensor<double> two_sided(const Tensor<double>& x, const DctBasis& basis) {
  const int D = basis.side();
  require_square_planes(x, D, kForward ? "dct2" : "idct2");
  const int ch = x.dim(0);
  Tensor<double> out(x.shape());
  std::vector<double> tmp(static_cast<std::size_t>(D) * D);
  for (int c = 0; c < ch; ++c) {
    const double* src = x.data() + static_cast<std::size_t>(c) * D * D;
    double* dst = out.data() + static_cast<std::size_t>(c) * D * D;
    // tmp = op(C) * X
    for (int k = 0; k < D; ++k)
      for (int n = 0; n < D; ++n) {
        double s = 0;
        for (int i = 0; i < D; ++i) s += (kForward ? basis(k, i) : basis(i, k)) * src[i * D + n];
        tmp[static_cast<std::size_t>(k) * D + n] = s;
      }
    // dst = tmp * op(C)^T
    for (int k = 0; k < D; ++k)
      for (int l = 0; l < D; ++l) {
        double s = 0;
        for (int j = 0; j < D; ++j) s += tmp[static_cast<std::size_t>(k) * D + j] * (kForward ? basis(l, j) : basis(j, l));
        dst[k * D + l] = s;
      }
  }
  return out;
}

std::int32_t dct_limit(double s) { return static_cast<std::int32_t>(std::floor(s)); }

}  // namespace

DctBasis::DctBasis(int side) : side_(side) {
  if (side < 1) throw std::invalid_argument("dct_matrix: side must be >= 1, got " + std::to_string(side));
  c_.resize(static_cast<std::size_t>(side) * side);
  const double d = side;
  for (int k = 0; k < side; ++k)
    for (int n = 0; n < side; ++n)
      c_[static_cast<std::size_t>(k) * side + n] =
          k == 0 ? std::sqrt(1.0 / d) : std::sqrt(2.0 / d) * std::cos(std::numbers::pi / d * (n + 0.5) * k);
}

DctBasis dct_matrix(int side) { return DctBasis(side); }

Tensor<double> dct2(const Tensor<double>& x, const DctBasis& basis) { return two_sided<true>(x, basis); }
Tensor<double> idct2(const Tensor<double>& z, const DctBasis& basis) { return two_sided<false>(z, basis); }

Tensor<double> crop_low(const Tensor<double>& z, int d) {
  if (z.rank() != 3 || z.dim(1) != z.dim(2) || d < 1 || d > z.dim(1))
    throw std::invalid_argument("crop_low: cannot keep " + std::to_string(d) + "x" + std::to_string(d) + " of " +
                                shape_str(z.shape()));
  const int D = z.dim(1);
  Tensor<double> out({z.dim(0), d, d});
  for (int c = 0; c < z.dim(0); ++c)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) out[(static_cast<std::size_t>(c) * d + i) * d + j] = z[(static_cast<std::size_t>(c) * D + i) * D + j];
  return out;
}

Tensor<double> zero_pad(const Tensor<double>& z, int side) {
  if (z.rank() != 3 || z.dim(1) != z.dim(2) || z.dim(1) > side)
    throw std::invalid_argument("zero_pad: cannot pad " + shape_str(z.shape()) + " to side " + std::to_string(side));
  const int d = z.dim(1);
  Tensor<double> out({z.dim(0), side, side});
  for (int c = 0; c < z.dim(0); ++c)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) out[(static_cast<std::size_t>(c) * side + i) * side + j] = z[(static_cast<std::size_t>(c) * d + i) * d + j];
  return out;
}

NormalizationFit::NormalizationFit(int channels, int side, int context_side)
    : basis_(side), context_side_(context_side), max_({channels, context_side, context_side}) {
  if (context_side < 1 || context_side > side)
    throw std::invalid_argument("fit_normalization: context side " + std::to_string(context_side) +
                                " outside [1, " + std::to_string(side) + "]");
}

void NormalizationFit::add(const Tensor<double>& image) {
  if (image.rank() != 3 || image.dim(0) != max_.dim(0))
    throw std::invalid_argument("fit_normalization: image " + shape_str(image.shape()) + " does not have " +
                                std::to_string(max_.dim(0)) + " channels");
  const auto z = crop_low(dct2(image, basis_), context_side_);
  for (std::size_t i = 0; i < z.size(); ++i) max_[i] = std::max(max_[i], std::abs(z[i]));
  ++count_;
}

Tensor<double> NormalizationFit::result() const {
  if (count_ == 0) throw std::invalid_argument("fit_normalization: empty training set");
  Tensor<double> s = max_;
  for (double& v : s.values()) v = std::max(v, kScaleFloor);
  return s;
}

Tensor<double> fit_normalization(std::span<const Tensor<double>> images, int context_side) {
  if (images.empty()) throw std::invalid_argument("fit_normalization: empty training set");
  const auto& first = images.front();
  if (first.rank() != 3) throw std::invalid_argument("fit_normalization: expected [Ch,D,D], got " + shape_str(first.shape()));
  NormalizationFit fit(first.dim(0), first.dim(1), context_side);
  for (const auto& im : images) fit.add(im);
  return fit.result();
}

const char* context_mode_name(ContextMode m) { return m == ContextMode::kDct ? "dct" : "downsample"; }

ContextMode parse_context_mode(const std::string& s) {
  if (s == "dct") return ContextMode::kDct;
  if (s == "downsample") return ContextMode::kDownsample;
  throw std::invalid_argument("unknown context mode '" + s + "'");
}

ContextCodec ContextCodec::dct(int channels, int side, int context_side, double pixel_max, Tensor<double> scale) {
  ContextCodec c;
  c.mode = ContextMode::kDct;
  c.channels = channels;
  c.side = side;
  c.context_side = context_side;
  c.window = 1;
  c.pixel_max = pixel_max;
  c.scale = std::move(scale);
  c.validate();
  return c;
}

ContextCodec ContextCodec::downsample(int channels, int side, int window, double pixel_max) {
  ContextCodec c;
  c.mode = ContextMode::kDownsample;
  c.channels = channels;
  c.side = side;
  c.context_side = side / std::max(window, 1);
  c.window = window;
  c.pixel_max = pixel_max;
  c.validate();
  return c;
}

int ContextCodec::code_side() const { return mode == ContextMode::kDct ? context_side : side / window; }

bool ContextCodec::fitted() const {
  return mode == ContextMode::kDownsample || scale.shape() == Shape{channels, context_side, context_side};
}

void ContextCodec::validate() const {
  if (channels < 1 || side < 1) throw std::invalid_argument("context codec: channels and side must be positive");
  if (!(pixel_max > 0)) throw std::invalid_argument("context codec: pixel_max must be positive");
  if (mode == ContextMode::kDct) {
    if (context_side < 1 || context_side > side)
      throw std::invalid_argument("context codec: context side " + std::to_string(context_side) + " outside [1, " +
                                  std::to_string(side) + "]");
    if (!scale.empty()) {
      if (scale.shape() != Shape{channels, context_side, context_side})
        throw std::invalid_argument("context codec: normalization shape " + shape_str(scale.shape()) +
                                    " does not match " + shape_str({channels, context_side, context_side}));
      for (double s : scale.values())
        if (!(s >= kScaleFloor) || !std::isfinite(s))
          throw std::invalid_argument("context codec: normalization entry below floor");
    }
  } else {
    if (window < 1 || side % window != 0)
      throw std::invalid_argument("context codec: side " + std::to_string(side) + " not divisible by window " +
                                  std::to_string(window));
  }
}

namespace {

void require_code(const ContextCode& code, const ContextCodec& codec) {
  if (code.channels != codec.channels || code.side != codec.code_side() || code.coeffs.size() != codec.code_size())
    throw std::invalid_argument("context code [" + std::to_string(code.channels) + "," + std::to_string(code.side) +
                                "," + std::to_string(code.side) + "] does not match codec " +
                                shape_str(codec.code_shape()));
}

void require_fitted(const ContextCodec& codec) {
  if (!codec.fitted()) throw std::invalid_argument("context codec has no fitted normalization");
}

}  // namespace

ContextCode encode_context(const Tensor<double>& x, const ContextCodec& codec) {
  if (codec.mode != ContextMode::kDct) throw std::invalid_argument("encode_context: codec is not in dct mode");
  require_fitted(codec);
  require_square_planes(x, codec.side, "encode_context");
  if (x.dim(0) != codec.channels) throw std::invalid_argument("encode_context: channel count mismatch");
  const auto z = crop_low(dct2(x, DctBasis(codec.side)), codec.context_side);
  ContextCode code{codec.channels, codec.context_side, std::vector<std::int32_t>(z.size())};
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double s = codec.scale[i];
    const double n = std::clamp(z[i] / s, -1.0, 1.0);
    const auto lim = dct_limit(s);
    code.coeffs[i] = std::clamp(static_cast<std::int32_t>(std::lround(n * s)), -lim, lim);
  }
  return code;
}

Tensor<double> decode_context(const ContextCode& code, const ContextCodec& codec) {
  if (codec.mode != ContextMode::kDct) throw std::invalid_argument("decode_context: codec is not in dct mode");
  require_code(code, codec);
  Tensor<double> z(codec.code_shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = code.coeffs[i];
  return idct2(zero_pad(z, codec.side), DctBasis(codec.side));
}

ContextCode encode_context_downsample(const Tensor<double>& x, const ContextCodec& codec) {
  if (codec.mode != ContextMode::kDownsample) throw std::invalid_argument("encode_context_downsample: codec is not in downsample mode");
  codec.validate();
  require_square_planes(x, codec.side, "encode_context_downsample");
  if (x.dim(0) != codec.channels) throw std::invalid_argument("encode_context_downsample: channel count mismatch");
  const auto pooled = avg_pool(x, codec.window);
  ContextCode code{codec.channels, codec.code_side(), std::vector<std::int32_t>(pooled.size())};
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    const double u = std::clamp(pooled[i] / codec.pixel_max, 0.0, 1.0);
    code.coeffs[i] = static_cast<std::int32_t>(std::lround(u * 255.0));
  }
  return code;
}

Tensor<double> decode_context_downsample(const ContextCode& code, const ContextCodec& codec) {
  if (codec.mode != ContextMode::kDownsample) throw std::invalid_argument("decode_context_downsample: codec is not in downsample mode");
  require_code(code, codec);
  Tensor<double> small(codec.code_shape());
  for (std::size_t i = 0; i < small.size(); ++i) small[i] = code.coeffs[i] * codec.pixel_max / 255.0;
  return nearest_upsample(small, codec.window);
}

ContextCode encode(const Tensor<double>& x, const ContextCodec& codec) {
  return codec.mode == ContextMode::kDct ? encode_context(x, codec) : encode_context_downsample(x, codec);
}

Tensor<double> decode(const ContextCode& code, const ContextCodec& codec) {
  return codec.mode == ContextMode::kDct ? decode_context(code, codec) : decode_context_downsample(code, codec);
}

Tensor<double> normalized(const ContextCode& code, const ContextCodec& codec) {
  require_code(code, codec);
  Tensor<double> u(codec.code_shape());
  for (std::size_t i = 0; i < u.size(); ++i)
    u[i] = codec.mode == ContextMode::kDct ? code.coeffs[i] / codec.scale[i] : code.coeffs[i] / 127.5 - 1.0;
  return u;
}

ContextCode from_normalized(const Tensor<double>& u, const ContextCodec& codec) {
  require_fitted(codec);
  if (u.shape() != codec.code_shape())
    throw std::invalid_argument("from_normalized: shape " + shape_str(u.shape()) + " does not match " +
                                shape_str(codec.code_shape()));
  ContextCode code{codec.channels, codec.code_side(), std::vector<std::int32_t>(u.size())};
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double v = std::isfinite(u[i]) ? std::clamp(u[i], -1.0, 1.0) : 0.0;
    if (codec.mode == ContextMode::kDct) {
      const auto lim = dct_limit(codec.scale[i]);
      code.coeffs[i] = std::clamp(static_cast<std::int32_t>(std::lround(v * codec.scale[i])), -lim, lim);
    } else {
      code.coeffs[i] = static_cast<std::int32_t>(std::lround((v + 1.0) * 127.5));
    }
  }
  return code;
}

Tensor<double> bin_halfwidth(const ContextCodec& codec) {
  require_fitted(codec);
  Tensor<double> h(codec.code_shape(), 1.0 / 255.0);
  if (codec.mode == ContextMode::kDct)
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = 0.5 / codec.scale[i];
  return h;
}

Tensor<double> grid_edge(const ContextCodec& codec) {
  require_fitted(codec);
  Tensor<double> e(codec.code_shape(), 1.0);
  if (codec.mode == ContextMode::kDct)
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = dct_limit(codec.scale[i]) / codec.scale[i];
  return e;
}

std::vector<std::uint8_t> serialize_context(const ContextCode& code, const ContextCodec& codec) {
  require_code(code, codec);
  ByteWriter w;
  w.put_tag("DCTX");
  w.put(kContextFormatVersion);
  w.put(static_cast<std::uint8_t>(codec.mode));
  for (int v : {codec.channels, codec.side, codec.context_side, codec.window}) {
    if (v < 0 || v > 0xFFFF) throw std::invalid_argument("serialize_context: header field out of u16 range");
    w.put(static_cast<std::uint16_t>(v));
  }
  if (codec.mode == ContextMode::kDct)
    for (double s : codec.scale.values()) w.put(s);
  for (auto c : code.coeffs) w.put(c);
  return w.take();
}

ContextRecord parse_context(std::span<const std::uint8_t> bytes, std::size_t* consumed) {
  ByteReader r(bytes);
  r.expect_tag("DCTX");
  const auto version = r.get<std::uint8_t>("version");
  if (version != kContextFormatVersion) r.fail("unsupported context version " + std::to_string(version));
  const auto mode = r.get<std::uint8_t>("mode");
  if (mode > 1) r.fail("unknown context mode " + std::to_string(mode));
  ContextRecord rec;
  rec.mode = static_cast<ContextMode>(mode);
  rec.channels = r.get<std::uint16_t>("channels");
  rec.side = r.get<std::uint16_t>("side");
  rec.context_side = r.get<std::uint16_t>("context side");
  rec.window = r.get<std::uint16_t>("window");
  if (rec.channels < 1 || rec.side < 1) r.fail("empty context dimensions");
  int code_side = 0;
  if (rec.mode == ContextMode::kDct) {
    if (rec.context_side < 1 || rec.context_side > rec.side) r.fail("context side outside [1, side]");
    code_side = rec.context_side;
    rec.scale = Tensor<double>({rec.channels, code_side, code_side});
    for (double& s : rec.scale.values()) s = r.get<double>("normalization");
  } else {
    if (rec.window < 1 || rec.side % rec.window) r.fail("side not divisible by window");
    code_side = rec.side / rec.window;
  }
  rec.code.channels = rec.channels;
  rec.code.side = code_side;
  rec.code.coeffs.resize(static_cast<std::size_t>(rec.channels) * code_side * code_side);
  for (auto& c : rec.code.coeffs) c = r.get<std::int32_t>("coefficients");
  if (consumed) *consumed = r.pos();
  return rec;
}

void check_record_matches(const ContextRecord& rec, const ContextCodec& codec) {
  const bool same = rec.mode == codec.mode && rec.channels == codec.channels && rec.side == codec.side &&
                    rec.code.side == codec.code_side() &&
                    (rec.mode == ContextMode::kDownsample || rec.scale == codec.scale);
  if (!same) throw std::invalid_argument("context record header does not match the model's codec");
}

}  // namespace dctvae
