// SPDX-License-Identifier: Apache-2.0

#include "dctvae/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dctvae/binary_io.hpp"
#include "dctvae/ops.hpp"
#include "json.hpp"

namespace dctvae {
namespace {

Tensor<double> rows(const Tensor<double>& all, int start, int count) {
  Shape s = all.shape();
  const std::size_t per = all.size() / static_cast<std::size_t>(s[0]);
  s[0] = count;
  Tensor<double> out(s);
  std::copy_n(all.data() + static_cast<std::size_t>(start) * per, static_cast<std::size_t>(count) * per, out.data());
  return out;
}

// Sum over all but the leading extent of log N(z; m, exp(ls)), without the
// constant term.
template <class T>
void add_log_density(const Tensor<T>& z, const Tensor<T>& m, const Tensor<T>& ls, double sign, std::vector<double>& acc) {
  const std::size_t per = z.size() / acc.size();
  for (std::size_t b = 0; b < acc.size(); ++b) {
    double s = 0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      const double u = (static_cast<double>(z[i]) - m[i]) / std::exp(static_cast<double>(ls[i]));
      s += -static_cast<double>(ls[i]) - 0.5 * u * u;
    }
    acc[b] += sign * s;
  }
}

// Separable valid Gaussian filter of one plane.
std::vector<double> gaussian_window() {
  std::vector<double> w(kSsimWindow);
  double total = 0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
    total += w[static_cast<std::size_t>(i)];
  }
  for (auto& v : w) v /= total;
  return w;
}

std::vector<double> filter_valid(const std::vector<double>& img, int h, int w, const std::vector<double>& win) {
  const int k = static_cast<int>(win.size());
  const int ho = h - k + 1, wo = w - k + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * wo, 0.0), out(static_cast<std::size_t>(ho) * wo, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < wo; ++x) {
      double s = 0;
      for (int i = 0; i < k; ++i) s += win[static_cast<std::size_t>(i)] * img[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * wo + x] = s;
    }
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      double s = 0;
      for (int i = 0; i < k; ++i) s += win[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(y + i) * wo + x];
      out[static_cast<std::size_t>(y) * wo + x] = s;
    }
  return out;
}

std::vector<double> halve(const std::vector<double>& img, int h, int w) {
  const int ho = h / 2, wo = w / 2;
  std::vector<double> out(static_cast<std::size_t>(ho) * wo);
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      const std::size_t a = static_cast<std::size_t>(2 * y) * w + 2 * x;
      out[static_cast<std::size_t>(y) * wo + x] = 0.25 * (img[a] + img[a + 1] + img[a + w] + img[a + w + 1]);
    }
  return out;
}

// Mean contrast-structure and mean SSIM over one plane.
std::pair<double, double> ssim_terms(const std::vector<double>& x, const std::vector<double>& y, int h, int w,
                                     double range, const std::vector<double>& win) {
  const double c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter_valid(x, h, w, win), my = filter_valid(y, h, w, win);
  const auto sxx = filter_valid(xx, h, w, win), syy = filter_valid(yy, h, w, win), sxy = filter_valid(xy, h, w, win);
  double cs = 0, ssim = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
    const double c = (2 * cov + c2) / (vx + vy + c2);
    const double l = (2 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
    cs += c;
    ssim += l * c;
  }
  return {cs / mx.size(), ssim / mx.size()};
}

void require_same_image(const Tensor<double>& x, const Tensor<double>& y, const char* op) {
  if (x.shape() != y.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(y.shape()));
  if (x.rank() != 2 && x.rank() != 3)
    throw std::invalid_argument(std::string(op) + ": expected [H,W] or [C,H,W], got " + shape_str(x.shape()));
}

std::string method_tag(bool context, int layers) {
  return context ? "dct-vae context" : "baseline top-" + std::to_string(layers);
}

template <class T>
Tensor<double> to_unit(const Hvae<T>& vae, const TopDownResult<T>& r) {
  const Tensor<T> mean = vae.mean_image(r);
  const bool binary = vae.config().likelihood == Likelihood::kBernoulli;
  Tensor<double> out(mean.shape());
  for (std::size_t i = 0; i < mean.size(); ++i) out[i] = binary ? mean[i] : 0.5 * (static_cast<double>(mean[i]) + 1.0);
  return out;
}

}  // namespace

double bits_per_dim(double nats, std::size_t dims) { return nats / (static_cast<double>(dims) * std::numbers::ln2); }

template <class T>
NllResult nll_bound(const JointModel<T>& model, const Tensor<double>& pixels, int k, std::uint64_t seed,
                    int batch_size) {
  if (k < 1) throw std::invalid_argument("nll_bound: importance samples must be >= 1");
  const ModelConfig& cfg = model.model_config();
  const std::size_t dims = static_cast<std::size_t>(cfg.image_channels) * cfg.image_side * cfg.image_side;
  NllResult out;
  out.importance_samples = k;
  if (k == 1) {
    out.per_item = evaluate_bound(model, pixels, batch_size, seed).total;
  } else {
    if (pixels.rank() != 4 || pixels.dim(0) < 1) throw std::invalid_argument("nll_bound: empty evaluation set");
    const int n = pixels.dim(0);
    for (int b0 = 0, chunk = 0; b0 < n; b0 += batch_size, ++chunk) {
      const int bn = std::min(batch_size, n - b0);
      const auto batch = make_batch(model, rows(pixels, b0, bn));
      std::vector<std::vector<double>> logw(static_cast<std::size_t>(bn));
      std::vector<double> diffusion(static_cast<std::size_t>(bn), 0.0);
      for (int s = 0; s < k; ++s) {
        Rng rng(derive_seed(seed, 0x1f, static_cast<std::uint64_t>(chunk), static_cast<std::uint64_t>(s)));
        const auto noise = draw_objective_noise(model, bn, false, rng);
        Tape<T> tape;
        const auto obj = joint_objective(tape, model, batch, noise);
        std::vector<double> w(static_cast<std::size_t>(bn), 0.0);
        for (const auto& layer : obj.hierarchy.layers) {
          add_log_density(layer.z.value(), layer.p_mean.value(), layer.p_logstd.value(), 1.0, w);
          add_log_density(layer.z.value(), layer.q_mean->value(), layer.q_logstd->value(), -1.0, w);
        }
        for (int b = 0; b < bn; ++b) {
          logw[static_cast<std::size_t>(b)].push_back(w[static_cast<std::size_t>(b)] - obj.recon[static_cast<std::size_t>(b)]);
          if (s == 0) diffusion[static_cast<std::size_t>(b)] = obj.diffusion[static_cast<std::size_t>(b)];
        }
      }
      for (int b = 0; b < bn; ++b) {
        const auto& lw = logw[static_cast<std::size_t>(b)];
        const double mx = *std::max_element(lw.begin(), lw.end());
        double acc = 0;
        for (double v : lw) acc += std::exp(v - mx);
        out.per_item.push_back(-(mx + std::log(acc / k)) + diffusion[static_cast<std::size_t>(b)]);
      }
    }
  }
  out.nats = std::accumulate(out.per_item.begin(), out.per_item.end(), 0.0) / out.per_item.size();
  out.bits_per_dim = bits_per_dim(out.nats, dims);
  return out;
}

int msssim_max_scales(int height, int width) {
  const int side = std::min(height, width);
  int s = 0;
  while (s < static_cast<int>(kMsssimWeights.size()) && side >= (1 << s) * kSsimWindow) ++s;
  return s;
}

double msssim(const Tensor<double>& x, const Tensor<double>& y, double data_range, int scales,
              std::span<const double> weights) {
  require_same_image(x, y, "msssim");
  if (scales < 1 || static_cast<int>(weights.size()) != scales)
    throw std::invalid_argument("msssim: need one weight per scale, got " + std::to_string(weights.size()) +
                                " weights for " + std::to_string(scales) + " scales");
  if (!(data_range > 0)) throw std::invalid_argument("msssim: data_range must be positive");
  const int h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const int min_side = (1 << (scales - 1)) * kSsimWindow;
  if (std::min(h, w) < min_side)
    throw std::invalid_argument("msssim: " + std::to_string(scales) + " scales need sides of at least " +
                                std::to_string(min_side) + " pixels, got " + std::to_string(h) + "x" +
                                std::to_string(w));
  const int channels = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto win = gaussian_window();
  std::vector<double> cs(static_cast<std::size_t>(scales), 0.0);
  double ssim_last = 0;
  for (int c = 0; c < channels; ++c) {
    std::vector<double> px(x.data() + c * plane, x.data() + (c + 1) * plane);
    std::vector<double> py(y.data() + c * plane, y.data() + (c + 1) * plane);
    int ch = h, cw = w;
    for (int s = 0; s < scales; ++s) {
      const auto [csv, ssimv] = ssim_terms(px, py, ch, cw, data_range, win);
      cs[static_cast<std::size_t>(s)] += csv / channels;
      if (s == scales - 1) ssim_last += ssimv / channels;
      if (s + 1 < scales) {
        px = halve(px, ch, cw);
        py = halve(py, ch, cw);
        ch /= 2;
        cw /= 2;
      }
    }
  }
  double out = 1.0;
  for (int s = 0; s + 1 < scales; ++s)
    out *= std::pow(std::max(cs[static_cast<std::size_t>(s)], 0.0), weights[static_cast<std::size_t>(s)]);
  out *= std::pow(std::max(ssim_last, 0.0), weights[static_cast<std::size_t>(scales - 1)]);
  return std::clamp(out, 0.0, 1.0);
}

double msssim(const Tensor<double>& x, const Tensor<double>& y, double data_range) {
  require_same_image(x, y, "msssim");
  const int h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const int scales = msssim_max_scales(h, w);
  if (scales < 1)
    throw std::invalid_argument("msssim: images need sides of at least " + std::to_string(kSsimWindow) +
                                " pixels, got " + std::to_string(h) + "x" + std::to_string(w));
  std::vector<double> wts(kMsssimWeights.begin(), kMsssimWeights.begin() + scales);
  const double total = std::accumulate(wts.begin(), wts.end(), 0.0);
  for (auto& v : wts) v /= total;
  return msssim(x, y, data_range, scales, wts);
}

double psnr(const Tensor<double>& x, const Tensor<double>& y, double max_value) {
  if (x.shape() != y.shape())
    throw std::invalid_argument("psnr: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  if (x.empty()) throw std::invalid_argument("psnr: empty images");
  double se = 0;
  for (std::size_t i = 0; i < x.size(); ++i) se += (x[i] - y[i]) * (x[i] - y[i]);
  if (se == 0) return kPsnrIdentical;
  return 10.0 * std::log10(max_value * max_value / (se / x.size()));
}

template <class T>
Tensor<double> partial_reconstruction(const JointModel<T>& model, const Batch<T>& batch, int m, double tau,
                                      const NoiseBank<T>& noise, Rng& prior_rng) {
  const Hvae<T>& vae = model.vae();
  const ModelConfig& cfg = model.model_config();
  const SampleRequest req{SampleMode::kPartial, m, tau};
  const int offset = cfg.has_context() ? 1 : 0;
  Tape<T> tape;
  std::optional<Var<T>> ctx;
  if (const ContextCodec* codec = model.codec()) {
    if (m >= 1) {
      ctx = tape.constant(batch.context_image);
    } else {
      const auto y = ancestral_sample(*model.prior(), model.schedule(), model.context_grid(), codec->code_shape(),
                                      batch.size(), prior_rng);
      std::vector<ContextCode> codes;
      const std::size_t per = codec->code_size();
      for (int b = 0; b < batch.size(); ++b) {
        Tensor<double> u(codec->code_shape());
        for (std::size_t i = 0; i < per; ++i) u[i] = y[b * per + i];
        codes.push_back(from_normalized(u, *codec));
      }
      ctx = tape.constant(context_images(model, codes));
    }
  }
  std::vector<Var<T>> features;
  if (req.posterior_slots(cfg.slots()) > offset) features = vae.bottom_up(tape, tape.constant(vae.encoder_input(batch.target)));
  const auto r = vae.top_down(tape, features.empty() ? nullptr : &features, ctx, req, noise);
  return to_unit(vae, r);
}

template <class T>
std::vector<double> partial_recon_sweep(const JointModel<T>& model, const Tensor<double>& pixels,
                                        std::span<const int> m_values, std::uint64_t seed, int batch_size) {
  if (pixels.rank() != 4 || pixels.dim(0) < 1) throw std::invalid_argument("partial_recon_sweep: empty test set");
  const ModelConfig& cfg = model.model_config();
  for (int m : m_values)
    if (m < 0 || m > cfg.slots())
      throw std::invalid_argument("partial_recon_sweep: m=" + std::to_string(m) + " outside [0, " +
                                  std::to_string(cfg.slots()) + "]");
  const double to_unit_scale = 1.0 / model.pixel_max();
  std::vector<double> sums(m_values.size(), 0.0);
  const int n = pixels.dim(0);
  for (int b0 = 0, chunk = 0; b0 < n; b0 += batch_size, ++chunk) {
    const int bn = std::min(batch_size, n - b0);
    const auto batch = make_batch(model, rows(pixels, b0, bn));
    Rng noise_rng(derive_seed(seed, 0x5e, static_cast<std::uint64_t>(chunk)));
    const auto noise = draw_noise<T>(cfg, bn, noise_rng);
    const Shape item{cfg.image_channels, cfg.image_side, cfg.image_side};
    const std::size_t per = shape_size(item);
    for (std::size_t j = 0; j < m_values.size(); ++j) {
      Rng prior_rng(derive_seed(seed, 0x5f, static_cast<std::uint64_t>(chunk)));
      const auto rec = partial_reconstruction(model, batch, m_values[j], 1.0, noise, prior_rng);
      for (int b = 0; b < bn; ++b) {
        Tensor<double> a(item), r(item);
        for (std::size_t i = 0; i < per; ++i) {
          a[i] = batch.pixels[b * per + i] * to_unit_scale;
          r[i] = rec[b * per + i];
        }
        sums[j] += msssim(a, r, 1.0);
      }
    }
  }
  for (auto& s : sums) s /= n;
  return sums;
}

Tensor<double> extract_patches(const Tensor<double>& planar, const PatchGrid& grid) {
  if (planar.rank() != 3 || planar.dim(1) != grid.height || planar.dim(2) != grid.width)
    throw std::invalid_argument("extract_patches: image " + shape_str(planar.shape()) + " does not match the grid");
  if (grid.patch < 1) throw std::invalid_argument("extract_patches: patch size must be positive");
  const int c = planar.dim(0), p = grid.patch;
  Tensor<double> out({grid.count(), c, p, p});
  for (int ty = 0; ty < grid.rows(); ++ty)
    for (int tx = 0; tx < grid.cols(); ++tx) {
      const int n = ty * grid.cols() + tx;
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x) {
            const int sy = std::min(ty * p + y, grid.height - 1), sx = std::min(tx * p + x, grid.width - 1);
            out.at(n, ch, y, x) = planar[(static_cast<std::size_t>(ch) * grid.height + sy) * grid.width + sx];
          }
    }
  return out;
}

Tensor<double> stitch_patches(const Tensor<double>& patches, const PatchGrid& grid) {
  if (patches.rank() != 4 || patches.dim(0) != grid.count() || patches.dim(2) != grid.patch ||
      patches.dim(3) != grid.patch)
    throw std::invalid_argument("stitch_patches: patches " + shape_str(patches.shape()) + " do not match the grid");
  const int c = patches.dim(1), p = grid.patch;
  Tensor<double> out({c, grid.height, grid.width});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < grid.height; ++y)
      for (int x = 0; x < grid.width; ++x)
        out[(static_cast<std::size_t>(ch) * grid.height + y) * grid.width + x] =
            patches.at((y / p) * grid.cols() + x / p, ch, y % p, x % p);
  return out;
}

std::string RateDistortionRecord::to_json() const {
  nlohmann::ordered_json j;
  j["image_id"] = image_id;
  j["bpp"] = bpp;
  if (std::isinf(psnr))
    j["psnr"] = "inf";
  else
    j["psnr"] = psnr;
  j["msssim"] = msssim;
  j["method"] = method;
  return j.dump();
}

template <class T>
RgbImage decompress_image(std::span<const std::uint8_t> bitstream, const JointModel<T>& model,
                          const CompressOptions& options) {
  const ContextCodec* codec = model.codec();
  if (!codec) throw std::invalid_argument("decompress_image: model has no context codec");
  ByteReader r(bitstream);
  r.expect_tag("DCTI");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kImageFormatVersion) r.fail("unsupported image bitstream version " + std::to_string(version));
  PatchGrid grid;
  grid.width = static_cast<int>(r.get<std::uint32_t>("width"));
  grid.height = static_cast<int>(r.get<std::uint32_t>("height"));
  grid.patch = model.model_config().image_side;
  const auto n = r.get<std::uint32_t>("patch count");
  if (grid.width < 1 || grid.height < 1 || static_cast<int>(n) != grid.count())
    r.fail("patch count " + std::to_string(n) + " does not match a " + std::to_string(grid.width) + "x" +
           std::to_string(grid.height) + " image");
  std::vector<ContextCode> codes;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::size_t used = 0;
    const std::size_t at = r.pos();
    ContextRecord rec;
    try {
      rec = parse_context(r.get_bytes(r.remaining(), "context record"), &used);
    } catch (const FormatError& e) {
      throw FormatError(std::string("context record ") + std::to_string(i) + ": " + e.what(), at);
    }
    check_record_matches(rec, *codec);
    codes.push_back(std::move(rec.code));
    r = ByteReader(bitstream);
    (void)r.get_bytes(at + used, "records");
  }
  if (r.remaining() != 0) r.fail("trailing bytes after the last context record");

  const ModelConfig& cfg = model.model_config();
  const Hvae<T>& vae = model.vae();
  const int c = cfg.image_channels, p = cfg.image_side;
  Tensor<double> patches({grid.count(), c, p, p});
  const std::size_t per = static_cast<std::size_t>(c) * p * p;
  for (int b0 = 0, chunk = 0; b0 < grid.count(); b0 += options.batch_size, ++chunk) {
    const int bn = std::min(options.batch_size, grid.count() - b0);
    const std::vector<ContextCode> part(codes.begin() + b0, codes.begin() + b0 + bn);
    Rng rng(derive_seed(options.seed, 0xc0, static_cast<std::uint64_t>(chunk)));
    const auto noise = draw_noise<T>(cfg, bn, rng);
    Tape<T> tape;
    const auto rec = vae.top_down(tape, nullptr, tape.constant(context_images(model, part)),
                                  SampleRequest{SampleMode::kPartial, 1, options.tau}, noise);
    const auto unit = to_unit(vae, rec);
    for (std::size_t i = 0; i < static_cast<std::size_t>(bn) * per; ++i)
      patches[static_cast<std::size_t>(b0) * per + i] = unit[i] * 255.0;
  }
  return from_planar(stitch_patches(patches, grid));
}

template <class T>
CompressionResult compress_image(const RgbImage& image, const JointModel<T>& model, const CompressOptions& options) {
  const ModelConfig& cfg = model.model_config();
  if (cfg.image_channels != 3 || cfg.likelihood != Likelihood::kDiscretizedGaussian)
    throw std::invalid_argument("compress_image: needs an RGB model with a discretized Gaussian likelihood");
  if (options.batch_size < 1) throw std::invalid_argument("compress_image: batch_size must be positive");
  if (!(options.tau >= 0)) throw std::invalid_argument("compress_image: tau must be non-negative");
  PatchGrid grid{image.width, image.height, cfg.image_side};
  const Tensor<double> planar = to_planar(image);
  const Tensor<double> patches = extract_patches(planar, grid);
  const std::size_t per = static_cast<std::size_t>(3) * grid.patch * grid.patch;

  CompressionResult out;
  ByteWriter w;
  w.put_tag("DCTI");
  w.put<std::uint16_t>(kImageFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(grid.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(grid.height));
  const ContextCodec* codec = model.codec();
  w.put<std::uint32_t>(codec ? static_cast<std::uint32_t>(grid.count()) : 0u);

  double nats = 0;
  if (codec) {
    if (!model.prior()) throw std::invalid_argument("compress_image: context model has no trained prior");
    Tensor<double> ctx_patches({grid.count(), 3, grid.patch, grid.patch});
    for (int b0 = 0, chunk = 0; b0 < grid.count(); b0 += options.batch_size, ++chunk) {
      const int bn = std::min(options.batch_size, grid.count() - b0);
      const auto batch = make_batch(model, rows(patches, b0, bn));
      for (const auto& code : batch.codes) w.put_bytes(serialize_context(code, *codec));
      Shape ys = codec->code_shape();
      ys.insert(ys.begin(), bn);
      Rng rng(derive_seed(options.seed, 0xc1, static_cast<std::uint64_t>(chunk)));
      const auto vnoise = draw_vlb_noise<T>(ys, model.schedule().steps, rng);
      Tape<T> tape;
      const auto vlb = vlb_loss(tape, *model.prior(), batch.context_y0, model.context_grid(), model.schedule(), vnoise);
      for (T v : vlb.total.value().values()) nats += v;
      for (int b = 0; b < bn; ++b) {
        const auto img = decode(batch.codes[static_cast<std::size_t>(b)], *codec);
        std::copy_n(img.data(), per, ctx_patches.data() + static_cast<std::size_t>(b0 + b) * per);
      }
    }
    out.bitstream = w.take();
    out.reconstruction = decompress_image(out.bitstream, model, options);
    out.context_image = from_planar(stitch_patches(ctx_patches, grid));
  } else {
    const int m = options.baseline_layers;
    if (m < 1 || m > cfg.slots())
      throw std::invalid_argument("compress_image: baseline_layers must be in [1, " + std::to_string(cfg.slots()) + "]");
    Tensor<double> rec_patches({grid.count(), 3, grid.patch, grid.patch});
    const Hvae<T>& vae = model.vae();
    for (int b0 = 0, chunk = 0; b0 < grid.count(); b0 += options.batch_size, ++chunk) {
      const int bn = std::min(options.batch_size, grid.count() - b0);
      const auto batch = make_batch(model, rows(patches, b0, bn));
      Rng rng(derive_seed(options.seed, 0xc2, static_cast<std::uint64_t>(chunk)));
      const auto noise = draw_noise<T>(cfg, bn, rng);
      Tape<T> tape;
      const auto features = vae.bottom_up(tape, tape.constant(vae.encoder_input(batch.target)));
      const auto r = vae.top_down(tape, &features, std::nullopt, SampleRequest{SampleMode::kPartial, m, options.tau}, noise);
      for (const auto& layer : r.layers)
        if (layer.from_posterior)
          for (T v : layer.kl->value().values()) nats += v;
      const auto unit = to_unit(vae, r);
      for (std::size_t i = 0; i < static_cast<std::size_t>(bn) * per; ++i)
        rec_patches[static_cast<std::size_t>(b0) * per + i] = unit[i] * 255.0;
    }
    out.bitstream = w.take();
    out.reconstruction = from_planar(stitch_patches(rec_patches, grid));
  }
  out.rate_bits = nats / std::numbers::ln2;
  const Tensor<double> rec = to_planar(out.reconstruction);
  out.record.image_id = options.image_id;
  out.record.bpp = out.rate_bits / (static_cast<double>(grid.width) * grid.height);
  out.record.psnr = psnr(planar, rec, 255.0);
  out.record.msssim = msssim(planar, rec, 255.0);
  out.record.method = method_tag(codec != nullptr, options.baseline_layers);
  return out;
}

RgbImage downsample_baseline(const RgbImage& image, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample_baseline: factor must be positive");
  PatchGrid grid{image.width, image.height, factor};
  const int pw = grid.cols() * factor, ph = grid.rows() * factor;
  const Tensor<double> planar = to_planar(image);
  Tensor<double> padded({3, ph, pw});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < ph; ++y)
      for (int x = 0; x < pw; ++x)
        padded[(static_cast<std::size_t>(c) * ph + y) * pw + x] =
            planar[(static_cast<std::size_t>(c) * image.height + std::min(y, image.height - 1)) * image.width +
                   std::min(x, image.width - 1)];
  const Tensor<double> up = nearest_upsample(avg_pool(padded, factor), factor);
  Tensor<double> out({3, image.height, image.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x)
        out[(static_cast<std::size_t>(c) * image.height + y) * image.width + x] =
            up[(static_cast<std::size_t>(c) * ph + y) * pw + x];
  return from_planar(out);
}

namespace {

template <class T>
SweepRow sweep_one(const RunConfig& cfg, const TrainingData& data) {
  const auto trained = run_training<T>(cfg, data, TrainOptions{});
  const Tensor<double> test = epoch_pixels(cfg, data.test, true, 0);
  DiagnosticsOptions o;
  o.delta = cfg.eval.au_threshold;
  o.n_mc = cfg.eval.n_mc;
  o.batch_size = cfg.eval.batch_size;
  o.seed = cfg.trainer.seed;
  o.dataset = data.test.source;
  const auto rep = collapse_report(*trained.model, test, o);
  SweepRow row;
  row.size = trained.manifest.parameter_count;
  row.layers = cfg.model.slots();
  row.latent_units = cfg.model.latent_units();
  row.au = rep.au;
  row.kl_per_unit = rep.kl_per_unit();
  row.nll = nll_bound(*trained.model, test, cfg.eval.iw_samples, cfg.trainer.seed, cfg.eval.batch_size).nats;
  return row;
}

}  // namespace

std::vector<SweepRow> depth_sweep(std::span<const RunConfig> configs, const TrainingData& data) {
  std::vector<SweepRow> rows_out;
  for (const auto& cfg : configs)
    rows_out.push_back(cfg.trainer.precision == Precision::kFloat64 ? sweep_one<double>(cfg, data)
                                                                    : sweep_one<float>(cfg, data));
  return rows_out;
}

std::string sweep_csv(std::span<const SweepRow> table) {
  std::ostringstream os;
  os.precision(10);
  os << "size,L,latent_space,au,kl,nll\n";
  for (const auto& r : table)
    os << r.size << ',' << r.layers << ',' << r.latent_units << ',' << r.au << ',' << r.kl_per_unit << ',' << r.nll
       << '\n';
  os << "# AU and KL are expected to decrease as the number of stochastic layers grows\n";
  return os.str();
}

#define DCTVAE_INSTANTIATE_EVAL(T)                                                                          \
  template NllResult nll_bound<T>(const JointModel<T>&, const Tensor<double>&, int, std::uint64_t, int);    \
  template Tensor<double> partial_reconstruction<T>(const JointModel<T>&, const Batch<T>&, int, double,     \
                                                    const NoiseBank<T>&, Rng&);                             \
  template std::vector<double> partial_recon_sweep<T>(const JointModel<T>&, const Tensor<double>&,          \
                                                      std::span<const int>, std::uint64_t, int);            \
  template RgbImage decompress_image<T>(std::span<const std::uint8_t>, const JointModel<T>&,                \
                                        const CompressOptions&);                                            \
  template CompressionResult compress_image<T>(const RgbImage&, const JointModel<T>&, const CompressOptions&);

DCTVAE_INSTANTIATE_EVAL(float)
DCTVAE_INSTANTIATE_EVAL(double)

}  // namespace dctvae
