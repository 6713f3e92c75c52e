// SPDX-License-Identifier: Apache-2.0
//
// Likelihood bounds, partial-posterior reconstructions, image-quality metrics
// and the patch-based compression harness.

#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dctvae/diagnostics.hpp"
#include "dctvae/io.hpp"
#include "dctvae/joint.hpp"
#include "dctvae/trainer.hpp"

namespace dctvae {

double bits_per_dim(double nats, std::size_t dims);

struct NllResult {
  double nats = 0;
  double bits_per_dim = 0;
  int importance_samples = 1;
  std::vector<double> per_item;
};

// k = 1: the negative joint bound. k > 1: importance-weighted over the VAE
// latents, -log mean_k exp(log p(x|z) + log p(z) - log q(z|x)), plus the
// context's diffusion bound where present.
template <class T>
NllResult nll_bound(const JointModel<T>& model, const Tensor<double>& pixels, int k, std::uint64_t seed,
                    int batch_size = 100);

// Standard weights for 1..5 scales, finest first.
inline constexpr std::array<double, 5> kMsssimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

// Largest scale count (at most 5) with min(h, w) >= 2^(scales-1) * 11.
int msssim_max_scales(int height, int width);

// Multi-scale SSIM of [C,H,W] (or [H,W]) images with values in
// [0, data_range]. Valid 11x11 Gaussian filtering, 2x2 mean downsampling
// between scales; per scale, contrast-structure (and at the coarsest scale
// luminance) maps are averaged over channels and pixels and clipped at 0
// before weighting.
double msssim(const Tensor<double>& x, const Tensor<double>& y, double data_range, int scales,
              std::span<const double> weights);
// As many scales as the size allows, leading standard weights renormalized.
double msssim(const Tensor<double>& x, const Tensor<double>& y, double data_range);

// 10 log10(max^2 / MSE); +infinity for identical inputs.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();
double psnr(const Tensor<double>& x, const Tensor<double>& y, double max_value);

// Mean images in [0, 1] for a partial(m) request, [B, Ch, D, D]. With
// m = 0 and a context model, contexts are drawn from the diffusion prior.
template <class T>
Tensor<double> partial_reconstruction(const JointModel<T>& model, const Batch<T>& batch, int m, double tau,
                                      const NoiseBank<T>& noise, Rng& prior_rng);

// Mean MS-SSIM between inputs and partial(m) reconstructions for each m; the
// same noise bank is reused for every m.
template <class T>
std::vector<double> partial_recon_sweep(const JointModel<T>& model, const Tensor<double>& pixels,
                                        std::span<const int> m_values, std::uint64_t seed, int batch_size = 100);

// Square tiling of a W x H image, padded by edge replication to multiples of
// `patch`.
struct PatchGrid {
  int width = 0, height = 0, patch = 32;
  int cols() const { return (width + patch - 1) / patch; }
  int rows() const { return (height + patch - 1) / patch; }
  int count() const { return cols() * rows(); }
};

// [C,H,W] -> [count, C, patch, patch], row-major tile order.
Tensor<double> extract_patches(const Tensor<double>& planar, const PatchGrid& grid);
// Inverse of extract_patches; padding is cropped.
Tensor<double> stitch_patches(const Tensor<double>& patches, const PatchGrid& grid);

struct RateDistortionRecord {
  std::string image_id;
  double bpp = 0;
  double psnr = 0;
  double msssim = 0;
  std::string method;

  std::string to_json() const;
};

struct CompressOptions {
  double tau = 0.1;
  std::uint64_t seed = 0;
  // Baseline models: posterior layers transmitted.
  int baseline_layers = 2;
  std::string image_id = "image";
  int batch_size = 64;
};

struct CompressionResult {
  std::vector<std::uint8_t> bitstream;
  RgbImage reconstruction;
  RgbImage context_image;  // decoded context alone; empty for baselines
  RateDistortionRecord record;
  double rate_bits = 0;
};

// Bitstream: "DCTI" | version u16 | W u32 | H u32 | patch count u32 |
// one context record per patch (empty for baselines).
inline constexpr std::uint16_t kImageFormatVersion = 1;

template <class T>
CompressionResult compress_image(const RgbImage& image, const JointModel<T>& model, const CompressOptions& options);

// Rebuilds the context-model reconstruction from a bitstream.
template <class T>
RgbImage decompress_image(std::span<const std::uint8_t> bitstream, const JointModel<T>& model,
                          const CompressOptions& options);

// Mean over factor x factor blocks, then nearest upsampling, on an image
// replicate-padded to multiples of `factor`.
RgbImage downsample_baseline(const RgbImage& image, int factor);

struct SweepRow {
  std::size_t size = 0;  // parameters
  int layers = 0;
  std::size_t latent_units = 0;
  double au = 0;
  double kl_per_unit = 0;
  double nll = 0;
};

// Trains every config on `data`, then reports collapse metrics and the
// negative bound on the test split.
std::vector<SweepRow> depth_sweep(std::span<const RunConfig> configs, const TrainingData& data);
std::string sweep_csv(std::span<const SweepRow> rows);

}  // namespace dctvae
