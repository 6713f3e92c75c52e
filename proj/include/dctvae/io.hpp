// SPDX-License-Identifier: Apache-2.0
//
// Dataset containers and image file formats.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dctvae/tensor.hpp"

namespace dctvae {

struct Dataset {
  int count = 0, channels = 1, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // [count, channels, height, width]
  std::vector<std::uint8_t> labels;  // empty when unavailable
  std::string source;

  std::size_t item_size() const { return static_cast<std::size_t>(channels) * height * width; }
  std::span<const std::uint8_t> item(int n) const {
    return std::span<const std::uint8_t>(pixels).subspan(static_cast<std::size_t>(n) * item_size(), item_size());
  }
  // CRC-32 of the pixel bytes, as 8 hex digits.
  std::string checksum() const;
  // First `n` items (all when n <= 0 or n >= count).
  Dataset head(int n) const;
  // Pixels as doubles, [count, channels, height, width].
  Tensor<double> as_tensor() const;
  // Selected items as doubles.
  Tensor<double> gather(std::span<const int> idx) const;
};

// Whole file, gunzipped when it starts with the gzip magic.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// IDX images (magic 0x00000803) or labels (0x00000801), raw or gzipped.
Dataset parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes);
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels = {});
std::vector<std::uint8_t> encode_idx_images(const Dataset& d);

struct RgbImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // interleaved, row-major

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

// Binary P6 with maxval 255.
RgbImage parse_ppm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ppm(const RgbImage& img);
RgbImage load_ppm(const std::filesystem::path& path);
void write_ppm(const RgbImage& img, const std::filesystem::path& path);

// Planar [3, H, W] doubles in 0..255 and back (rounded, clamped).
Tensor<double> to_planar(const RgbImage& img);
RgbImage from_planar(const Tensor<double>& planar);

// Each pixel ~ Bernoulli(intensity / 255), reproducible from (seed, epoch).
// Returns [count, channels, height, width] of 0/1.
Tensor<double> binarize_dynamic(const Dataset& d, std::uint64_t seed, std::uint64_t epoch);

// Deterministic sub-seed for a (seed, stream, a, b) tuple.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t a = 0, std::uint64_t b = 0);

// Random square crops from RGB sources, as a dataset.
Dataset random_patches(std::span<const RgbImage> sources, int side, int per_image, std::uint64_t seed);

// Data root: $DCTVAE_DATA_ROOT when set, else `fallback`.
std::filesystem::path data_root(const std::filesystem::path& fallback);

}  // namespace dctvae
