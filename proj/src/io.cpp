// SPDX-License-Identifier: Apache-2.0

#include "dctvae/io.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>

#include "dctvae/binary_io.hpp"

namespace dctvae {

std::string Dataset::checksum() const {
  const auto crc = crc32(0L, pixels.data(), static_cast<uInt>(pixels.size()));
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

Dataset Dataset::head(int n) const {
  if (n <= 0 || n >= count) return *this;
  Dataset d = *this;
  d.count = n;
  d.pixels.resize(static_cast<std::size_t>(n) * item_size());
  if (!d.labels.empty()) d.labels.resize(static_cast<std::size_t>(n));
  return d;
}

Tensor<double> Dataset::as_tensor() const {
  Tensor<double> t({count, channels, height, width});
  for (std::size_t i = 0; i < pixels.size(); ++i) t[i] = pixels[i];
  return t;
}

Tensor<double> Dataset::gather(std::span<const int> idx) const {
  Tensor<double> t({static_cast<int>(idx.size()), channels, height, width});
  const std::size_t per = item_size();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= count) throw std::out_of_range("Dataset::gather: index out of range");
    const auto src = item(idx[r]);
    for (std::size_t j = 0; j < per; ++j) t[r * per + j] = src[j];
  }
  return t;
}

namespace {

std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> in, const std::string& what) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw std::runtime_error("zlib init failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::vector<std::uint8_t> out;
  std::uint8_t chunk[1 << 16];
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk;
    zs.avail_out = sizeof chunk;
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      const auto at = zs.total_in;
      inflateEnd(&zs);
      throw FormatError(what + ": corrupt gzip stream", at);
    }
    out.insert(out.end(), chunk, chunk + (sizeof chunk - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      const auto at = zs.total_in;
      inflateEnd(&zs);
      throw FormatError(what + ": truncated gzip stream", at);
    }
  }
  inflateEnd(&zs);
  return out;
}

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void need(std::span<const std::uint8_t> b, std::size_t n, const char* what) {
  if (b.size() < n)
    throw FormatError(std::string("IDX ") + what + " truncated: expected " + std::to_string(n) + " bytes, got " +
                          std::to_string(b.size()),
                      b.size());
}

}  // namespace

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) return gunzip(bytes, path.string());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

Dataset parse_idx_images(std::span<const std::uint8_t> b) {
  need(b, 16, "header");
  if (be32(b, 0) != 0x00000803) throw FormatError("IDX images: bad magic", 0);
  Dataset d;
  d.count = static_cast<int>(be32(b, 4));
  d.height = static_cast<int>(be32(b, 8));
  d.width = static_cast<int>(be32(b, 12));
  if (d.count < 0 || d.height <= 0 || d.width <= 0) throw FormatError("IDX images: bad extents", 4);
  const std::size_t n = static_cast<std::size_t>(d.count) * d.item_size();
  need(b, 16 + n, "pixel data");
  d.pixels.assign(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(n));
  return d;
}

std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> b) {
  need(b, 8, "header");
  if (be32(b, 0) != 0x00000801) throw FormatError("IDX labels: bad magic", 0);
  const std::size_t n = be32(b, 4);
  need(b, 8 + n, "label data");
  return {b.begin() + 8, b.begin() + 8 + static_cast<std::ptrdiff_t>(n)};
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  Dataset d;
  try {
    d = parse_idx_images(read_file_bytes(images));
  } catch (const FormatError& e) {
    throw FormatError(images.string() + ": " + e.what(), e.offset());
  }
  d.source = images.string();
  if (!labels.empty()) {
    d.labels = parse_idx_labels(read_file_bytes(labels));
    if (static_cast<int>(d.labels.size()) != d.count)
      throw std::runtime_error("label count " + std::to_string(d.labels.size()) + " does not match image count " +
                               std::to_string(d.count));
  }
  return d;
}

std::vector<std::uint8_t> encode_idx_images(const Dataset& d) {
  if (d.channels != 1) throw std::invalid_argument("IDX images hold a single channel");
  std::vector<std::uint8_t> out;
  put_be32(out, 0x00000803);
  put_be32(out, static_cast<std::uint32_t>(d.count));
  put_be32(out, static_cast<std::uint32_t>(d.height));
  put_be32(out, static_cast<std::uint32_t>(d.width));
  out.insert(out.end(), d.pixels.begin(), d.pixels.end());
  return out;
}

namespace {

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

// Skips whitespace and '#' comments, then reads a decimal integer.
int ppm_int(std::span<const std::uint8_t> b, std::size_t& pos, const char* what) {
  bool any_space = false;
  while (pos < b.size()) {
    if (is_space(b[pos])) {
      any_space = true;
      ++pos;
    } else if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n' && b[pos] != '\r') ++pos;
    } else {
      break;
    }
  }
  if (!any_space) throw FormatError(std::string("PPM: expected whitespace before ") + what, pos);
  if (pos >= b.size() || b[pos] < '0' || b[pos] > '9') throw FormatError(std::string("PPM: expected ") + what, pos);
  long v = 0;
  while (pos < b.size() && b[pos] >= '0' && b[pos] <= '9') {
    v = v * 10 + (b[pos] - '0');
    if (v > 1 << 24) throw FormatError(std::string("PPM: ") + what + " too large", pos);
    ++pos;
  }
  return static_cast<int>(v);
}

}  // namespace

RgbImage parse_ppm(std::span<const std::uint8_t> b) {
  if (b.size() < 2 || b[0] != 'P' || b[1] != '6') throw FormatError("PPM: expected 'P6' magic", 0);
  std::size_t pos = 2;
  RgbImage img;
  img.width = ppm_int(b, pos, "width");
  img.height = ppm_int(b, pos, "height");
  const int maxval = ppm_int(b, pos, "maxval");
  if (maxval != 255) throw FormatError("PPM: unsupported maxval " + std::to_string(maxval) + " (only 255)", pos);
  if (img.width < 1 || img.height < 1) throw FormatError("PPM: empty image", pos);
  if (pos >= b.size() || !is_space(b[pos])) throw FormatError("PPM: expected one whitespace byte before data", pos);
  ++pos;
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * 3;
  if (b.size() - pos < n)
    throw FormatError("PPM: truncated data, expected " + std::to_string(n) + " bytes, got " +
                          std::to_string(b.size() - pos),
                      b.size());
  img.rgb.assign(b.begin() + static_cast<std::ptrdiff_t>(pos), b.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& img) {
  if (img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3)
    throw std::invalid_argument("encode_ppm: pixel buffer does not match extents");
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

RgbImage load_ppm(const std::filesystem::path& path) {
  try {
    return parse_ppm(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

void write_ppm(const RgbImage& img, const std::filesystem::path& path) { write_file_bytes(path, encode_ppm(img)); }

Tensor<double> to_planar(const RgbImage& img) {
  Tensor<double> t({3, img.height, img.width});
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) t[c * plane + p] = img.rgb[p * 3 + c];
  return t;
}

RgbImage from_planar(const Tensor<double>& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw std::invalid_argument("from_planar: expected [3,H,W], got " + shape_str(t.shape()));
  RgbImage img{t.dim(2), t.dim(1), {}};
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  img.rgb.resize(plane * 3);
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c)
      img.rgb[p * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(t[c * plane + p]), 0L, 255L));
  return img;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(mix(seed) ^ stream) ^ a) ^ b);
}

Tensor<double> binarize_dynamic(const Dataset& d, std::uint64_t seed, std::uint64_t epoch) {
  std::mt19937_64 rng(derive_seed(seed, 0xb1, epoch));
  Tensor<double> t({d.count, d.channels, d.height, d.width});
  for (std::size_t i = 0; i < d.pixels.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    t[i] = u * 255.0 < d.pixels[i] ? 1.0 : 0.0;
  }
  return t;
}

Dataset random_patches(std::span<const RgbImage> sources, int side, int per_image, std::uint64_t seed) {
  if (side < 1 || per_image < 1) throw std::invalid_argument("random_patches: side and count must be positive");
  Dataset d;
  d.channels = 3;
  d.height = d.width = side;
  std::mt19937_64 rng(derive_seed(seed, 0x9a7c));
  for (const auto& img : sources) {
    if (img.width < side || img.height < side) throw std::invalid_argument("random_patches: source smaller than patch");
    std::uniform_int_distribution<int> ox(0, img.width - side), oy(0, img.height - side);
    for (int k = 0; k < per_image; ++k) {
      const int x0 = ox(rng), y0 = oy(rng);
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < side; ++y)
          for (int x = 0; x < side; ++x)
            d.pixels.push_back(img.rgb[(static_cast<std::size_t>(y0 + y) * img.width + x0 + x) * 3 + c]);
      ++d.count;
    }
  }
  return d;
}

std::filesystem::path data_root(const std::filesystem::path& fallback) {
  if (const char* env = std::getenv("DCTVAE_DATA_ROOT"); env && *env) return env;
  return fallback;
}

}  // namespace dctvae
