// SPDX-License-Identifier: Apache-2.0

#include "dctvae/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "dctvae/simd/kernels.hpp"

namespace dctvae {
namespace {

void require_rank(const Shape& s, int rank, const char* op) {
  if (static_cast<int>(s.size()) != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                shape_str(s));
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

struct ConvGeom {
  int batch, cin, h, w, cout, k, stride, pad, ho, wo;
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
  int cols_rows() const { return cin * k * k; }
  int cols_cols() const { return ho * wo; }
};

ConvGeom conv_geometry(const Shape& x, const Shape& w, int stride, int padding) {
  if (x.size() != 4 || w.size() != 4 || x[1] != w[1] || w[2] != w[3] || w[2] % 2 == 0 || stride < 1 || padding < 0 ||
      x[2] + 2 * padding < w[2] || x[3] + 2 * padding < w[3])
    throw std::invalid_argument("conv2d: input " + shape_str(x) + " incompatible with kernel " + shape_str(w) +
                                " (stride " + std::to_string(stride) + ", padding " + std::to_string(padding) + ")");
  ConvGeom g{x[0], x[1], x[2], x[3], w[0], w[2], stride, padding, 0, 0};
  g.ho = (g.h + 2 * padding - g.k) / stride + 1;
  g.wo = (g.w + 2 * padding - g.k) / stride + 1;
  return g;
}

// Output columns [lo, hi) read inside the image for kernel offset kx.
inline void valid_span(const ConvGeom& g, int kx, int& lo, int& hi) {
  const int off = kx - g.pad;
  lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  hi = (g.w - 1 - off) >= 0 ? (g.w - 1 - off) / g.stride + 1 : 0;
  if (hi > g.wo) hi = g.wo;
  if (lo > hi) lo = hi;
}

template <class T>
void im2col(const T* img, const ConvGeom& g, T* cols) {
  const int n = g.cols_cols();
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * n;
        int lo, hi;
        valid_span(g, kx, lo, hi);
        const int off = kx - g.pad;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(c) * g.h + iy) * g.w + off;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.wo, T(0));
        }
      }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, T* img) {
  const int n = g.cols_cols();
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * n;
        int lo, hi;
        valid_span(g, kx, lo, hi);
        const int off = kx - g.pad;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = img + (static_cast<std::size_t>(c) * g.h + iy) * g.w + off;
          const T* src = row + oy * g.wo;
          for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
}

// Elementwise unary op helper: value f(x), derivative df(x, y).
template <class T, class F, class DF>
Var<T> unary(Var<T> x, F f, DF df) {
  const int a = x.id;
  return x.tape->record(
      {a},
      [a, f](Tape<T>& t, int self) {
        const Tensor<T>& in = t.value(a);
        Tensor<T> out(in.shape());
        for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
        t.mutable_value(self) = std::move(out);
      },
      [a, df](Tape<T>& t, int self) {
        if (!t.needs_grad(a)) return;
        const Tensor<T>& in = t.value(a);
        const Tensor<T>& out = t.value(self);
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& ga = t.grad(a);
        for (std::size_t i = 0; i < in.size(); ++i) ga[i] += g[i] * df(in[i], out[i]);
      });
}

}  // namespace

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<std::type_identity_t<Var<T>>> b, int stride, int padding) {
  const ConvGeom g = conv_geometry(x.shape(), w.shape(), stride, padding);
  if (b && (b->shape().size() != 1 || b->dim(0) != g.cout))
    throw std::invalid_argument("conv2d: bias shape " + shape_str(b->shape()) + " does not match kernel " +
                                shape_str(w.shape()));
  const int xi = x.id, wi = w.id, bi = b ? b->id : -1;
  std::vector<int> inputs{xi, wi};
  if (b) inputs.push_back(bi);

  auto forward = [g, xi, wi, bi](Tape<T>& t, int self) {
    const Tensor<T>& in = t.value(xi);
    const Tensor<T>& ker = t.value(wi);
    Tensor<T> out({g.batch, g.cout, g.ho, g.wo});
    const int n = g.cols_cols();
    const int kk = g.cols_rows();
    std::vector<T> cols(g.pointwise() ? 0 : static_cast<std::size_t>(kk) * n);
    for (int bt = 0; bt < g.batch; ++bt) {
      const T* img = in.data() + static_cast<std::size_t>(bt) * g.cin * g.h * g.w;
      T* dst = out.data() + static_cast<std::size_t>(bt) * g.cout * n;
      if (bi >= 0) {
        const Tensor<T>& bias = t.value(bi);
        for (int co = 0; co < g.cout; ++co)
          for (int j = 0; j < n; ++j) dst[co * n + j] = bias[static_cast<std::size_t>(co)];
      }
      const T* src = img;
      if (!g.pointwise()) {
        im2col(img, g, cols.data());
        src = cols.data();
      }
      simd::gemm(simd::Trans::kNo, simd::Trans::kNo, g.cout, n, kk, ker.data(), src, dst);
    }
    t.mutable_value(self) = std::move(out);
  };

  auto backward = [g, xi, wi, bi](Tape<T>& t, int self) {
    const Tensor<T>& gy = t.grad(self);
    const Tensor<T>& in = t.value(xi);
    const Tensor<T>& ker = t.value(wi);
    const int n = g.cols_cols();
    const int kk = g.cols_rows();
    const bool need_x = t.needs_grad(xi), need_w = t.needs_grad(wi), need_b = bi >= 0 && t.needs_grad(bi);
    std::vector<T> cols(g.pointwise() ? 0 : static_cast<std::size_t>(kk) * n);
    std::vector<T> dcols(need_x && !g.pointwise() ? static_cast<std::size_t>(kk) * n : 0);
    for (int bt = 0; bt < g.batch; ++bt) {
      const T* gyb = gy.data() + static_cast<std::size_t>(bt) * g.cout * n;
      const std::size_t img_off = static_cast<std::size_t>(bt) * g.cin * g.h * g.w;
      if (need_b) {
        Tensor<T>& gb = t.grad(bi);
        for (int co = 0; co < g.cout; ++co) {
          T s = 0;
          for (int j = 0; j < n; ++j) s += gyb[co * n + j];
          gb[static_cast<std::size_t>(co)] += s;
        }
      }
      if (need_w) {
        const T* src = in.data() + img_off;
        if (!g.pointwise()) {
          im2col(src, g, cols.data());
          src = cols.data();
        }
        simd::gemm(simd::Trans::kNo, simd::Trans::kYes, g.cout, kk, n, gyb, src, t.grad(wi).data());
      }
      if (need_x) {
        if (g.pointwise()) {
          simd::gemm(simd::Trans::kYes, simd::Trans::kNo, kk, n, g.cout, ker.data(), gyb,
                     t.grad(xi).data() + img_off);
        } else {
          std::fill(dcols.begin(), dcols.end(), T(0));
          simd::gemm(simd::Trans::kYes, simd::Trans::kNo, kk, n, g.cout, ker.data(), gyb, dcols.data());
          col2im_add(dcols.data(), g, t.grad(xi).data() + img_off);
        }
      }
    }
  };
  return x.tape->record(inputs, forward, backward);
}

template <class T>
Tensor<T> avg_pool(const Tensor<T>& x, int window) {
  if (x.rank() < 2 || window < 1 || x.dim(x.rank() - 1) % window || x.dim(x.rank() - 2) % window)
    throw std::invalid_argument("avg_pool: spatial extents of " + shape_str(x.shape()) + " not divisible by window " +
                                std::to_string(window));
  const int h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const int ho = h / window, wo = w / window;
  Shape os = x.shape();
  os[os.size() - 2] = ho;
  os[os.size() - 1] = wo;
  Tensor<T> out(os);
  const std::size_t planes = x.size() / (static_cast<std::size_t>(h) * w);
  const T inv = T(1) / T(window * window);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = out.data() + p * ho * wo;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const T first = src[(oy * window) * w + ox * window];
        T s = 0;
        bool uniform = true;
        for (int dy = 0; dy < window; ++dy)
          for (int dx = 0; dx < window; ++dx) {
            const T v = src[(oy * window + dy) * w + ox * window + dx];
            s += v;
            uniform = uniform && v == first;
          }
        // Constant blocks map to their value exactly.
        dst[oy * wo + ox] = uniform ? first : s * inv;
      }
  }
  return out;
}

template <class T>
Tensor<T> nearest_upsample(const Tensor<T>& x, int factor) {
  if (factor < 1) throw std::invalid_argument("nearest_upsample: factor must be >= 1, got " + std::to_string(factor));
  if (x.rank() < 2) throw std::invalid_argument("nearest_upsample: need spatial extents, got " + shape_str(x.shape()));
  const int h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const int ho = h * factor, wo = w * factor;
  Shape os = x.shape();
  os[os.size() - 2] = ho;
  os[os.size() - 1] = wo;
  Tensor<T> out(os);
  const std::size_t planes = x.size() / (static_cast<std::size_t>(h) * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = out.data() + p * ho * wo;
    for (int y = 0; y < h; ++y) {
      T* row = dst + static_cast<std::size_t>(y) * factor * wo;
      for (int x = 0; x < w; ++x)
        for (int f = 0; f < factor; ++f) row[x * factor + f] = src[y * w + x];
      for (int f = 1; f < factor; ++f) std::copy(row, row + wo, row + static_cast<std::size_t>(f) * wo);
    }
  }
  return out;
}

template <class T>
Var<T> avg_pool(Var<T> x, int window) {
  (void)avg_pool(x.value(), window);  // validates extents up front
  const int a = x.id;
  return x.tape->record(
      {a}, [a, window](Tape<T>& t, int self) { t.mutable_value(self) = avg_pool(t.value(a), window); },
      [a, window](Tape<T>& t, int self) {
        // The adjoint of mean pooling spreads g/window^2 over each block.
        Tensor<T> up = nearest_upsample(t.grad(self), window);
        Tensor<T>& ga = t.grad(a);
        const T inv = T(1) / T(window * window);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += up[i] * inv;
      });
}

template <class T>
Var<T> nearest_upsample(Var<T> x, int factor) {
  if (factor < 1) throw std::invalid_argument("nearest_upsample: factor must be >= 1, got " + std::to_string(factor));
  const int a = x.id;
  return x.tape->record(
      {a}, [a, factor](Tape<T>& t, int self) { t.mutable_value(self) = nearest_upsample(t.value(a), factor); },
      [a, factor](Tape<T>& t, int self) {
        Tensor<T> pooled = avg_pool(t.grad(self), factor);
        Tensor<T>& ga = t.grad(a);
        const T area = T(factor * factor);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += pooled[i] * area;
      });
}

template <class T>
Var<T> silu(Var<T> x) {
  const int a = x.id;
  return x.tape->record(
      {a},
      [a](Tape<T>& t, int self) {
        const Tensor<T>& in = t.value(a);
        Tensor<T> out(in.shape());
        simd::silu(in.data(), out.data(), in.size());
        t.mutable_value(self) = std::move(out);
      },
      [a](Tape<T>& t, int self) {
        if (!t.needs_grad(a)) return;
        const Tensor<T>& in = t.value(a);
        simd::silu_grad(in.data(), t.grad(self).data(), t.grad(a).data(), in.size());
      });
}

template <class T>
Var<T> exp(Var<T> x) {
  return unary<T>(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> scale(Var<T> x, T factor) {
  return unary<T>(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Var<T> clamp(Var<T> x, T lo, T hi) {
  return unary<T>(
      x, [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same(a.shape(), b.shape(), "add");
  const int ai = a.id, bi = b.id;
  return a.tape->record(
      {ai, bi},
      [ai, bi](Tape<T>& t, int self) {
        Tensor<T> out = t.value(ai);
        const Tensor<T>& y = t.value(bi);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
        t.mutable_value(self) = std::move(out);
      },
      [ai, bi](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        for (int in : {ai, bi}) {
          if (!t.needs_grad(in)) continue;
          Tensor<T>& gi = t.grad(in);
          for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
      });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same(a.shape(), b.shape(), "sub");
  const int ai = a.id, bi = b.id;
  return a.tape->record(
      {ai, bi},
      [ai, bi](Tape<T>& t, int self) {
        Tensor<T> out = t.value(ai);
        const Tensor<T>& y = t.value(bi);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
        t.mutable_value(self) = std::move(out);
      },
      [ai, bi](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        if (t.needs_grad(ai)) {
          Tensor<T>& ga = t.grad(ai);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.needs_grad(bi)) {
          Tensor<T>& gb = t.grad(bi);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
      });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same(a.shape(), b.shape(), "mul");
  const int ai = a.id, bi = b.id;
  return a.tape->record(
      {ai, bi},
      [ai, bi](Tape<T>& t, int self) {
        Tensor<T> out = t.value(ai);
        const Tensor<T>& y = t.value(bi);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
        t.mutable_value(self) = std::move(out);
      },
      [ai, bi](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        if (t.needs_grad(ai)) {
          const Tensor<T>& y = t.value(bi);
          Tensor<T>& ga = t.grad(ai);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
        }
        if (t.needs_grad(bi)) {
          const Tensor<T>& x = t.value(ai);
          Tensor<T>& gb = t.grad(bi);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
        }
      });
}

template <class T>
Var<T> broadcast_batch(Var<T> x, int batch) {
  if (batch < 1) throw std::invalid_argument("broadcast_batch: batch must be >= 1");
  const int a = x.id;
  return x.tape->record(
      {a},
      [a, batch](Tape<T>& t, int self) {
        const Tensor<T>& in = t.value(a);
        Shape s{batch};
        s.insert(s.end(), in.shape().begin(), in.shape().end());
        Tensor<T> out(s);
        for (int b = 0; b < batch; ++b) std::copy(in.data(), in.data() + in.size(), out.data() + b * in.size());
        t.mutable_value(self) = std::move(out);
      },
      [a, batch](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& ga = t.grad(a);
        for (int b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[b * ga.size() + i];
      });
}

template <class T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
  require_rank(x.shape(), 4, "add_channel_bias");
  if (bias.shape() != Shape{x.dim(0), x.dim(1)})
    throw std::invalid_argument("add_channel_bias: bias " + shape_str(bias.shape()) + " does not match input " +
                                shape_str(x.shape()));
  const int xi = x.id, bi = bias.id;
  const int planes = x.dim(0) * x.dim(1);
  const int area = x.dim(2) * x.dim(3);
  return x.tape->record(
      {xi, bi},
      [xi, bi, planes, area](Tape<T>& t, int self) {
        Tensor<T> out = t.value(xi);
        const Tensor<T>& bv = t.value(bi);
        for (int p = 0; p < planes; ++p)
          for (int j = 0; j < area; ++j) out[static_cast<std::size_t>(p) * area + j] += bv[static_cast<std::size_t>(p)];
        t.mutable_value(self) = std::move(out);
      },
      [xi, bi, planes, area](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        if (t.needs_grad(xi)) {
          Tensor<T>& gx = t.grad(xi);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.needs_grad(bi)) {
          Tensor<T>& gb = t.grad(bi);
          for (int p = 0; p < planes; ++p) {
            T s = 0;
            for (int j = 0; j < area; ++j) s += g[static_cast<std::size_t>(p) * area + j];
            gb[static_cast<std::size_t>(p)] += s;
          }
        }
      });
}

template <class T>
Var<T> gather_rows(Var<T> table, std::vector<int> indices) {
  require_rank(table.shape(), 2, "gather_rows");
  const int rows = table.dim(0), width = table.dim(1);
  for (int i : indices)
    if (i < 0 || i >= rows)
      throw std::invalid_argument("gather_rows: index " + std::to_string(i) + " out of range for table " +
                                  shape_str(table.shape()));
  const int a = table.id;
  return table.tape->record(
      {a},
      [a, indices, width](Tape<T>& t, int self) {
        const Tensor<T>& tab = t.value(a);
        Tensor<T> out({static_cast<int>(indices.size()), width});
        for (std::size_t r = 0; r < indices.size(); ++r)
          std::copy(tab.data() + static_cast<std::size_t>(indices[r]) * width,
                    tab.data() + static_cast<std::size_t>(indices[r] + 1) * width, out.data() + r * width);
        t.mutable_value(self) = std::move(out);
      },
      [a, indices, width](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& ga = t.grad(a);
        for (std::size_t r = 0; r < indices.size(); ++r)
          for (int j = 0; j < width; ++j) ga[static_cast<std::size_t>(indices[r]) * width + j] += g[r * width + j];
      });
}

template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  require_rank(a.shape(), 4, "concat_channels");
  require_rank(b.shape(), 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw std::invalid_argument("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const int ai = a.id, bi = b.id;
  const int batch = a.dim(0), ca = a.dim(1), cb = b.dim(1), area = a.dim(2) * a.dim(3);
  return a.tape->record(
      {ai, bi},
      [=](Tape<T>& t, int self) {
        const Tensor<T>& x = t.value(ai);
        const Tensor<T>& y = t.value(bi);
        Tensor<T> out({batch, ca + cb, x.dim(2), x.dim(3)});
        for (int n = 0; n < batch; ++n) {
          std::copy(x.data() + static_cast<std::size_t>(n) * ca * area,
                    x.data() + static_cast<std::size_t>(n + 1) * ca * area,
                    out.data() + static_cast<std::size_t>(n) * (ca + cb) * area);
          std::copy(y.data() + static_cast<std::size_t>(n) * cb * area,
                    y.data() + static_cast<std::size_t>(n + 1) * cb * area,
                    out.data() + (static_cast<std::size_t>(n) * (ca + cb) + ca) * area);
        }
        t.mutable_value(self) = std::move(out);
      },
      [=](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        for (int n = 0; n < batch; ++n) {
          const T* gn = g.data() + static_cast<std::size_t>(n) * (ca + cb) * area;
          if (t.needs_grad(ai)) {
            T* dst = t.grad(ai).data() + static_cast<std::size_t>(n) * ca * area;
            for (int i = 0; i < ca * area; ++i) dst[i] += gn[i];
          }
          if (t.needs_grad(bi)) {
            T* dst = t.grad(bi).data() + static_cast<std::size_t>(n) * cb * area;
            for (int i = 0; i < cb * area; ++i) dst[i] += gn[ca * area + i];
          }
        }
      });
}

template <class T>
Var<T> slice_channels(Var<T> x, int start, int count) {
  require_rank(x.shape(), 4, "slice_channels");
  if (start < 0 || count < 0 || start + count > x.dim(1))
    throw std::invalid_argument("slice_channels: range [" + std::to_string(start) + "," + std::to_string(start + count) +
                                ") outside " + shape_str(x.shape()));
  const int a = x.id;
  const int batch = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
  return x.tape->record(
      {a},
      [=](Tape<T>& t, int self) {
        const Tensor<T>& in = t.value(a);
        Tensor<T> out({batch, count, in.dim(2), in.dim(3)});
        for (int n = 0; n < batch; ++n)
          std::copy(in.data() + (static_cast<std::size_t>(n) * c + start) * area,
                    in.data() + (static_cast<std::size_t>(n) * c + start + count) * area,
                    out.data() + static_cast<std::size_t>(n) * count * area);
        t.mutable_value(self) = std::move(out);
      },
      [=](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& ga = t.grad(a);
        for (int n = 0; n < batch; ++n) {
          T* dst = ga.data() + (static_cast<std::size_t>(n) * c + start) * area;
          const T* src = g.data() + static_cast<std::size_t>(n) * count * area;
          for (int i = 0; i < count * area; ++i) dst[i] += src[i];
        }
      });
}

template <class T>
Var<T> sum(Var<T> x) {
  const int a = x.id;
  return x.tape->record(
      {a},
      [a](Tape<T>& t, int self) {
        T s = 0;
        for (T v : t.value(a).values()) s += v;
        t.mutable_value(self) = Tensor<T>({1}, std::vector<T>{s});
      },
      [a](Tape<T>& t, int self) {
        const T g = t.grad(self)[0];
        for (T& v : t.grad(a).values()) v += g;
      });
}

template <class T>
Var<T> mean(Var<T> x) {
  const T inv = T(1) / static_cast<T>(x.value().size());
  return scale(sum(x), inv);
}

template <class T>
Var<T> sum_per_item(Var<T> x) {
  if (x.shape().empty()) throw std::invalid_argument("sum_per_item: rank-0 input");
  const int a = x.id;
  const int batch = x.dim(0);
  const std::size_t per = x.value().size() / static_cast<std::size_t>(batch == 0 ? 1 : batch);
  return x.tape->record(
      {a},
      [a, batch, per](Tape<T>& t, int self) {
        const Tensor<T>& in = t.value(a);
        Tensor<T> out({batch});
        for (int b = 0; b < batch; ++b) {
          T s = 0;
          for (std::size_t i = 0; i < per; ++i) s += in[b * per + i];
          out[static_cast<std::size_t>(b)] = s;
        }
        t.mutable_value(self) = std::move(out);
      },
      [a, batch, per](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& ga = t.grad(a);
        for (int b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < per; ++i) ga[b * per + i] += g[static_cast<std::size_t>(b)];
      });
}

template <class T>
Var<T> scale_per_item(Var<T> x, std::vector<T> factors) {
  if (x.shape().empty() || static_cast<int>(factors.size()) != x.dim(0))
    throw std::invalid_argument("scale_per_item: " + std::to_string(factors.size()) + " factors for shape " +
                                shape_str(x.shape()));
  const int a = x.id;
  const std::size_t per = x.value().size() / factors.size();
  return x.tape->record(
      {a},
      [a, factors, per](Tape<T>& t, int self) {
        Tensor<T> out = t.value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factors[i / per];
        t.mutable_value(self) = std::move(out);
      },
      [a, factors, per](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factors[i / per];
      });
}

#define DCTVAE_INSTANTIATE_OPS(T)                                                        \
  template Var<T> conv2d<T>(Var<T>, Var<T>, std::optional<Var<T>>, int, int);         \
  template Var<T> avg_pool<T>(Var<T>, int);                                             \
  template Var<T> nearest_upsample<T>(Var<T>, int);                                     \
  template Tensor<T> avg_pool<T>(const Tensor<T>&, int);                                \
  template Tensor<T> nearest_upsample<T>(const Tensor<T>&, int);                        \
  template Var<T> silu<T>(Var<T>);                                                      \
  template Var<T> add<T>(Var<T>, Var<T>);                                               \
  template Var<T> sub<T>(Var<T>, Var<T>);                                               \
  template Var<T> mul<T>(Var<T>, Var<T>);                                               \
  template Var<T> scale<T>(Var<T>, T);                                                  \
  template Var<T> exp<T>(Var<T>);                                                       \
  template Var<T> clamp<T>(Var<T>, T, T);                                               \
  template Var<T> broadcast_batch<T>(Var<T>, int);                                      \
  template Var<T> add_channel_bias<T>(Var<T>, Var<T>);                                  \
  template Var<T> gather_rows<T>(Var<T>, std::vector<int>);                             \
  template Var<T> concat_channels<T>(Var<T>, Var<T>);                                   \
  template Var<T> slice_channels<T>(Var<T>, int, int);                                  \
  template Var<T> sum<T>(Var<T>);                                                       \
  template Var<T> mean<T>(Var<T>);                                                      \
  template Var<T> sum_per_item<T>(Var<T>);                                              \
  template Var<T> scale_per_item<T>(Var<T>, std::vector<T>);

DCTVAE_INSTANTIATE_OPS(float)
DCTVAE_INSTANTIATE_OPS(double)

#undef DCTVAE_INSTANTIATE_OPS

}  // namespace dctvae
