// SPDX-License-Identifier: Apache-2.0
//
// AVX2/FMA kernels. This translation unit is compiled with -mavx2 -mfma, so it
// avoids instantiating standard-library templates whose out-of-line copies
// could be picked by the linker for callers on hosts without AVX2.

#include "dctvae/simd/kernels.hpp"

#include <immintrin.h>

#include <cstdint>

namespace dctvae::simd::avx2 {
namespace {

int imin(int a, int b) { return a < b ? a : b; }
int imax(int a, int b) { return a > b ? a : b; }

template <class T>
struct Vec;

template <>
struct Vec<float> {
  using R = __m256;
  static constexpr int kLanes = 8;
  static R zero() { return _mm256_setzero_ps(); }
  static R set1(float v) { return _mm256_set1_ps(v); }
  static R loadu(const float* p) { return _mm256_loadu_ps(p); }
  static void storeu(float* p, R v) { _mm256_storeu_ps(p, v); }
  static R fmadd(R a, R b, R c) { return _mm256_fmadd_ps(a, b, c); }
  static R add(R a, R b) { return _mm256_add_ps(a, b); }
  static __m256i mask(int count) {
    const __m256i iota = _mm256_setr_epi32(0, 1, 2, 3, 4, 5, 6, 7);
    return _mm256_cmpgt_epi32(_mm256_set1_epi32(count), iota);
  }
  static R maskload(const float* p, __m256i m) { return _mm256_maskload_ps(p, m); }
  static void maskstore(float* p, __m256i m, R v) { _mm256_maskstore_ps(p, m, v); }
  static float hsum(R v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehdup_ps(lo);
    __m128 s = _mm_add_ps(lo, sh);
    sh = _mm_movehl_ps(sh, s);
    s = _mm_add_ss(s, sh);
    return _mm_cvtss_f32(s);
  }
};

template <>
struct Vec<double> {
  using R = __m256d;
  static constexpr int kLanes = 4;
  static R zero() { return _mm256_setzero_pd(); }
  static R set1(double v) { return _mm256_set1_pd(v); }
  static R loadu(const double* p) { return _mm256_loadu_pd(p); }
  static void storeu(double* p, R v) { _mm256_storeu_pd(p, v); }
  static R fmadd(R a, R b, R c) { return _mm256_fmadd_pd(a, b, c); }
  static R add(R a, R b) { return _mm256_add_pd(a, b); }
  static __m256i mask(int count) {
    const __m256i iota = _mm256_setr_epi64x(0, 1, 2, 3);
    return _mm256_cmpgt_epi64(_mm256_set1_epi64x(count), iota);
  }
  static R maskload(const double* p, __m256i m) { return _mm256_maskload_pd(p, m); }
  static void maskstore(double* p, __m256i m, R v) { _mm256_maskstore_pd(p, m, v); }
  static double hsum(R v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d h = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, h));
  }
};

// Scratch for transposed operands; one per thread and element type.
template <class T>
struct Scratch {
  T* data = nullptr;
  std::size_t capacity = 0;
  ~Scratch() { delete[] data; }
  T* get(std::size_t n) {
    if (n > capacity) {
      delete[] data;
      data = new T[n];
      capacity = n;
    }
    return data;
  }
};

template <class T>
Scratch<T>& scratch_a() {
  static thread_local Scratch<T> s;
  return s;
}
template <class T>
Scratch<T>& scratch_b() {
  static thread_local Scratch<T> s;
  return s;
}

template <class T>
void transpose(const T* src, int rows, int cols, T* dst) {
  constexpr int kTile = 32;
  for (int i0 = 0; i0 < rows; i0 += kTile) {
    const int i1 = imin(rows, i0 + kTile);
    for (int j0 = 0; j0 < cols; j0 += kTile) {
      const int j1 = imin(cols, j0 + kTile);
      for (int i = i0; i < i1; ++i)
        for (int j = j0; j < j1; ++j)
          dst[static_cast<std::size_t>(j) * rows + i] = src[static_cast<std::size_t>(i) * cols + j];
    }
  }
}

// R rows of C, up to two vector widths of columns.
template <class T, int R>
void micro_kernel(int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc, int cols) {
  using V = Vec<T>;
  constexpr int L = V::kLanes;
  typename V::R acc0[R];
  typename V::R acc1[R];
  for (int r = 0; r < R; ++r) {
    acc0[r] = V::zero();
    acc1[r] = V::zero();
  }
  if (cols == 2 * L) {
    for (int p = 0; p < k; ++p) {
      const T* bp = b + static_cast<std::size_t>(p) * ldb;
      const auto b0 = V::loadu(bp);
      const auto b1 = V::loadu(bp + L);
      for (int r = 0; r < R; ++r) {
        const auto av = V::set1(a[static_cast<std::size_t>(r) * lda + p]);
        acc0[r] = V::fmadd(av, b0, acc0[r]);
        acc1[r] = V::fmadd(av, b1, acc1[r]);
      }
    }
    for (int r = 0; r < R; ++r) {
      T* cr = c + static_cast<std::size_t>(r) * ldc;
      V::storeu(cr, V::add(V::loadu(cr), acc0[r]));
      V::storeu(cr + L, V::add(V::loadu(cr + L), acc1[r]));
    }
    return;
  }
  const __m256i m0 = V::mask(imin(cols, L));
  const __m256i m1 = V::mask(imax(cols - L, 0));
  for (int p = 0; p < k; ++p) {
    const T* bp = b + static_cast<std::size_t>(p) * ldb;
    const auto b0 = V::maskload(bp, m0);
    const auto b1 = V::maskload(bp + L, m1);
    for (int r = 0; r < R; ++r) {
      const auto av = V::set1(a[static_cast<std::size_t>(r) * lda + p]);
      acc0[r] = V::fmadd(av, b0, acc0[r]);
      acc1[r] = V::fmadd(av, b1, acc1[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    T* cr = c + static_cast<std::size_t>(r) * ldc;
    V::maskstore(cr, m0, V::add(V::maskload(cr, m0), acc0[r]));
    V::maskstore(cr + L, m1, V::add(V::maskload(cr + L, m1), acc1[r]));
  }
}

template <class T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c) {
  constexpr int kCols = 2 * Vec<T>::kLanes;
  // Column panels of B stay hot in cache while all rows of A stream past.
  constexpr int kPanel = 256;
  for (int j0 = 0; j0 < n; j0 += kPanel) {
    const int j1 = imin(n, j0 + kPanel);
    int i = 0;
    for (; i + 4 <= m; i += 4) {
      for (int j = j0; j < j1; j += kCols)
        micro_kernel<T, 4>(k, a + static_cast<std::size_t>(i) * k, k, b + j, n,
                           c + static_cast<std::size_t>(i) * n + j, n, imin(kCols, j1 - j));
    }
    for (; i < m; ++i) {
      for (int j = j0; j < j1; j += kCols)
        micro_kernel<T, 1>(k, a + static_cast<std::size_t>(i) * k, k, b + j, n,
                           c + static_cast<std::size_t>(i) * n + j, n, imin(kCols, j1 - j));
    }
  }
}


// C[i][j] += dot(A row i, B row j): both operands walk contiguous k.
template <class T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c) {
  using V = Vec<T>;
  constexpr int L = V::kLanes;
  const int kfull = k - k % L;
  const __m256i tail = V::mask(k - kfull);
  auto block = [&](int i, int j, int rows, int cols) {
    typename V::R acc[2][4];
    for (int r = 0; r < 2; ++r)
      for (int q = 0; q < 4; ++q) acc[r][q] = V::zero();
    const T* ar[2];
    const T* br[4];
    for (int r = 0; r < 2; ++r) ar[r] = a + static_cast<std::size_t>(i + imin(r, rows - 1)) * k;
    for (int q = 0; q < 4; ++q) br[q] = b + static_cast<std::size_t>(j + imin(q, cols - 1)) * k;
    for (int p = 0; p < kfull; p += L) {
      const auto a0 = V::loadu(ar[0] + p);
      const auto a1 = V::loadu(ar[1] + p);
      for (int q = 0; q < 4; ++q) {
        const auto bv = V::loadu(br[q] + p);
        acc[0][q] = V::fmadd(a0, bv, acc[0][q]);
        acc[1][q] = V::fmadd(a1, bv, acc[1][q]);
      }
    }
    if (kfull < k) {
      const auto a0 = V::maskload(ar[0] + kfull, tail);
      const auto a1 = V::maskload(ar[1] + kfull, tail);
      for (int q = 0; q < 4; ++q) {
        const auto bv = V::maskload(br[q] + kfull, tail);
        acc[0][q] = V::fmadd(a0, bv, acc[0][q]);
        acc[1][q] = V::fmadd(a1, bv, acc[1][q]);
      }
    }
    for (int r = 0; r < rows; ++r)
      for (int q = 0; q < cols; ++q) c[static_cast<std::size_t>(i + r) * n + j + q] += V::hsum(acc[r][q]);
  };
  for (int i = 0; i < m; i += 2)
    for (int j = 0; j < n; j += 4) block(i, j, imin(2, m - i), imin(4, n - j));
}

}  // namespace

template <class T>
void gemm(Trans ta, Trans tb, int m, int n, int k, const T* a, const T* b, T* c) {
  if (m <= 0 || n <= 0 || k <= 0) return;
  const T* aa = a;
  const T* bb = b;
  if (ta == Trans::kYes) {
    T* buf = scratch_a<T>().get(static_cast<std::size_t>(m) * k);
    transpose(a, k, m, buf);
    aa = buf;
  }
  if (tb == Trans::kYes && k >= 2 * Vec<T>::kLanes) {
    gemm_nt(m, n, k, aa, b, c);
    return;
  }
  if (tb == Trans::kYes) {
    T* buf = scratch_b<T>().get(static_cast<std::size_t>(k) * n);
    transpose(b, n, k, buf);
    bb = buf;
  }
  gemm_nn(m, n, k, aa, bb, c);
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t L = V::kLanes;
  auto s0 = V::zero();
  auto s1 = V::zero();
  std::size_t i = 0;
  for (; i + 2 * L <= n; i += 2 * L) {
    s0 = V::fmadd(V::loadu(a + i), V::loadu(b + i), s0);
    s1 = V::fmadd(V::loadu(a + i + L), V::loadu(b + i + L), s1);
  }
  T s = V::hsum(V::add(s0, s1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t L = V::kLanes;
  const auto av = V::set1(alpha);
  std::size_t i = 0;
  for (; i + L <= n; i += L) V::storeu(y + i, V::fmadd(av, V::loadu(x + i), V::loadu(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

namespace {

// exp on [-88, 88] via 2^n * p(r), r = x - n ln2; relative error near 2e-7.
__m256 exp_ps(__m256 x) {
  x = _mm256_min_ps(_mm256_max_ps(x, _mm256_set1_ps(-88.0f)), _mm256_set1_ps(88.0f));
  const __m256 n = _mm256_round_ps(_mm256_mul_ps(x, _mm256_set1_ps(1.44269504088896341f)),
                                   _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m256 r = _mm256_fnmadd_ps(n, _mm256_set1_ps(0.693359375f), x);
  r = _mm256_fnmadd_ps(n, _mm256_set1_ps(-2.12194440e-4f), r);
  __m256 p = _mm256_set1_ps(1.9875691500e-4f);
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(1.3981999507e-3f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(8.3334519073e-3f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(4.1665795894e-2f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(1.6666665459e-1f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(5.0000001201e-1f));
  p = _mm256_fmadd_ps(p, _mm256_mul_ps(r, r), _mm256_add_ps(r, _mm256_set1_ps(1.0f)));
  const __m256i e = _mm256_slli_epi32(_mm256_add_epi32(_mm256_cvtps_epi32(n), _mm256_set1_epi32(127)), 23);
  return _mm256_mul_ps(p, _mm256_castsi256_ps(e));
}

__m256 sigmoid_ps(__m256 x) {
  const __m256 one = _mm256_set1_ps(1.0f);
  return _mm256_div_ps(one, _mm256_add_ps(one, exp_ps(_mm256_sub_ps(_mm256_setzero_ps(), x))));
}

float sigmoid_one(float v) {
  alignas(32) float buf[8] = {v};
  _mm256_store_ps(buf, sigmoid_ps(_mm256_load_ps(buf)));
  return buf[0];
}

}  // namespace

template <>
void silu<float>(const float* x, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    _mm256_storeu_ps(y + i, _mm256_mul_ps(v, sigmoid_ps(v)));
  }
  for (; i < n; ++i) y[i] = x[i] * sigmoid_one(x[i]);
}

template <>
void silu_grad<float>(const float* x, const float* g, float* gx, std::size_t n) {
  const __m256 one = _mm256_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 s = sigmoid_ps(v);
    const __m256 d = _mm256_mul_ps(s, _mm256_fmadd_ps(v, _mm256_sub_ps(one, s), one));
    _mm256_storeu_ps(gx + i, _mm256_fmadd_ps(_mm256_loadu_ps(g + i), d, _mm256_loadu_ps(gx + i)));
  }
  for (; i < n; ++i) {
    const float s = sigmoid_one(x[i]);
    gx[i] += g[i] * s * (1.0f + x[i] * (1.0f - s));
  }
}

// Double precision is used for checking, not throughput.
template <>
void silu<double>(const double* x, double* y, std::size_t n) {
  scalar::silu(x, y, n);
}

template <>
void silu_grad<double>(const double* x, const double* g, double* gx, std::size_t n) {
  scalar::silu_grad(x, g, gx, n);
}

template void gemm<float>(Trans, Trans, int, int, int, const float*, const float*, float*);
template void gemm<double>(Trans, Trans, int, int, int, const double*, const double*, double*);
template float dot<float>(const float*, const float*, std::size_t);
template double dot<double>(const double*, const double*, std::size_t);
template void axpy<float>(float, const float*, float*, std::size_t);
template void axpy<double>(double, const double*, double*, std::size_t);

}  // namespace dctvae::simd::avx2
