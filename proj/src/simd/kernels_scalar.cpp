// SPDX-License-Identifier: Apache-2.0

#include "dctvae/simd/kernels.hpp"

#include <cmath>

namespace dctvae::simd::scalar {

template <class T>
void gemm(Trans ta, Trans tb, int m, int n, int k, const T* a, const T* b, T* c) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = ta == Trans::kNo ? a[static_cast<std::size_t>(i) * k + p]
                                    : a[static_cast<std::size_t>(p) * m + i];
      if (tb == Trans::kNo) {
        const T* brow = b + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (int j = 0; j < n; ++j) crow[j] += av * b[static_cast<std::size_t>(j) * k + p];
      }
    }
  }
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void silu(const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] / (T(1) + std::exp(-x[i]));
}

template <class T>
void silu_grad(const T* x, const T* g, T* gx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + std::exp(-x[i]));
    gx[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
  }
}

template void gemm<float>(Trans, Trans, int, int, int, const float*, const float*, float*);
template void gemm<double>(Trans, Trans, int, int, int, const double*, const double*, double*);
template float dot<float>(const float*, const float*, std::size_t);
template double dot<double>(const double*, const double*, std::size_t);
template void axpy<float>(float, const float*, float*, std::size_t);
template void axpy<double>(double, const double*, double*, std::size_t);
template void silu<float>(const float*, float*, std::size_t);
template void silu<double>(const double*, double*, std::size_t);
template void silu_grad<float>(const float*, const float*, float*, std::size_t);
template void silu_grad<double>(const double*, const double*, double*, std::size_t);

}  // namespace dctvae::simd::scalar
