// SPDX-License-Identifier: Apache-2.0

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <string_view>

#include "dctvae/simd/kernels.hpp"

namespace dctvae::simd {
namespace {

bool host_has_avx2() {
#if defined(DCTVAE_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa initial_isa() {
  Isa isa = detected_isa();
  if (const char* env = std::getenv("DCTVAE_ISA")) {
    const std::string_view v(env);
    if (v == "scalar") isa = Isa::kScalar;
    else if (v == "avx2" && isa_supported(Isa::kAvx2)) isa = Isa::kAvx2;
  }
  return isa;
}

std::atomic<Isa>& active() {
  static std::atomic<Isa> isa{initial_isa()};
  return isa;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::kScalar: return "scalar";
    case Isa::kAvx2: return "avx2";
  }
  return "unknown";
}

bool isa_supported(Isa isa) {
  if (isa == Isa::kScalar) return true;
  static const bool avx2 = host_has_avx2();
  return avx2;
}

Isa detected_isa() { return isa_supported(Isa::kAvx2) ? Isa::kAvx2 : Isa::kScalar; }

Isa active_isa() { return active().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  if (!isa_supported(isa))
    throw std::invalid_argument("ISA '" + std::string(isa_name(isa)) + "' is not supported on this host");
  active().store(isa, std::memory_order_relaxed);
}

#if defined(DCTVAE_HAVE_AVX2)
#define DCTVAE_DISPATCH(fn, ...) \
  (active_isa() == Isa::kAvx2 ? avx2::fn(__VA_ARGS__) : scalar::fn(__VA_ARGS__))
#else
#define DCTVAE_DISPATCH(fn, ...) scalar::fn(__VA_ARGS__)
#endif

template <class T>
void gemm(Trans ta, Trans tb, int m, int n, int k, const T* a, const T* b, T* c) {
  DCTVAE_DISPATCH(gemm<T>, ta, tb, m, n, k, a, b, c);
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  return DCTVAE_DISPATCH(dot<T>, a, b, n);
}

template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  DCTVAE_DISPATCH(axpy<T>, alpha, x, y, n);
}

template <class T>
void silu(const T* x, T* y, std::size_t n) {
  DCTVAE_DISPATCH(silu<T>, x, y, n);
}

template <class T>
void silu_grad(const T* x, const T* g, T* gx, std::size_t n) {
  DCTVAE_DISPATCH(silu_grad<T>, x, g, gx, n);
}

#undef DCTVAE_DISPATCH

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

#if !defined(DCTVAE_HAVE_AVX2)
namespace avx2 {
template <class T>
void gemm(Trans ta, Trans tb, int m, int n, int k, const T* a, const T* b, T* c) {
  scalar::gemm(ta, tb, m, n, k, a, b, c);
}
template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  return scalar::dot(a, b, n);
}
template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  scalar::axpy(alpha, x, y, n);
}
template <class T>
void silu(const T* x, T* y, std::size_t n) {
  scalar::silu(x, y, n);
}
template <class T>
void silu_grad(const T* x, const T* g, T* gx, std::size_t n) {
  scalar::silu_grad(x, g, gx, n);
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
}  // namespace avx2
#endif

}  // namespace dctvae::simd
