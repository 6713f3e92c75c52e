// SPDX-License-Identifier: Apache-2.0
//
// Dense inner-loop kernels with a scalar reference implementation and an
// AVX2/FMA variant. The active variant is chosen once at startup from the
// host CPU features and can be overridden with DCTVAE_ISA=scalar|avx2 or
// set_active_isa().

#pragma once

#include <cstddef>
#include <string_view>

namespace dctvae::simd {

enum class Isa { kScalar, kAvx2 };

enum class Trans { kNo, kYes };

std::string_view isa_name(Isa isa);

// Best variant the host supports (and the build includes).
Isa detected_isa();
bool isa_supported(Isa isa);

Isa active_isa();
// Throws std::invalid_argument when the host cannot run `isa`.
void set_active_isa(Isa isa);

// C[m x n] += op(A) * op(B), all row-major and densely packed.
// op(A) is m x k: A is stored m x k (kNo) or k x m (kYes).
// op(B) is k x n: B is stored k x n (kNo) or n x k (kYes).
template <class T>
void gemm(Trans ta, Trans tb, int m, int n, int k, const T* a, const T* b, T* c);

template <class T>
T dot(const T* a, const T* b, std::size_t n);

// y += alpha * x
template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n);

// y = x * sigmoid(x)
template <class T>
void silu(const T* x, T* y, std::size_t n);

// gx += g * silu'(x)
template <class T>
void silu_grad(const T* x, const T* g, T* gx, std::size_t n);

// Explicit variants, used by the equivalence tests and by the dispatcher.
namespace scalar {
template <class T>
void gemm(Trans ta, Trans tb, int m, int n, int k, const T* a, const T* b, T* c);
template <class T>
T dot(const T* a, const T* b, std::size_t n);
template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n);
template <class T>
void silu(const T* x, T* y, std::size_t n);
template <class T>
void silu_grad(const T* x, const T* g, T* gx, std::size_t n);
}  // namespace scalar

namespace avx2 {
// Only callable when isa_supported(Isa::kAvx2).
template <class T>
void gemm(Trans ta, Trans tb, int m, int n, int k, const T* a, const T* b, T* c);
template <class T>
T dot(const T* a, const T* b, std::size_t n);
template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n);
template <class T>
void silu(const T* x, T* y, std::size_t n);
template <class T>
void silu_grad(const T* x, const T* g, T* gx, std::size_t n);
}  // namespace avx2

}  // namespace dctvae::simd
