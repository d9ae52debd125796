#pragma once

// Data-parallel inner loops used by the dense/conv layers, the VAE losses and
// the metric code. Each kernel has a portable scalar reference and an AVX2+FMA
// variant; the variant is chosen once at runtime from CPUID and can be pinned
// with set_isa() or the VFLBD_ISA environment variable ("scalar" / "avx2").
//
// Matrices are dense row-major. Shapes in the gemm names follow BLAS: "nt"
// means the second operand is used transposed.

#include <cstddef>
#include <string_view>

namespace vflbd::simd {

enum class Isa { Scalar, Avx2 };

std::string_view to_string(Isa isa);

bool avx2_available();
Isa active_isa();
// Pinning Avx2 on a machine without it falls back to Scalar; returns the ISA in effect.
Isa set_isa(Isa isa);

template <typename T>
struct KernelTable {
  T (*dot)(const T* a, const T* b, std::size_t n);
  T (*sqdist)(const T* a, const T* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
  // C[m x n] (+)= A[m x k] * B[n x k]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                  bool accumulate);
  // C[m x n] (+)= A[m x k] * B[k x n]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                  bool accumulate);
  // C[m x n] (+)= A[k x m]^T * B[k x n]
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                  bool accumulate);
};

template <typename T>
const KernelTable<T>& scalar_kernels();
template <typename T>
const KernelTable<T>& avx2_kernels();  // only valid when avx2_available()
template <typename T>
const KernelTable<T>& kernels();  // table for the active ISA

template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) { return kernels<T>().dot(a, b, n); }
template <typename T>
inline T sqdist(const T* a, const T* b, std::size_t n) { return kernels<T>().sqdist(a, b, n); }
template <typename T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) { kernels<T>().axpy(alpha, x, y, n); }

}  // namespace vflbd::simd
