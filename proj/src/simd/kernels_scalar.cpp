#include "vflbd/simd/kernels.hpp"

#include <algorithm>

namespace vflbd::simd {
namespace {

template <typename T>
T dot_ref(const T* a, const T* b, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T sqdist_ref(const T* a, const T* b, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    T d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

template <typename T>
void axpy_ref(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void gemm_nt_ref(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                 bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = dot_ref(a + i * k, b + j * k, k);
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

template <typename T>
void gemm_nn_ref(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                 bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, T(0));
    for (std::size_t p = 0; p < k; ++p) axpy_ref(a[i * k + p], b + p * n, ci, n);
  }
}

template <typename T>
void gemm_tn_ref(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                 bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      if (ap[i] != T(0)) axpy_ref(ap[i], bp, c + i * n, n);
    }
  }
}

template <typename T>
const KernelTable<T> kScalarTable{&dot_ref<T>,     &sqdist_ref<T>,  &axpy_ref<T>,
                                  &gemm_nt_ref<T>, &gemm_nn_ref<T>, &gemm_tn_ref<T>};

}  // namespace

template <typename T>
const KernelTable<T>& scalar_kernels() {
  return kScalarTable<T>;
}

template const KernelTable<float>& scalar_kernels<float>();
template const KernelTable<double>& scalar_kernels<double>();

}  // namespace vflbd::simd
