// Compiled with -mavx2 -mfma; only reached through the dispatcher after a CPUID check.
#include <immintrin.h>

#include <algorithm>

#include "kernels_internal.hpp"

namespace vflbd::simd::detail {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehdup_ps(lo);
  __m128 s = _mm_add_ps(lo, sh);
  sh = _mm_movehl_ps(sh, s);
  s = _mm_add_ss(s, sh);
  return _mm_cvtss_f32(s);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d h = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, h));
}

// Thin traits so each kernel is written once for both lane types.
template <typename T>
struct Lanes;

template <>
struct Lanes<float> {
  using V = __m256;
  static constexpr std::size_t width = 8;
  static V zero() { return _mm256_setzero_ps(); }
  static V load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, V v) { _mm256_storeu_ps(p, v); }
  static V set1(float x) { return _mm256_set1_ps(x); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  static V sub(V a, V b) { return _mm256_sub_ps(a, b); }
  static V add(V a, V b) { return _mm256_add_ps(a, b); }
  static float sum(V v) { return hsum(v); }
};

template <>
struct Lanes<double> {
  using V = __m256d;
  static constexpr std::size_t width = 4;
  static V zero() { return _mm256_setzero_pd(); }
  static V load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, V v) { _mm256_storeu_pd(p, v); }
  static V set1(double x) { return _mm256_set1_pd(x); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  static V sub(V a, V b) { return _mm256_sub_pd(a, b); }
  static V add(V a, V b) { return _mm256_add_pd(a, b); }
  static double sum(V v) { return hsum(v); }
};

template <typename T>
T dot_avx2(const T* a, const T* b, std::size_t n) {
  using L = Lanes<T>;
  constexpr std::size_t w = L::width;
  auto acc0 = L::zero(), acc1 = L::zero();
  std::size_t i = 0;
  for (; i + 2 * w <= n; i += 2 * w) {
    acc0 = L::fmadd(L::load(a + i), L::load(b + i), acc0);
    acc1 = L::fmadd(L::load(a + i + w), L::load(b + i + w), acc1);
  }
  for (; i + w <= n; i += w) acc0 = L::fmadd(L::load(a + i), L::load(b + i), acc0);
  T s = L::sum(L::add(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T sqdist_avx2(const T* a, const T* b, std::size_t n) {
  using L = Lanes<T>;
  constexpr std::size_t w = L::width;
  auto acc = L::zero();
  std::size_t i = 0;
  for (; i + w <= n; i += w) {
    auto d = L::sub(L::load(a + i), L::load(b + i));
    acc = L::fmadd(d, d, acc);
  }
  T s = L::sum(acc);
  for (; i < n; ++i) {
    T d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

template <typename T>
void axpy_avx2(T alpha, const T* x, T* y, std::size_t n) {
  using L = Lanes<T>;
  constexpr std::size_t w = L::width;
  auto va = L::set1(alpha);
  std::size_t i = 0;
  for (; i + w <= n; i += w) L::store(y + i, L::fmadd(va, L::load(x + i), L::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// 1x4 micro-kernel: one row of A against four rows of B.
template <typename T>
void gemm_nt_avx2(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                  bool accumulate) {
  using L = Lanes<T>;
  constexpr std::size_t w = L::width;
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const T* b0 = b + j * k;
      const T* b1 = b0 + k;
      const T* b2 = b1 + k;
      const T* b3 = b2 + k;
      auto s0 = L::zero(), s1 = L::zero(), s2 = L::zero(), s3 = L::zero();
      std::size_t p = 0;
      for (; p + w <= k; p += w) {
        auto va = L::load(ai + p);
        s0 = L::fmadd(va, L::load(b0 + p), s0);
        s1 = L::fmadd(va, L::load(b1 + p), s1);
        s2 = L::fmadd(va, L::load(b2 + p), s2);
        s3 = L::fmadd(va, L::load(b3 + p), s3);
      }
      T r0 = L::sum(s0), r1 = L::sum(s1), r2 = L::sum(s2), r3 = L::sum(s3);
      for (; p < k; ++p) {
        r0 += ai[p] * b0[p];
        r1 += ai[p] * b1[p];
        r2 += ai[p] * b2[p];
        r3 += ai[p] * b3[p];
      }
      if (accumulate) {
        ci[j] += r0;
        ci[j + 1] += r1;
        ci[j + 2] += r2;
        ci[j + 3] += r3;
      } else {
        ci[j] = r0;
        ci[j + 1] = r1;
        ci[j + 2] = r2;
        ci[j + 3] = r3;
      }
    }
    for (; j < n; ++j) {
      T r = dot_avx2(ai, b + j * k, k);
      ci[j] = accumulate ? ci[j] + r : r;
    }
  }
}

template <typename T>
void gemm_nn_avx2(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                  bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      T s = a[i * k + p];
      if (s != T(0)) axpy_avx2(s, b + p * n, ci, n);
    }
  }
}

template <typename T>
void gemm_tn_avx2(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                  bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      if (ap[i] != T(0)) axpy_avx2(ap[i], bp, c + i * n, n);
    }
  }
}

template <typename T>
const KernelTable<T> kAvx2Table{&dot_avx2<T>,     &sqdist_avx2<T>,  &axpy_avx2<T>,
                                &gemm_nt_avx2<T>, &gemm_nn_avx2<T>, &gemm_tn_avx2<T>};

}  // namespace

template <typename T>
const KernelTable<T>& avx2_table() {
  return kAvx2Table<T>;
}

template const KernelTable<float>& avx2_table<float>();
template const KernelTable<double>& avx2_table<double>();

}  // namespace vflbd::simd::detail
