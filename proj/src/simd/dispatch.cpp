#include <atomic>
#include <cstdlib>
#include <string>

#include "kernels_internal.hpp"

namespace vflbd::simd {
namespace {

bool detect_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa initial_isa() {
  if (const char* env = std::getenv("VFLBD_ISA")) {
    if (std::string(env) == "scalar") return Isa::Scalar;
  }
  return detect_avx2() ? Isa::Avx2 : Isa::Scalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{initial_isa()};
  return isa;
}

}  // namespace

std::string_view to_string(Isa isa) { return isa == Isa::Avx2 ? "avx2" : "scalar"; }

bool avx2_available() {
  static const bool ok = detect_avx2();
  return ok;
}

Isa active_isa() { return current().load(std::memory_order_relaxed); }

Isa set_isa(Isa isa) {
  if (isa == Isa::Avx2 && !avx2_available()) isa = Isa::Scalar;
  current().store(isa, std::memory_order_relaxed);
  return isa;
}

template <typename T>
const KernelTable<T>& avx2_kernels() {
  return detail::avx2_table<T>();
}

template <typename T>
const KernelTable<T>& kernels() {
  return active_isa() == Isa::Avx2 ? detail::avx2_table<T>() : scalar_kernels<T>();
}

template const KernelTable<float>& avx2_kernels<float>();
template const KernelTable<double>& avx2_kernels<double>();
template const KernelTable<float>& kernels<float>();
template const KernelTable<double>& kernels<double>();

}  // namespace vflbd::simd
