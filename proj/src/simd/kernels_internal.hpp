#pragma once

#include "vflbd/simd/kernels.hpp"

namespace vflbd::simd::detail {

template <typename T>
const KernelTable<T>& avx2_table();

}  // namespace vflbd::simd::detail
