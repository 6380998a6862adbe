#pragma once

#include "pdc/simd/kernels.hpp"

namespace pdc::simd::detail {

extern const KernelTable scalar_table;
#if defined(__x86_64__) || defined(_M_X64)
extern const KernelTable avx2_table;
#endif

}  // namespace pdc::simd::detail
