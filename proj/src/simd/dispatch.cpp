#include <atomic>

#include "kernels_impl.hpp"
#include "pdc/error.hpp"

namespace pdc::simd {

bool supported(Isa isa) noexcept {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(__x86_64__) || defined(_M_X64)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

Isa best_supported() noexcept { return supported(Isa::avx2) ? Isa::avx2 : Isa::scalar; }

std::string_view name(Isa isa) noexcept {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
  }
  return "unknown";
}

const KernelTable& table(Isa isa) {
  if (!supported(isa)) throw Error("kernel ISA not supported on this CPU: " + std::string(name(isa)));
#if defined(__x86_64__) || defined(_M_X64)
  if (isa == Isa::avx2) return detail::avx2_table;
#endif
  return detail::scalar_table;
}

namespace {

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> t{&table(best_supported())};
  return t;
}

}  // namespace

const KernelTable& active() noexcept { return *current().load(std::memory_order_acquire); }

void select(Isa isa) { current().store(&table(isa), std::memory_order_release); }

}  // namespace pdc::simd
