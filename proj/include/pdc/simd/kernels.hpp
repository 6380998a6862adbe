#pragma once

#include <cstddef>
#include <string_view>

// Data-parallel inner loops. Each kernel has a scalar reference variant and
// an AVX2 variant; the fastest supported one is chosen at first use. The
// equivalence tests pin how far the variants may drift apart:
//   encode_offsets, decode_offsets, rbf_row_sum: bit-identical
//   dot, squared_distance, gram: reassociated sums, ~1e-15 relative
//   axpy: bit-identical
namespace pdc::simd {

enum class Isa { scalar, avx2 };

struct KernelTable {
  Isa isa;
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*squared_distance)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // out (n x n, row-major) = Z Z^T for row-major Z (n x d).
  void (*gram)(const double* z, std::size_t n, std::size_t d, double* out);
  // Boxes and offsets are packed as 4 doubles each (cx, cy, w, h).
  // out_k = (proposal_k - gt_k) / (w, h, w, h) of gt_k.
  void (*encode_offsets)(const double* proposals, const double* gts, double* out, std::size_t n);
  // out_k = gt_k + offset_k * (w, h, w, h) of gt_k.
  void (*decode_offsets)(const double* gts, const double* offsets, double* out, std::size_t n);
  // sum_j exp(-gamma * |x - y_j|^2) over row-major ys (ny x d), in j order.
  double (*rbf_row_sum)(const double* x, const double* ys, std::size_t ny, std::size_t d,
                        double gamma);
};

bool supported(Isa isa) noexcept;
Isa best_supported() noexcept;
std::string_view name(Isa isa) noexcept;

// Kernel table for a specific ISA; throws pdc::Error when the CPU lacks it.
const KernelTable& table(Isa isa);

// Table used by the library. Defaults to best_supported().
const KernelTable& active() noexcept;

// Override the active table (benchmarks, equivalence tests).
void select(Isa isa);

}  // namespace pdc::simd
