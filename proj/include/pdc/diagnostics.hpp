#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "pdc/geometry.hpp"
#include "pdc/matrix.hpp"
#include "pdc/sampling.hpp"
#include "pdc/statistics.hpp"

namespace pdc {

// ---------------------------------------------------------------------------
// Maximum mean discrepancy. Point sets are matrices with one point per row.

// Euclidean distance between the two sample means (identity feature map).
double mmd_linear(const Matrix& a, const Matrix& b);

struct MedianHeuristic {};
using Bandwidth = std::variant<double, MedianHeuristic>;

// Median of pooled pairwise Euclidean distances. Pools larger than
// `max_points` are thinned with a fixed stride first. Falls back to 1 when
// the median is zero.
double median_heuristic_bandwidth(const Matrix& a, const Matrix& b,
                                  std::size_t max_points = 2000);

/// Biased V-statistic with k(x, y) = exp(-|x - y|^2 / (2 h^2)):
///   sqrt(max(mean k(a, a') + mean k(b, b') - 2 mean k(a, b), 0)).
/// Row sums come from the SIMD kernels and are combined with compensated
/// summation, so the value does not depend on the ISA beyond the kernel
/// equivalence guarantee.
double mmd_rbf(const Matrix& a, const Matrix& b, Bandwidth bandwidth = MedianHeuristic{});

Matrix offsets_matrix(std::span<const OffsetVec> offsets);
// Rows (x0, y0, x1, y1).
Matrix corner_matrix(std::span<const BBox> boxes);

// ---------------------------------------------------------------------------
// Histograms. Bins are left-closed, [e_i, e_{i+1}), except the last bin
// which also holds its right edge. Values outside [edges.front(),
// edges.back()] are not binned and are counted in `outside`.

struct Histogram {
  std::vector<double> edges;
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;    // binned values
  std::uint64_t outside = 0;  // values outside the edges (and NaN)

  Histogram() : Histogram(std::vector<double>{0.0, 1.0}) {}
  explicit Histogram(std::vector<double> edges);

  std::optional<std::size_t> bin_of(double value) const noexcept;
  void add(double value) noexcept;
};

std::vector<double> uniform_edges(double lo, double hi, std::size_t bins);

inline constexpr std::size_t kUnmatched = std::numeric_limits<std::size_t>::max();

// IoU of each prediction against its matched ground truth (matching[i] is
// an index into gts). Throws on an unmatched prediction.
Histogram iou_histogram(std::span<const BBox> preds, std::span<const BBox> gts,
                        std::span<const std::size_t> matching, std::vector<double> edges);

struct PredictedBox {
  BBox box;
  int predicted_class = 0;
};

struct PrecisionBucket {
  double iou_lo = 0.0;
  double iou_hi = 0.0;
  std::uint64_t n_boxes = 0;
  std::uint64_t n_correct = 0;
  std::optional<double> precision;  // absent for empty buckets
};

struct PrecisionByBucket {
  std::vector<PrecisionBucket> buckets;
};

// Fraction of predictions whose class equals the matched gt's class, per IoU
// bucket (same edge convention as Histogram).
PrecisionByBucket precision_by_iou(std::span<const PredictedBox> preds,
                                   std::span<const GroundTruth> gts,
                                   std::span<const std::size_t> matching,
                                   std::span<const double> bucket_edges);

struct OffsetReport {
  std::array<Histogram, 4> histograms;  // dx, dy, dw, dh
  DiagonalGaussian4 fit;
};

inline constexpr std::size_t kDefaultReportBins = 21;

// Per-dimension histograms plus the fitted Gaussian. Without explicit edges
// each dimension gets kDefaultReportBins bins over its data range (a unit
// window centred on the value for constant dimensions).
OffsetReport offset_report(std::span<const OffsetVec> offsets,
                           const std::optional<std::array<std::vector<double>, 4>>& edges = {});

}  // namespace pdc
