#include "pdc/diagnostics.hpp"

#include <algorithm>
#include <cmath>

#include "pdc/error.hpp"
#include "pdc/simd/kernels.hpp"

namespace pdc {

namespace {

void check_sets(const Matrix& a, const Matrix& b) {
  if (a.rows() == 0 || b.rows() == 0) throw Error("mmd: point sets must be non-empty");
  if (a.cols() != b.cols()) throw Error("mmd: point sets differ in dimension");
}

// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      comp_ += (sum_ - t) + x;
    else
      comp_ += (x - t) + sum_;
    sum_ = t;
  }
  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

std::vector<double> column_means(const Matrix& m) {
  std::vector<double> mean(m.cols(), 0.0);
  std::vector<CompensatedSum> sums(m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) sums[j].add(m(i, j));
  for (std::size_t j = 0; j < m.cols(); ++j) mean[j] = sums[j].value() / static_cast<double>(m.rows());
  return mean;
}

double kernel_mean(const Matrix& x, const Matrix& y, double gamma) {
  const auto& k = simd::active();
  CompensatedSum s;
  for (std::size_t i = 0; i < x.rows(); ++i)
    s.add(k.rbf_row_sum(x.row(i).data(), y.data(), y.rows(), y.cols(), gamma));
  return s.value() / (static_cast<double>(x.rows()) * static_cast<double>(y.rows()));
}

}  // namespace

double mmd_linear(const Matrix& a, const Matrix& b) {
  check_sets(a, b);
  const auto ma = column_means(a);
  const auto mb = column_means(b);
  double s = 0.0;
  for (std::size_t j = 0; j < ma.size(); ++j) s += (ma[j] - mb[j]) * (ma[j] - mb[j]);
  return std::sqrt(s);
}

double median_heuristic_bandwidth(const Matrix& a, const Matrix& b, std::size_t max_points) {
  check_sets(a, b);
  const std::size_t n = a.rows() + b.rows();
  const std::size_t stride = n > max_points ? (n + max_points - 1) / max_points : 1;
  std::vector<const double*> pts;
  for (std::size_t i = 0; i < n; i += stride)
    pts.push_back(i < a.rows() ? a.row(i).data() : b.row(i - a.rows()).data());
  if (pts.size() < 2) return 1.0;

  const auto& k = simd::active();
  std::vector<double> dist;
  dist.reserve(pts.size() * (pts.size() - 1) / 2);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j)
      dist.push_back(std::sqrt(k.squared_distance(pts[i], pts[j], a.cols())));

  const std::size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
  double median = dist[mid];
  if (dist.size() % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid));
    median = 0.5 * (median + lower);
  }
  return median > 0.0 ? median : 1.0;
}

double mmd_rbf(const Matrix& a, const Matrix& b, Bandwidth bandwidth) {
  check_sets(a, b);
  const double h = std::holds_alternative<double>(bandwidth) ? std::get<double>(bandwidth)
                                                             : median_heuristic_bandwidth(a, b);
  if (!(h > 0.0) || !std::isfinite(h)) throw Error("mmd: bandwidth must be positive");
  const double gamma = 1.0 / (2.0 * h * h);
  const double v = kernel_mean(a, a, gamma) + kernel_mean(b, b, gamma) - 2.0 * kernel_mean(a, b, gamma);
  return std::sqrt(std::max(v, 0.0));
}

Matrix offsets_matrix(std::span<const OffsetVec> offsets) {
  Matrix m(offsets.size(), 4);
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const Vec4 v = offsets[i].as_array();
    std::copy(v.begin(), v.end(), m.row(i).begin());
  }
  return m;
}

Matrix corner_matrix(std::span<const BBox> boxes) {
  Matrix m(boxes.size(), 4);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    m(i, 0) = boxes[i].x0();
    m(i, 1) = boxes[i].y0();
    m(i, 2) = boxes[i].x1();
    m(i, 3) = boxes[i].y1();
  }
  return m;
}

Histogram::Histogram(std::vector<double> e) : edges(std::move(e)) {
  if (edges.size() < 2) throw Error("histogram needs at least two edges");
  for (std::size_t i = 0; i + 1 < edges.size(); ++i)
    if (!(edges[i] < edges[i + 1])) throw Error("histogram edges must be strictly increasing");
  counts.assign(edges.size() - 1, 0);
}

std::optional<std::size_t> Histogram::bin_of(double value) const noexcept {
  if (!(value >= edges.front()) || !(value <= edges.back())) return std::nullopt;
  if (value == edges.back()) return counts.size() - 1;
  const auto it = std::upper_bound(edges.begin(), edges.end(), value);
  return static_cast<std::size_t>(it - edges.begin()) - 1;
}

void Histogram::add(double value) noexcept {
  if (const auto bin = bin_of(value)) {
    ++counts[*bin];
    ++total;
  } else {
    ++outside;
  }
}

std::vector<double> uniform_edges(double lo, double hi, std::size_t bins) {
  if (bins == 0 || !(lo < hi)) throw Error("uniform_edges: need bins > 0 and lo < hi");
  std::vector<double> e(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i)
    e[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  e.back() = hi;
  return e;
}

namespace {

const BBox& matched(std::span<const BBox> gts, std::span<const std::size_t> matching, std::size_t i) {
  if (i >= matching.size() || matching[i] >= gts.size())
    throw Error("prediction " + std::to_string(i) + " has no matched ground truth");
  return gts[matching[i]];
}

}  // namespace

Histogram iou_histogram(std::span<const BBox> preds, std::span<const BBox> gts,
                        std::span<const std::size_t> matching, std::vector<double> edges) {
  Histogram hist(std::move(edges));
  for (std::size_t i = 0; i < preds.size(); ++i) hist.add(iou(preds[i], matched(gts, matching, i)));
  return hist;
}

PrecisionByBucket precision_by_iou(std::span<const PredictedBox> preds,
                                   std::span<const GroundTruth> gts,
                                   std::span<const std::size_t> matching,
                                   std::span<const double> bucket_edges) {
  Histogram binner(std::vector<double>(bucket_edges.begin(), bucket_edges.end()));
  PrecisionByBucket out;
  for (std::size_t b = 0; b + 1 < bucket_edges.size(); ++b)
    out.buckets.push_back({bucket_edges[b], bucket_edges[b + 1], 0, 0, std::nullopt});
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (i >= matching.size() || matching[i] >= gts.size())
      throw Error("prediction " + std::to_string(i) + " has no matched ground truth");
    const GroundTruth& gt = gts[matching[i]];
    if (const auto bin = binner.bin_of(iou(preds[i].box, gt.box))) {
      auto& bucket = out.buckets[*bin];
      ++bucket.n_boxes;
      if (preds[i].predicted_class == gt.class_label) ++bucket.n_correct;
    }
  }
  for (auto& bucket : out.buckets)
    if (bucket.n_boxes > 0)
      bucket.precision = static_cast<double>(bucket.n_correct) / static_cast<double>(bucket.n_boxes);
  return out;
}

OffsetReport offset_report(std::span<const OffsetVec> offsets,
                           const std::optional<std::array<std::vector<double>, 4>>& edges) {
  if (offsets.empty()) throw Error("offset report needs at least one offset");
  std::array<std::vector<double>, 4> e;
  if (edges) {
    e = *edges;
  } else {
    for (int d = 0; d < 4; ++d) {
      double lo = offsets.front().as_array()[d];
      double hi = lo;
      for (const auto& o : offsets) {
        lo = std::min(lo, o.as_array()[d]);
        hi = std::max(hi, o.as_array()[d]);
      }
      if (!(lo < hi)) {
        lo -= 0.5;
        hi += 0.5;
      }
      e[d] = uniform_edges(lo, hi, kDefaultReportBins);
    }
  }
  OffsetReport report{{Histogram(e[0]), Histogram(e[1]), Histogram(e[2]), Histogram(e[3])}, {}};
  OffsetAccumulator acc;
  for (const auto& o : offsets) {
    const Vec4 v = o.as_array();
    for (int d = 0; d < 4; ++d) report.histograms[d].add(v[d]);
    acc.add(o);
  }
  report.fit = finalize_gaussian(acc);
  return report;
}

}  // namespace pdc
