#include "pdc/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <vector>

namespace pdc {

std::string format_shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string format_real(double v) {
  std::string s = format_shortest(v);
  if (std::isfinite(v) && s.find_first_of(".eE") == std::string::npos) s += ".0";
  return s;
}

std::string format_precise(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

void write_histogram_csv(std::ostream& os, const Histogram& hist) {
  os << "lo,hi,count\n";
  for (std::size_t i = 0; i < hist.counts.size(); ++i)
    os << format_shortest(hist.edges[i]) << ',' << format_shortest(hist.edges[i + 1]) << ','
       << hist.counts[i] << '\n';
}

void write_precision_csv(std::ostream& os, const PrecisionByBucket& buckets) {
  os << "lo,hi,n,correct,precision\n";
  for (const auto& b : buckets.buckets) {
    os << format_shortest(b.iou_lo) << ',' << format_shortest(b.iou_hi) << ',' << b.n_boxes << ','
       << b.n_correct << ',';
    if (b.precision) os << format_shortest(*b.precision);
    os << '\n';
  }
}

namespace {

constexpr double kWidth = 640.0;
constexpr double kHeight = 360.0;
constexpr double kMargin = 40.0;

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Bars with heights relative to the largest value; labels under first and last edge.
void write_bars(std::ostream& os, const std::vector<double>& values, double lo_label,
                double hi_label, std::string_view title) {
  const double top = std::max(1e-300, *std::max_element(values.begin(), values.end()));
  const double plot_w = kWidth - 2 * kMargin;
  const double plot_h = kHeight - 2 * kMargin;
  const double bar_w = plot_w / static_cast<double>(values.size());
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        "font-size=\"14\">" << escape(title) << "</text>\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double h = values[i] > 0 ? plot_h * values[i] / top : 0.0;
    os << "<rect x=\"" << format_shortest(kMargin + bar_w * static_cast<double>(i)) << "\" y=\""
       << format_shortest(kMargin + plot_h - h) << "\" width=\"" << format_shortest(bar_w * 0.9)
       << "\" height=\"" << format_shortest(h) << "\" fill=\"steelblue\"/>\n";
  }
  os << "<line x1=\"" << kMargin << "\" y1=\"" << kMargin + plot_h << "\" x2=\"" << kMargin + plot_w
     << "\" y2=\"" << kMargin + plot_h << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << kMargin << "\" y=\"" << kHeight - 12
     << "\" font-family=\"sans-serif\" font-size=\"11\">" << format_shortest(lo_label) << "</text>\n";
  os << "<text x=\"" << kMargin + plot_w << "\" y=\"" << kHeight - 12
     << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
     << format_shortest(hi_label) << "</text>\n";
  os << "</svg>\n";
}

}  // namespace

void write_histogram_svg(std::ostream& os, const Histogram& hist, std::string_view title) {
  std::vector<double> values(hist.counts.begin(), hist.counts.end());
  write_bars(os, values, hist.edges.front(), hist.edges.back(), title);
}

void write_precision_svg(std::ostream& os, const PrecisionByBucket& buckets, std::string_view title) {
  std::vector<double> values;
  for (const auto& b : buckets.buckets) values.push_back(b.precision.value_or(0.0));
  if (values.empty()) values.push_back(0.0);
  const double lo = buckets.buckets.empty() ? 0.0 : buckets.buckets.front().iou_lo;
  const double hi = buckets.buckets.empty() ? 1.0 : buckets.buckets.back().iou_hi;
  write_bars(os, values, lo, hi, title);
}

}  // namespace pdc
