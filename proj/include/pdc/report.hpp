#pragma once

#include <ostream>
#include <string>
#include <string_view>

#include "pdc/diagnostics.hpp"

namespace pdc {

// Shortest decimal that parses back to the same double.
std::string format_shortest(double v);
// As format_shortest, but always shows a fraction or exponent ("0.0", "3.0").
std::string format_real(double v);
// Fixed 17 significant digits, for model files.
std::string format_precise(double v);

// `lo,hi,count`, one row per bin.
void write_histogram_csv(std::ostream& os, const Histogram& hist);
// `lo,hi,n,correct,precision`; precision is empty for empty buckets.
void write_precision_csv(std::ostream& os, const PrecisionByBucket& buckets);

// Static bar chart, one bar per bin.
void write_histogram_svg(std::ostream& os, const Histogram& hist, std::string_view title);
void write_precision_svg(std::ostream& os, const PrecisionByBucket& buckets, std::string_view title);

}  // namespace pdc
