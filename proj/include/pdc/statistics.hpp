#pragma once

#include <cstdint>
#include <map>
#include <span>

#include "pdc/geometry.hpp"

namespace pdc {

/// Single-pass mean / sum-of-squared-deviations over offset vectors
/// (Welford update, Chan merge). Parallel reductions must go through
/// merge(); accumulators are never shared between threads.
struct OffsetAccumulator {
  std::uint64_t count = 0;
  Vec4 mean{};
  Vec4 m2{};

  void add(const OffsetVec& off) noexcept;
  void merge(const OffsetAccumulator& other) noexcept;
};

OffsetAccumulator accumulate(OffsetAccumulator acc, const OffsetVec& off) noexcept;

struct DiagonalGaussian4 {
  Vec4 mu{};
  Vec4 var{};

  Vec4 sigma() const noexcept;
  void validate() const;

  friend bool operator==(const DiagonalGaussian4&, const DiagonalGaussian4&) = default;
};

struct Uniform4 {
  Vec4 lo{};
  Vec4 hi{};

  void validate() const;

  friend bool operator==(const Uniform4&, const Uniform4&) = default;
};

// Population statistics: var = m2 / count. Throws on an empty accumulator.
DiagonalGaussian4 finalize_gaussian(const OffsetAccumulator& acc);

// Convenience: accumulate then finalize.
DiagonalGaussian4 fit_gaussian(std::span<const OffsetVec> offsets);

struct LabeledOffset {
  int class_label = 0;
  OffsetVec offset;
};

// Per-class statistics (off by default everywhere; pooled statistics are
// the standard fit).
std::map<int, DiagonalGaussian4> fit_gaussian_per_class(std::span<const LabeledOffset> offsets);

/// Area under min(N(x; mu, sigma^2), U(x; lo, hi)), i.e. the intersection of
/// the two densities. Integrated with adaptive Simpson on the pieces between
/// the points where the Gaussian density crosses the uniform height.
double uniform_gaussian_overlap(double mu, double sigma, double lo, double hi,
                                double tolerance = 1e-12);

// Half-width a* maximizing the overlap of U(mu - a, mu + a) with N(mu, sigma^2),
// by ternary search over (0, 8 sigma].
double optimal_uniform_half_width(double sigma);

// Per-dimension [mu - a*, mu + a*]. Throws when any variance is zero.
Uniform4 fit_optimal_uniform(const DiagonalGaussian4& g);

}  // namespace pdc
