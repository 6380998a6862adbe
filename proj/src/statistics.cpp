#include "pdc/statistics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "pdc/error.hpp"

namespace pdc {

void OffsetAccumulator::add(const OffsetVec& off) noexcept {
  ++count;
  const Vec4 x = off.as_array();
  const double n = static_cast<double>(count);
  for (int d = 0; d < 4; ++d) {
    const double delta = x[d] - mean[d];
    mean[d] += delta / n;
    m2[d] += delta * (x[d] - mean[d]);
  }
}

void OffsetAccumulator::merge(const OffsetAccumulator& other) noexcept {
  if (other.count == 0) return;
  if (count == 0) {
    *this = other;
    return;
  }
  const double na = static_cast<double>(count);
  const double nb = static_cast<double>(other.count);
  const double n = na + nb;
  for (int d = 0; d < 4; ++d) {
    const double delta = other.mean[d] - mean[d];
    mean[d] += delta * (nb / n);
    m2[d] += other.m2[d] + delta * delta * (na * nb / n);
  }
  count += other.count;
}

OffsetAccumulator accumulate(OffsetAccumulator acc, const OffsetVec& off) noexcept {
  acc.add(off);
  return acc;
}

Vec4 DiagonalGaussian4::sigma() const noexcept {
  Vec4 s;
  for (int d = 0; d < 4; ++d) s[d] = std::sqrt(var[d]);
  return s;
}

void DiagonalGaussian4::validate() const {
  for (int d = 0; d < 4; ++d) {
    if (!std::isfinite(mu[d]) || !std::isfinite(var[d]))
      throw Error("gaussian model has non-finite parameters");
    if (var[d] < 0.0) throw Error("gaussian model has negative variance");
  }
}

void Uniform4::validate() const {
  for (int d = 0; d < 4; ++d) {
    if (!std::isfinite(lo[d]) || !std::isfinite(hi[d]))
      throw Error("uniform model has non-finite bounds");
    if (!(lo[d] < hi[d])) throw Error("uniform model needs lo < hi in every dimension");
  }
}

DiagonalGaussian4 finalize_gaussian(const OffsetAccumulator& acc) {
  if (acc.count == 0) throw Error("cannot fit statistics from zero offsets");
  DiagonalGaussian4 g;
  g.mu = acc.mean;
  for (int d = 0; d < 4; ++d) g.var[d] = std::max(acc.m2[d], 0.0) / static_cast<double>(acc.count);
  return g;
}

DiagonalGaussian4 fit_gaussian(std::span<const OffsetVec> offsets) {
  OffsetAccumulator acc;
  for (const auto& o : offsets) acc.add(o);
  return finalize_gaussian(acc);
}

std::map<int, DiagonalGaussian4> fit_gaussian_per_class(std::span<const LabeledOffset> offsets) {
  std::map<int, OffsetAccumulator> accs;
  for (const auto& lo : offsets) accs[lo.class_label].add(lo.offset);
  std::map<int, DiagonalGaussian4> out;
  for (const auto& [label, acc] : accs) out.emplace(label, finalize_gaussian(acc));
  return out;
}

namespace {

struct SimpsonPanel {
  double a, b, fa, fm, fb, whole;
};

template <typename F>
double adaptive_simpson(const F& f, const SimpsonPanel& p, double eps, int depth) {
  const double m = 0.5 * (p.a + p.b);
  const double lm = 0.5 * (p.a + m);
  const double rm = 0.5 * (m + p.b);
  const double flm = f(lm);
  const double frm = f(rm);
  const double left = (m - p.a) / 6.0 * (p.fa + 4.0 * flm + p.fm);
  const double right = (p.b - m) / 6.0 * (p.fm + 4.0 * frm + p.fb);
  const double delta = left + right - p.whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * eps) return left + right + delta / 15.0;
  return adaptive_simpson(f, {p.a, m, p.fa, flm, p.fm, left}, 0.5 * eps, depth - 1) +
         adaptive_simpson(f, {m, p.b, p.fm, frm, p.fb, right}, 0.5 * eps, depth - 1);
}

template <typename F>
double integrate(const F& f, double a, double b, double eps) {
  const double fa = f(a);
  const double fb = f(b);
  const double fm = f(0.5 * (a + b));
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return adaptive_simpson(f, {a, b, fa, fm, fb, whole}, eps, 48);
}

}  // namespace

double uniform_gaussian_overlap(double mu, double sigma, double lo, double hi, double tolerance) {
  if (!(sigma > 0.0)) throw Error("overlap: sigma must be positive");
  if (!(lo < hi)) throw Error("overlap: need lo < hi");
  const double height = 1.0 / (hi - lo);
  const double peak = 1.0 / (sigma * std::sqrt(2.0 * std::numbers::pi));
  const auto integrand = [&](double x) {
    const double z = (x - mu) / sigma;
    return std::min(peak * std::exp(-0.5 * z * z), height);
  };

  // Panels break at the density crossings and at a ladder of sigma multiples.
  std::vector<double> cuts{lo, hi, mu};
  if (height < peak) {
    const double r = sigma * std::sqrt(2.0 * std::log(peak / height));
    cuts.push_back(mu - r);
    cuts.push_back(mu + r);
  }
  for (double k : {1.0, 2.0, 4.0, 8.0, 16.0}) {
    cuts.push_back(mu - k * sigma);
    cuts.push_back(mu + k * sigma);
  }
  std::erase_if(cuts, [&](double c) { return c < lo || c > hi; });
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  const double eps = tolerance / static_cast<double>(cuts.size());
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) area += integrate(integrand, cuts[i], cuts[i + 1], eps);
  return std::clamp(area, 0.0, 1.0);
}

double optimal_uniform_half_width(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma))
    throw Error("optimal uniform: sigma must be positive and finite");
  const auto objective = [sigma](double a) {
    return uniform_gaussian_overlap(0.0, sigma, -a, a);
  };
  double lo = 0.0;
  double hi = 8.0 * sigma;
  while (hi - lo > 1e-9 * sigma) {
    const double m1 = lo + (hi - lo) / 3.0;
    const double m2 = hi - (hi - lo) / 3.0;
    if (objective(m1) < objective(m2))
      lo = m1;
    else
      hi = m2;
  }
  return 0.5 * (lo + hi);
}

Uniform4 fit_optimal_uniform(const DiagonalGaussian4& g) {
  g.validate();
  Uniform4 u;
  for (int d = 0; d < 4; ++d) {
    if (!(g.var[d] > 0.0)) throw Error("optimal uniform: zero variance in dimension " + std::to_string(d));
    const double a = optimal_uniform_half_width(std::sqrt(g.var[d]));
    u.lo[d] = g.mu[d] - a;
    u.hi[d] = g.mu[d] + a;
  }
  return u;
}

}  // namespace pdc
