#pragma once

// Reference implementations written straight from the definitions. They share
// no code with the library beyond plain value types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <vector>

#include "pdc/geometry.hpp"

namespace oracle {

inline pdc::OffsetVec encode(const pdc::BBox& p, const pdc::BBox& g) {
  return {(p.cx - g.cx) / g.w, (p.cy - g.cy) / g.h, (p.w - g.w) / g.w, (p.h - g.h) / g.h};
}

inline double iou(const pdc::BBox& a, const pdc::BBox& b) {
  const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2, ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
  const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2, by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = iw * ih;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

struct Moments {
  std::vector<double> mean;
  std::vector<double> var;  // population
};

// Two passes, rows of equal length.
inline Moments two_pass(const std::vector<std::vector<double>>& xs) {
  const std::size_t d = xs.front().size();
  Moments m{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (const auto& x : xs)
    for (std::size_t k = 0; k < d; ++k) m.mean[k] += x[k];
  for (auto& v : m.mean) v /= static_cast<double>(xs.size());
  for (const auto& x : xs)
    for (std::size_t k = 0; k < d; ++k) m.var[k] += (x[k] - m.mean[k]) * (x[k] - m.mean[k]);
  for (auto& v : m.var) v /= static_cast<double>(xs.size());
  return m;
}

inline double gauss_pdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

// Composite Simpson on n (even) panels.
inline double simpson(const std::function<double(double)>& f, double lo, double hi, std::size_t n) {
  const double h = (hi - lo) / static_cast<double>(n);
  double s = f(lo) + f(hi);
  for (std::size_t i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(lo + h * static_cast<double>(i));
  return s * h / 3.0;
}

inline double overlap_simpson(double mu, double sigma, double lo, double hi, std::size_t n = 100000) {
  const double height = 1.0 / (hi - lo);
  return simpson([&](double x) { return std::min(gauss_pdf(x, mu, sigma), height); }, lo, hi, n);
}

// Overlap of U(-a, a) with N(0, sigma^2) in closed form.
inline double overlap_symmetric(double a, double sigma) {
  const double peak = 1.0 / (sigma * std::sqrt(2.0 * std::numbers::pi));
  const double height = 1.0 / (2.0 * a);
  const double s2 = sigma * std::sqrt(2.0);
  if (height >= peak) return std::erf(a / s2);
  const double r = sigma * std::sqrt(2.0 * std::log(peak / height));
  if (r >= a) return 1.0;
  return r / a + (std::erf(a / s2) - std::erf(r / s2));
}

// argmax over a in [step, 8 sigma] on a step = 1e-4 sigma grid.
inline double grid_half_width(double sigma) {
  const double step = 1e-4 * sigma;
  double best_a = step;
  double best = -1.0;
  for (std::size_t i = 1; i <= 80000; ++i) {
    const double a = step * static_cast<double>(i);
    const double v = overlap_symmetric(a, sigma);
    if (v > best) {
      best = v;
      best_a = a;
    }
  }
  return best_a;
}

using Rows = std::vector<std::vector<double>>;

// Mean over anchors of -1/|P(p)| sum_{q in P(p)} log(exp(s_pq) / sum_{r != p} exp(s_pr)).
inline double supcon(const Rows& z, const std::vector<int>& labels, double tau) {
  const std::size_t n = z.size();
  double total = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    double denom = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == p) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < z[p].size(); ++k) dot += z[p][k] * z[r][k];
      denom += std::exp(dot / tau);
    }
    double acc = 0.0;
    int positives = 0;
    for (std::size_t q = 0; q < n; ++q) {
      if (q == p || labels[q] != labels[p]) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < z[p].size(); ++k) dot += z[p][k] * z[q][k];
      acc += std::log(std::exp(dot / tau) / denom);
      ++positives;
    }
    if (positives > 0) total += -acc / positives;
  }
  return total / static_cast<double>(n);
}

inline Rows supcon_fd(Rows z, const std::vector<int>& labels, double tau, double step = 1e-5) {
  Rows g(z.size(), std::vector<double>(z.front().size(), 0.0));
  for (std::size_t i = 0; i < z.size(); ++i)
    for (std::size_t k = 0; k < z[i].size(); ++k) {
      const double x = z[i][k];
      z[i][k] = x + step;
      const double up = supcon(z, labels, tau);
      z[i][k] = x - step;
      const double down = supcon(z, labels, tau);
      z[i][k] = x;
      g[i][k] = (up - down) / (2.0 * step);
    }
  return g;
}

inline double cross_entropy(const std::vector<double>& logits, int label) {
  double s = 0.0;
  for (double l : logits) s += std::exp(l);
  return -std::log(std::exp(logits[static_cast<std::size_t>(label)]) / s);
}

inline double rbf_mmd(const Rows& a, const Rows& b, double h) {
  const auto k = [h](const std::vector<double>& x, const std::vector<double>& y) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) d2 += (x[i] - y[i]) * (x[i] - y[i]);
    return std::exp(-d2 / (2.0 * h * h));
  };
  double aa = 0.0, bb = 0.0, ab = 0.0;
  for (const auto& x : a)
    for (const auto& y : a) aa += k(x, y);
  for (const auto& x : b)
    for (const auto& y : b) bb += k(x, y);
  for (const auto& x : a)
    for (const auto& y : b) ab += k(x, y);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  return std::sqrt(std::max(aa / (na * na) + bb / (nb * nb) - 2.0 * ab / (na * nb), 0.0));
}

// Median of all pooled pairwise distances (mean of the middle two when even).
inline double median_distance(const Rows& a, const Rows& b) {
  Rows pool = a;
  pool.insert(pool.end(), b.begin(), b.end());
  std::vector<double> d;
  for (std::size_t i = 0; i < pool.size(); ++i)
    for (std::size_t j = i + 1; j < pool.size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < pool[i].size(); ++k) s += (pool[i][k] - pool[j][k]) * (pool[i][k] - pool[j][k]);
      d.push_back(std::sqrt(s));
    }
  std::sort(d.begin(), d.end());
  const std::size_t m = d.size() / 2;
  return d.size() % 2 ? d[m] : 0.5 * (d[m - 1] + d[m]);
}

inline double linear_mmd(const Rows& a, const Rows& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.front().size(); ++k) {
    double ma = 0.0, mb = 0.0;
    for (const auto& x : a) ma += x[k];
    for (const auto& x : b) mb += x[k];
    const double diff = ma / static_cast<double>(a.size()) - mb / static_cast<double>(b.size());
    s += diff * diff;
  }
  return std::sqrt(s);
}

inline double rel_err(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

}  // namespace oracle
