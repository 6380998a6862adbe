#include "pdc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "pdc/error.hpp"
#include "pdc/simd/kernels.hpp"

namespace pdc {

void ContrastiveBatch::validate() const {
  if (embeddings.empty()) throw Error("contrastive batch is empty");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw Error("contrastive temperature must be positive");
  const std::size_t d = embeddings.front().vec.size();
  if (d == 0) throw Error("contrastive embeddings have zero dimension");
  std::set<std::uint64_t> ids;
  const auto& k = simd::active();
  for (const auto& e : embeddings) {
    if (e.vec.size() != d) throw Error("contrastive embeddings differ in dimension");
    const double norm = std::sqrt(k.dot(e.vec.data(), e.vec.data(), d));
    if (!(std::abs(norm - 1.0) <= 1e-6))
      throw Error("embedding " + std::to_string(e.sample_id) + " is not unit norm");
    if (!ids.insert(e.sample_id).second)
      throw Error("duplicate sample_id " + std::to_string(e.sample_id) + " in contrastive batch");
  }
}

namespace {

Matrix stack(const ContrastiveBatch& batch) {
  Matrix z(batch.embeddings.size(), batch.embeddings.front().vec.size());
  for (std::size_t i = 0; i < z.rows(); ++i)
    std::copy(batch.embeddings[i].vec.begin(), batch.embeddings[i].vec.end(), z.row(i).begin());
  return z;
}

std::vector<int> labels_of(const ContrastiveBatch& batch) {
  std::vector<int> labels;
  labels.reserve(batch.embeddings.size());
  for (const auto& e : batch.embeddings) labels.push_back(e.class_label);
  return labels;
}

SupConResult supcon_impl(const Matrix& z, std::span<const int> labels, double tau, bool want_grad) {
  if (!(tau > 0.0)) throw Error("contrastive temperature must be positive");
  if (z.rows() != labels.size()) throw Error("supcon: label count differs from embedding count");
  const std::size_t n = z.rows();
  const std::size_t d = z.cols();
  if (n == 0) throw Error("contrastive batch is empty");
  const auto& k = simd::active();

  Matrix sim(n, n);
  k.gram(z.data(), n, d, sim.data());
  for (double& s : sim.values()) s /= tau;

  SupConResult res;
  if (want_grad) res.grad = Matrix(n, d);
  std::vector<double> coef(n);
  double total = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t positives = 0;
    double max_s = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < n; ++r) {
      if (r == p) continue;
      if (labels[r] == labels[p]) ++positives;
      max_s = std::max(max_s, sim(p, r));
    }
    if (positives == 0) continue;
    double denom = 0.0;
    for (std::size_t r = 0; r < n; ++r)
      if (r != p) denom += std::exp(sim(p, r) - max_s);
    const double log_denom = max_s + std::log(denom);
    double pos_sum = 0.0;
    for (std::size_t r = 0; r < n; ++r)
      if (r != p && labels[r] == labels[p]) pos_sum += sim(p, r);
    const double inv_pos = 1.0 / static_cast<double>(positives);
    total += log_denom - inv_pos * pos_sum;

    if (!want_grad) continue;
    const double scale = 1.0 / (tau * static_cast<double>(n));
    for (std::size_t r = 0; r < n; ++r) {
      if (r == p) {
        coef[r] = 0.0;
        continue;
      }
      const double w = std::exp(sim(p, r) - log_denom);
      coef[r] = (w - (labels[r] == labels[p] ? inv_pos : 0.0)) * scale;
    }
    double* gp = res.grad.row(p).data();
    const double* zp = z.row(p).data();
    for (std::size_t r = 0; r < n; ++r) {
      if (r == p) continue;
      k.axpy(coef[r], z.row(r).data(), gp, d);
      k.axpy(coef[r], zp, res.grad.row(r).data(), d);
    }
  }
  res.loss = total / static_cast<double>(n);
  return res;
}

}  // namespace

double supcon_loss(const Matrix& z, std::span<const int> labels, double tau) {
  return supcon_impl(z, labels, tau, false).loss;
}

SupConResult supcon_loss_and_grad(const Matrix& z, std::span<const int> labels, double tau) {
  return supcon_impl(z, labels, tau, true);
}

double supcon_loss(const ContrastiveBatch& batch) {
  batch.validate();
  const auto labels = labels_of(batch);
  return supcon_loss(stack(batch), labels, batch.tau);
}

std::vector<std::vector<double>> supcon_grad(const ContrastiveBatch& batch) {
  batch.validate();
  const auto labels = labels_of(batch);
  const auto res = supcon_loss_and_grad(stack(batch), labels, batch.tau);
  std::vector<std::vector<double>> out;
  out.reserve(res.grad.rows());
  for (std::size_t i = 0; i < res.grad.rows(); ++i)
    out.emplace_back(res.grad.row(i).begin(), res.grad.row(i).end());
  return out;
}

namespace {

void check_logits(std::span<const double> logits, int label) {
  if (logits.empty()) throw Error("cross entropy: no logits");
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    throw Error("cross entropy: label " + std::to_string(label) + " out of range [0, " +
                std::to_string(logits.size()) + ")");
  for (double v : logits)
    if (!std::isfinite(v)) throw Error("cross entropy: non-finite logit");
}

double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

double cross_entropy_cls(std::span<const double> logits, int label) {
  check_logits(logits, label);
  return log_sum_exp(logits) - logits[static_cast<std::size_t>(label)];
}

std::vector<double> cross_entropy_grad(std::span<const double> logits, int label) {
  check_logits(logits, label);
  const double lse = log_sum_exp(logits);
  std::vector<double> g(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) g[i] = std::exp(logits[i] - lse);
  g[static_cast<std::size_t>(label)] -= 1.0;
  return g;
}

double smooth_l1_reg(const OffsetVec& pred, const OffsetVec& target, double beta) {
  if (!(beta > 0.0)) throw Error("smooth L1: beta must be positive");
  const Vec4 p = pred.as_array();
  const Vec4 t = target.as_array();
  double loss = 0.0;
  for (int d = 0; d < 4; ++d) {
    const double r = std::abs(p[d] - t[d]);
    loss += r < beta ? 0.5 * r * r / beta : r - 0.5 * beta;
  }
  return loss;
}

Vec4 smooth_l1_grad(const OffsetVec& pred, const OffsetVec& target, double beta) {
  if (!(beta > 0.0)) throw Error("smooth L1: beta must be positive");
  const Vec4 p = pred.as_array();
  const Vec4 t = target.as_array();
  Vec4 g;
  for (int d = 0; d < 4; ++d) {
    const double r = p[d] - t[d];
    g[d] = std::abs(r) < beta ? r / beta : (r > 0.0 ? 1.0 : -1.0);
  }
  return g;
}

LossBreakdown assemble_pdc_loss(double base_total, double con, double cls, double reg,
                                double lambda) {
  for (double v : {base_total, con, cls, reg, lambda})
    if (!std::isfinite(v)) throw Error("loss assembly: non-finite input");
  if (lambda < 0.0) throw Error("loss assembly: lambda must be non-negative");
  LossBreakdown b;
  b.con = con;
  b.cls = cls;
  b.reg = reg;
  b.re_roi_total = (cls + con) + reg;
  b.lambda = lambda;
  b.base_total = base_total;
  b.grand_total = base_total + lambda * b.re_roi_total;
  return b;
}

}  // namespace pdc
