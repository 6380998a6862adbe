#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pdc/geometry.hpp"
#include "pdc/matrix.hpp"

namespace pdc {

inline constexpr double kDefaultTemperature = 0.2;
inline constexpr double kDefaultLambda = 0.1;
inline constexpr std::size_t kDefaultContrastiveDim = 128;

struct Embedding {
  std::vector<double> vec;  // unit norm
  int class_label = 0;
  std::uint64_t sample_id = 0;
};

struct ContrastiveBatch {
  std::vector<Embedding> embeddings;
  double tau = kDefaultTemperature;

  // Non-empty, tau > 0, equal dimensions, unit norms within 1e-6, distinct ids.
  void validate() const;
};

/// Supervised contrastive loss averaged over every element of the batch.
///
/// For anchor p with N_c - 1 > 0 same-class partners:
///   l(p) = -1/(N_c - 1) * sum_{q != p, c_q = c_p} log(exp(z_p.z_q/tau) / sum_{r != p} exp(z_p.z_r/tau))
/// Anchors without a partner contribute 0 but still count in the mean.
double supcon_loss(const ContrastiveBatch& batch);

// d loss / d z for every embedding, in batch order.
std::vector<std::vector<double>> supcon_grad(const ContrastiveBatch& batch);

// Unchecked forms over row-major embeddings; norms are not enforced, which is
// what finite-difference checks and the simulator's projection head need.
double supcon_loss(const Matrix& z, std::span<const int> labels, double tau);

struct SupConResult {
  double loss = 0.0;
  Matrix grad;
};
SupConResult supcon_loss_and_grad(const Matrix& z, std::span<const int> labels, double tau);

// Softmax cross-entropy; the background class is the last index.
double cross_entropy_cls(std::span<const double> logits, int label);
// d loss / d logits = softmax - onehot(label).
std::vector<double> cross_entropy_grad(std::span<const double> logits, int label);

double smooth_l1_reg(const OffsetVec& pred, const OffsetVec& target, double beta = 1.0);
// d loss / d pred.
Vec4 smooth_l1_grad(const OffsetVec& pred, const OffsetVec& target, double beta = 1.0);

struct LossBreakdown {
  double con = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  double re_roi_total = 0.0;
  double lambda = kDefaultLambda;
  double base_total = 0.0;
  double grand_total = 0.0;
};

// re_roi_total = (cls + con) + reg; grand_total = base_total + lambda * re_roi_total.
LossBreakdown assemble_pdc_loss(double base_total, double con, double cls, double reg,
                                double lambda = kDefaultLambda);

}  // namespace pdc
