#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pdc/diagnostics.hpp"
#include "pdc/geometry.hpp"
#include "pdc/losses.hpp"
#include "pdc/matrix.hpp"
#include "pdc/rng.hpp"
#include "pdc/sampling.hpp"
#include "pdc/statistics.hpp"

// Desk-scale two-step few-shot detection: known ground truths, a stochastic
// RPN whose proposals for novel classes are shifted and sometimes missing,
// and a linear RoI head over synthetic proposal features. Base training fits
// the head and the offset statistics on abundant base classes; fine-tuning
// adapts it on K shots per class, with or without calibrated proposals.
namespace pdc::sim {

struct SceneObject {
  BBox box;
  int class_label = 0;
  std::vector<double> appearance;
};

struct SyntheticScene {
  std::string image_id;
  std::uint64_t seed = 0;  // keys the feature noise of every proposal in the scene
  double image_w = 0.0;
  double image_h = 0.0;
  std::vector<SceneObject> objects;
};

struct BiasedRpnModel {
  DiagonalGaussian4 offset_dist;  // proposal offsets around base-class objects
  Vec4 novel_extra_bias{};        // added to offset_dist.mu for novel objects
  double miss_rate_novel = 0.0;   // chance a novel object gets no proposals
  int proposals_per_object = 12;
  int background_per_image = 12;

  void validate() const;
};

enum class ContrastiveSet { sampled, rpn, both };

struct ExperimentConfig {
  int c_base = 5;
  int c_novel = 5;
  int k_shot = 1;
  int j_per_instance = 50;
  double lambda = kDefaultLambda;
  double tau = kDefaultTemperature;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  int base_epochs = 150;
  int finetune_epochs = 80;
  double learning_rate = 0.5;
  // Largest allowed |P_S| : |background proposals| ratio before P_S is
  // subsampled.
  double pos_neg_cap = 5.0;

  // World.
  double image_size = 128.0;
  int base_instances_per_class = 200;
  int test_instances_per_class = 40;
  int max_objects_per_scene = 3;
  int appearance_dim = 16;
  double appearance_noise = 0.25;
  double feature_noise = 0.15;
  double cue_noise = 0.02;
  double cue_context_noise = 0.0;  // extra cue noise at zero overlap, fading linearly to 0 at q = 1
  double cue_class_bias = 0.25;
  double cue_scale = 4.0;
  int contrastive_dim = static_cast<int>(kDefaultContrastiveDim);
  int contrastive_batch = 256;
  BiasedRpnModel rpn{
      DiagonalGaussian4{{0.0, 0.0, -0.02, -0.02}, {0.0036, 0.0036, 0.01, 0.01}},
      {0.10, -0.08, -0.18, -0.15},
      0.3,
      12,
      12,
  };

  // Ablation knobs.
  ContrastiveSet contrastive_set = ContrastiveSet::sampled;
  bool ps_in_main_loss = false;

  void validate() const;
  int num_classes() const noexcept { return c_base + c_novel; }
  bool is_novel(int label) const noexcept { return label >= c_base; }
};

ExperimentConfig config_from_json(std::string_view text);
// Canonical JSON (every field, fixed order); also the hash input.
std::string config_to_json(const ExperimentConfig& config);
std::string config_hash(const ExperimentConfig& config);

// Fixed generator of proposal features: class prototypes, the background
// vector and the per-class localization-cue bias.
struct FeatureWorld {
  Matrix prototypes;                // classes x appearance_dim, unit rows
  std::vector<double> background;   // unit vector
  std::vector<Vec4> cue_bias;       // per class
  double feature_noise = 0.0;
  double cue_noise = 0.0;
  double cue_context_noise = 0.0;
  double cue_scale = 1.0;

  std::size_t feature_dim() const noexcept { return prototypes.cols() + 4; }
  friend bool operator==(const FeatureWorld&, const FeatureWorld&) = default;
};

struct Dataset {
  FeatureWorld world;
  std::vector<SyntheticScene> base;      // base classes only, abundant
  std::vector<SyntheticScene> finetune;  // K instances of every class
  std::vector<SyntheticScene> test;
};

Dataset generate_dataset(const ExperimentConfig& config, std::uint64_t seed);

/// Feature of a proposal against its matched object (index into
/// scene.objects, or nullopt for none). With q = iou(proposal, object):
///   semantic block = q * appearance + (1 - q) * background + noise
///   cue block      = cue_scale * (t + q * cue_bias[class] + s * noise), t = encode_offset(object, proposal)
/// with s = cue_noise + (1 - q) * cue_context_noise. The cue block is pure
/// noise when q = 0. Noise is keyed by the scene seed
/// and the proposal, so the same proposal always yields the same feature.
std::vector<double> proposal_feature(const FeatureWorld& world, const SyntheticScene& scene,
                                     const BBox& proposal, std::optional<std::size_t> object,
                                     bool with_noise = true);

struct TinyRoiHead {
  Matrix cls_w;  // (classes + 1) x feature_dim; last row is background
  std::vector<double> cls_b;
  Matrix reg_w;  // 4 x feature_dim
  std::vector<double> reg_b;
  Matrix proj;   // contrastive_dim x feature_dim

  static TinyRoiHead init(int num_classes, std::size_t feature_dim, std::size_t contrastive_dim,
                          Rng& rng);

  std::vector<double> logits(std::span<const double> feature) const;
  int predict(std::span<const double> feature) const;
  OffsetVec regress(std::span<const double> feature) const;
  bool finite() const noexcept;

  friend bool operator==(const TinyRoiHead&, const TinyRoiHead&) = default;
};

// One training or evaluation proposal with its frozen feature.
struct RoiSample {
  std::size_t scene = 0;
  BBox proposal;
  std::optional<std::size_t> object;  // best-IoU object (source gt for sampled proposals)
  std::optional<std::size_t> source;  // object the proposal was generated from
  double iou = 0.0;
  OffsetVec target;                   // encode_offset(object, proposal) when object is set
  int label = -1;                     // class, background (= classes), or -1 ignored
  std::vector<double> feature;
};

inline constexpr double kPositiveIou = 0.5;
inline constexpr double kBackgroundIou = 0.3;

// RPN proposals (per object, keyed by image and object index) plus random
// background boxes for every scene.
std::vector<RoiSample> rpn_samples(const ExperimentConfig& config, const FeatureWorld& world,
                                   std::span<const SyntheticScene> scenes, std::uint64_t seed,
                                   std::uint64_t purpose);

struct BaseTrainResult {
  TinyRoiHead head;
  DiagonalGaussian4 base_stats;
  std::vector<OffsetVec> base_offsets;  // every base proposal against its source gt
};

BaseTrainResult base_train(TinyRoiHead head, const ExperimentConfig& config,
                           const FeatureWorld& world, std::span<const SyntheticScene> base_scenes,
                           int epochs, std::uint64_t seed);

TinyRoiHead finetune(TinyRoiHead head, const ExperimentConfig& config, const FeatureWorld& world,
                     std::span<const SyntheticScene> scenes, const DiagonalGaussian4& base_stats,
                     bool pdc_enabled, std::uint64_t seed);

struct EvalOptions {
  // Replace the regressor output with the exact target (upper bound check).
  bool oracle_regression = false;
};

struct EvalMetrics {
  std::size_t novel_boxes = 0;
  double raw_iou_novel = 0.0;        // proposals before refinement
  double mean_iou_novel = 0.0;       // regressed boxes
  double novel_accuracy = 0.0;
  double base_accuracy = 0.0;
  // Gaussian-kernel MMD (median-heuristic bandwidth) of regressed novel-box
  // offsets against the base statistics: base-class boxes regressed by the
  // head right after base training.
  double mmd_novel_vs_base_stats = 0.0;
  // Linear MMD (difference of means) against the same reference.
  double mmd_linear_novel_vs_base_stats = 0.0;
  // Gaussian-kernel MMD against base-class boxes regressed by this head.
  double mmd_novel_vs_base_regressed = 0.0;
  std::vector<OffsetVec> base_residuals;  // encode_offset(regressed, gt) of base-class boxes
  Histogram iou_hist{uniform_edges(0.0, 1.0, 10)};
  PrecisionByBucket precision;
};

// `base_reference` holds the base statistics for the MMD metric; when empty
// that metric is left at 0.
EvalMetrics evaluate(const TinyRoiHead& head, const ExperimentConfig& config,
                     const FeatureWorld& world, std::span<const SyntheticScene> test_scenes,
                     std::span<const OffsetVec> base_reference, std::uint64_t seed,
                     EvalOptions options = {});

struct SeedResult {
  std::uint64_t seed = 0;
  DiagonalGaussian4 base_stats;
  OffsetReport base_offsets;   // base-training RPN proposals
  OffsetReport novel_offsets;  // fine-tuning RPN proposals of novel objects
  double base_accuracy_after_base_training = 0.0;
  EvalMetrics baseline;
  EvalMetrics pdc;
};

struct ExperimentReport {
  ExperimentConfig config;
  std::vector<SeedResult> seeds;

  int iou_wins() const noexcept;       // pdc > baseline
  int accuracy_wins() const noexcept;  // pdc > baseline
  int mmd_wins() const noexcept;       // pdc < baseline
};

SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed);
ExperimentReport run_experiment(const ExperimentConfig& config);

// pairs.csv, summary.csv, config.json and the first seed's figures
// (offset, IoU and precision reports as CSV + SVG).
void write_report(const ExperimentReport& report, const std::filesystem::path& dir);

}  // namespace pdc::sim
