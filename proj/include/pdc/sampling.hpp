#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "pdc/geometry.hpp"
#include "pdc/rng.hpp"
#include "pdc/statistics.hpp"

namespace pdc {

using OffsetModel = std::variant<DiagonalGaussian4, Uniform4>;

void validate(const OffsetModel& model);

struct ImageBounds {
  double width = 0.0;
  double height = 0.0;
};

struct GroundTruth {
  BBox box;
  int class_label = 0;
};

struct SampledProposal {
  BBox box;
  int class_label = 0;
  std::size_t source_gt = 0;
  std::string image_id;

  friend bool operator==(const SampledProposal&, const SampledProposal&) = default;
};

struct SamplerConfig {
  OffsetModel model = DiagonalGaussian4{};
  int j_per_instance = 50;
  std::uint64_t seed = 0;
  int max_resample = 16;
  // Clip decoded proposals to the image when bounds are known. Turning this
  // off keeps the raw decoded boxes (distribution checks use that).
  bool clip = true;

  void validate() const;
};

// Sampling stream for one ground truth of one image.
Rng proposal_stream(std::uint64_t seed, std::string_view image_id, std::size_t gt_index) noexcept;

OffsetVec sample_offset(const OffsetModel& model, Rng& rng);
std::vector<OffsetVec> sample_offsets(const OffsetModel& model, std::size_t n, Rng& rng);

/// Exactly `config.j_per_instance` proposals around `gt`, each decoded with
/// apply_offset and, when bounds are given and clipping is on, clipped to
/// the image. Draws that decode to an invalid box are redrawn up to
/// `max_resample` times before giving up with pdc::Error.
std::vector<SampledProposal> sample_proposals_for_gt(const BBox& gt, int class_label,
                                                     std::size_t gt_index,
                                                     const std::string& image_id,
                                                     const SamplerConfig& config,
                                                     const std::optional<ImageBounds>& bounds,
                                                     Rng& rng);

struct CalibratedSet {
  std::vector<SampledProposal> sampled;   // P_S
  std::vector<SampledProposal> combined;  // P_F = P_S followed by P_R
};

// Samples every ground truth of one image from its keyed stream and appends
// the RPN proposals after the sampled ones.
CalibratedSet build_calibrated_set(const std::string& image_id, std::span<const GroundTruth> gts,
                                   std::span<const SampledProposal> rpn_proposals,
                                   const SamplerConfig& config,
                                   const std::optional<ImageBounds>& bounds = std::nullopt);

}  // namespace pdc
