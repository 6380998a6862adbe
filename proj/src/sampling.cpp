#include "pdc/sampling.hpp"

#include <cmath>
#include <sstream>

#include "pdc/error.hpp"

namespace pdc {

void validate(const OffsetModel& model) {
  std::visit([](const auto& m) { m.validate(); }, model);
}

void SamplerConfig::validate() const {
  pdc::validate(model);
  if (j_per_instance < 1) throw Error("sampler: j_per_instance must be at least 1");
  if (max_resample < 1) throw Error("sampler: max_resample must be at least 1");
}

Rng proposal_stream(std::uint64_t seed, std::string_view image_id, std::size_t gt_index) noexcept {
  return Rng::keyed(seed, hash_string(image_id), gt_index);
}

OffsetVec sample_offset(const OffsetModel& model, Rng& rng) {
  Vec4 v;
  if (const auto* g = std::get_if<DiagonalGaussian4>(&model)) {
    for (int d = 0; d < 4; ++d) v[d] = g->mu[d] + std::sqrt(g->var[d]) * rng.normal();
  } else {
    const auto& u = std::get<Uniform4>(model);
    for (int d = 0; d < 4; ++d) v[d] = rng.uniform(u.lo[d], u.hi[d]);
  }
  return OffsetVec::from_array(v);
}

std::vector<OffsetVec> sample_offsets(const OffsetModel& model, std::size_t n, Rng& rng) {
  validate(model);
  std::vector<OffsetVec> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_offset(model, rng));
  return out;
}

namespace {

std::optional<BBox> try_decode(const BBox& gt, const OffsetVec& off, bool clip,
                               const std::optional<ImageBounds>& bounds) {
  if (!off.valid()) return std::nullopt;
  try {
    BBox b = apply_offset(gt, off);
    if (clip && bounds) b = clip_to_image(b, bounds->width, bounds->height);
    return b;
  } catch (const Error&) {
    return std::nullopt;
  }
}

}  // namespace

std::vector<SampledProposal> sample_proposals_for_gt(const BBox& gt, int class_label,
                                                     std::size_t gt_index,
                                                     const std::string& image_id,
                                                     const SamplerConfig& config,
                                                     const std::optional<ImageBounds>& bounds,
                                                     Rng& rng) {
  config.validate();
  require_valid(gt, "ground truth");
  std::vector<SampledProposal> out;
  out.reserve(static_cast<std::size_t>(config.j_per_instance));
  for (int j = 0; j < config.j_per_instance; ++j) {
    std::optional<BBox> box;
    for (int attempt = 0; attempt <= config.max_resample && !box; ++attempt)
      box = try_decode(gt, sample_offset(config.model, rng), config.clip, bounds);
    if (!box) {
      std::ostringstream os;
      os << "sampler: resampling budget exhausted for ground truth " << gt_index << " of image '"
         << image_id << "' (" << gt.cx << ", " << gt.cy << ", " << gt.w << ", " << gt.h << ")";
      throw Error(os.str());
    }
    out.push_back({*box, class_label, gt_index, image_id});
  }
  return out;
}

CalibratedSet build_calibrated_set(const std::string& image_id, std::span<const GroundTruth> gts,
                                   std::span<const SampledProposal> rpn_proposals,
                                   const SamplerConfig& config,
                                   const std::optional<ImageBounds>& bounds) {
  CalibratedSet set;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    Rng rng = proposal_stream(config.seed, image_id, i);
    auto ps = sample_proposals_for_gt(gts[i].box, gts[i].class_label, i, image_id, config, bounds, rng);
    set.sampled.insert(set.sampled.end(), ps.begin(), ps.end());
  }
  set.combined = set.sampled;
  set.combined.insert(set.combined.end(), rpn_proposals.begin(), rpn_proposals.end());
  return set;
}

}  // namespace pdc
