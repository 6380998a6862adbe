#pragma once

#include <array>
#include <span>
#include <string>

namespace pdc {

using Vec4 = std::array<double, 4>;

/// Center-form box (cx, cy, w, h) in image units. Valid boxes have finite
/// fields and strictly positive width and height; corner form only appears
/// transiently.
struct BBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 1.0;
  double h = 1.0;

  static BBox from_corners(double x0, double y0, double x1, double y1) noexcept {
    return {0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
  }

  double x0() const noexcept { return cx - 0.5 * w; }
  double y0() const noexcept { return cy - 0.5 * h; }
  double x1() const noexcept { return cx + 0.5 * w; }
  double y1() const noexcept { return cy + 0.5 * h; }
  double area() const noexcept { return w * h; }

  bool valid() const noexcept;
  Vec4 as_array() const noexcept { return {cx, cy, w, h}; }

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Scale-normalized offset of a proposal from its ground truth:
/// (proposal - gt) / (gt.w, gt.h, gt.w, gt.h).
struct OffsetVec {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;

  static OffsetVec from_array(const Vec4& v) noexcept { return {v[0], v[1], v[2], v[3]}; }
  Vec4 as_array() const noexcept { return {dx, dy, dw, dh}; }

  // Finite, and decodes to a box with positive width and height.
  bool valid() const noexcept;

  friend bool operator==(const OffsetVec&, const OffsetVec&) = default;
};

static_assert(sizeof(BBox) == 4 * sizeof(double));
static_assert(sizeof(OffsetVec) == 4 * sizeof(double));

// Throws pdc::Error naming `what` when the box violates its invariants.
void require_valid(const BBox& b, const std::string& what = "box");

OffsetVec encode_offset(const BBox& proposal, const BBox& gt);

// Exact inverse of encode_offset: gt + off * (gt.w, gt.h, gt.w, gt.h).
// Throws when the decoded width or height is not positive.
BBox apply_offset(const BBox& gt, const OffsetVec& off);

double iou(const BBox& a, const BBox& b) noexcept;

// Intersects the box with [0, img_w] x [0, img_h]. Throws if nothing is left.
BBox clip_to_image(const BBox& b, double img_w, double img_h);

// Batched forms over the active SIMD kernels. Spans must have equal sizes.
// Inputs are validated like the scalar versions.
void encode_offsets(std::span<const BBox> proposals, std::span<const BBox> gts,
                    std::span<OffsetVec> out);
void apply_offsets(std::span<const BBox> gts, std::span<const OffsetVec> offsets,
                   std::span<BBox> out);

}  // namespace pdc
