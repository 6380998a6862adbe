#include "pdc/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pdc/error.hpp"
#include "pdc/simd/kernels.hpp"

namespace pdc {

namespace {

bool all_finite(const Vec4& v) noexcept {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::string describe(const BBox& b) {
  std::ostringstream os;
  os << "(" << b.cx << ", " << b.cy << ", " << b.w << ", " << b.h << ")";
  return os.str();
}

void require_valid(const OffsetVec& off) {
  if (!all_finite(off.as_array())) throw Error("offset has non-finite components");
  if (!(off.dw > -1.0) || !(off.dh > -1.0))
    throw Error("offset decodes to a non-positive width or height (dw, dh must exceed -1)");
}

void require_sizes(std::size_t a, std::size_t b, std::size_t c) {
  if (a != b || a != c) throw Error("batched geometry: span sizes differ");
}

}  // namespace

bool BBox::valid() const noexcept { return all_finite(as_array()) && w > 0.0 && h > 0.0; }

bool OffsetVec::valid() const noexcept { return all_finite(as_array()) && dw > -1.0 && dh > -1.0; }

void require_valid(const BBox& b, const std::string& what) {
  if (!all_finite(b.as_array())) throw Error(what + " has non-finite fields " + describe(b));
  if (!(b.w > 0.0)) throw Error(what + " width must be positive " + describe(b));
  if (!(b.h > 0.0)) throw Error(what + " height must be positive " + describe(b));
}

OffsetVec encode_offset(const BBox& proposal, const BBox& gt) {
  require_valid(proposal, "proposal");
  require_valid(gt, "ground truth");
  OffsetVec off{(proposal.cx - gt.cx) / gt.w, (proposal.cy - gt.cy) / gt.h,
                (proposal.w - gt.w) / gt.w, (proposal.h - gt.h) / gt.h};
  if (!all_finite(off.as_array())) throw Error("encoded offset is not finite");
  return off;
}

BBox apply_offset(const BBox& gt, const OffsetVec& off) {
  require_valid(gt, "ground truth");
  require_valid(off);
  BBox out{gt.cx + off.dx * gt.w, gt.cy + off.dy * gt.h, gt.w + off.dw * gt.w,
           gt.h + off.dh * gt.h};
  require_valid(out, "decoded box");
  return out;
}

double iou(const BBox& a, const BBox& b) noexcept {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

BBox clip_to_image(const BBox& b, double img_w, double img_h) {
  if (!(img_w > 0.0) || !(img_h > 0.0) || !std::isfinite(img_w) || !std::isfinite(img_h))
    throw Error("image bounds must be positive and finite");
  require_valid(b);
  if (b.x0() >= 0.0 && b.y0() >= 0.0 && b.x1() <= img_w && b.y1() <= img_h) return b;
  const double x0 = std::max(b.x0(), 0.0);
  const double y0 = std::max(b.y0(), 0.0);
  const double x1 = std::min(b.x1(), img_w);
  const double y1 = std::min(b.y1(), img_h);
  if (!(x1 > x0) || !(y1 > y0)) throw Error("box " + describe(b) + " lies outside the image");
  return BBox::from_corners(x0, y0, x1, y1);
}

void encode_offsets(std::span<const BBox> proposals, std::span<const BBox> gts,
                    std::span<OffsetVec> out) {
  require_sizes(proposals.size(), gts.size(), out.size());
  for (std::size_t k = 0; k < gts.size(); ++k) {
    require_valid(proposals[k], "proposal");
    require_valid(gts[k], "ground truth");
  }
  simd::active().encode_offsets(&proposals.data()->cx, &gts.data()->cx, &out.data()->dx,
                                gts.size());
}

void apply_offsets(std::span<const BBox> gts, std::span<const OffsetVec> offsets,
                   std::span<BBox> out) {
  require_sizes(gts.size(), offsets.size(), out.size());
  for (std::size_t k = 0; k < gts.size(); ++k) {
    require_valid(gts[k], "ground truth");
    require_valid(offsets[k]);
  }
  simd::active().decode_offsets(&gts.data()->cx, &offsets.data()->dx, &out.data()->cx,
                                gts.size());
  for (const BBox& b : out) require_valid(b, "decoded box");
}

}  // namespace pdc
