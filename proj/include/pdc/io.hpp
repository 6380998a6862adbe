#pragma once

#include <cstddef>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pdc/geometry.hpp"
#include "pdc/sampling.hpp"

// File formats.
//
// Proposal log (JSONL), one record per line, canonical field order:
//   {"image_id":"img-1","gt":[cx,cy,w,h],"gt_class":3,"proposal":[cx,cy,w,h],"source":"rpn"}
// "source" is "rpn" or "sampled". An optional trailing "pred_class" integer
// carries a classifier decision for precision-by-IoU reports. Numbers are
// written in shortest round-trip form, so parse -> serialize is idempotent.
//
// Ground-truth list (JSONL), input of `pdc sample`:
//   {"image_id":"img-1","gt":[cx,cy,w,h],"gt_class":3,"image_size":[w,h]}
// "image_size" is optional; without it sampled boxes are not clipped.
//
// Offset models (JSON), fields in this order, 17 significant digits:
//   {"kind":"gaussian","mu":[4],"var":[4]}
//   {"kind":"uniform","lo":[4],"hi":[4]}
namespace pdc {

enum class ProposalSource { rpn, sampled };

struct ProposalLogRecord {
  std::string image_id;
  BBox gt;
  int gt_class = 0;
  BBox proposal;
  ProposalSource source = ProposalSource::rpn;
  std::optional<int> pred_class;

  friend bool operator==(const ProposalLogRecord&, const ProposalLogRecord&) = default;
};

struct ParseOptions {
  // Strict parsing throws ParseError on the first bad line; lenient parsing
  // skips it and records the issue.
  bool strict = true;
};

struct ParseIssue {
  std::size_t line = 0;
  std::string message;
};

struct ParsedLog {
  std::vector<ProposalLogRecord> records;
  std::vector<ParseIssue> skipped;
};

// Throws ParseError (with the 1-based line number) on malformed input.
ProposalLogRecord parse_record(std::string_view line, std::size_t line_number);
ParsedLog parse_log(std::istream& in, ParseOptions options = {});

std::string serialize_record(const ProposalLogRecord& record);
void write_log(std::ostream& os, std::span<const ProposalLogRecord> records);

ProposalLogRecord to_log_record(const SampledProposal& p, const BBox& gt);

struct GtRecord {
  std::string image_id;
  BBox gt;
  int gt_class = 0;
  std::optional<ImageBounds> image_size;
};

std::vector<GtRecord> parse_gts(std::istream& in);

std::string model_to_json(const OffsetModel& model);
OffsetModel model_from_json(std::string_view text);
std::string per_class_to_json(const std::map<int, DiagonalGaussian4>& models);

}  // namespace pdc
