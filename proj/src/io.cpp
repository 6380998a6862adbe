#include "pdc/io.hpp"

#include <cmath>
#include <json.hpp>
#include <set>

#include "pdc/error.hpp"
#include "pdc/report.hpp"

namespace pdc {

using nlohmann::json;

namespace {

json parse_json_line(std::string_view line, std::size_t n) {
  try {
    return json::parse(line.begin(), line.end());
  } catch (const json::parse_error& e) {
    throw ParseError(n, std::string("malformed JSON: ") + e.what());
  }
}

const json& field(const json& obj, const char* key, std::size_t n) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(n, std::string("missing field \"") + key + "\"");
  return *it;
}

void reject_unknown(const json& obj, const std::set<std::string>& known, std::size_t n) {
  for (const auto& [key, _] : obj.items())
    if (!known.contains(key)) throw ParseError(n, "unknown field \"" + key + "\"");
}

std::string string_field(const json& obj, const char* key, std::size_t n) {
  const json& v = field(obj, key, n);
  if (!v.is_string()) throw ParseError(n, std::string("field \"") + key + "\" must be a string");
  return v.get<std::string>();
}

int int_field(const json& obj, const char* key, std::size_t n) {
  const json& v = field(obj, key, n);
  if (!v.is_number_integer()) throw ParseError(n, std::string("field \"") + key + "\" must be an integer");
  const auto x = v.get<long long>();
  if (x < 0 || x > std::numeric_limits<int>::max())
    throw ParseError(n, std::string("field \"") + key + "\" must be a non-negative integer");
  return static_cast<int>(x);
}

template <std::size_t N>
std::array<double, N> number_array(const json& obj, const char* key, std::size_t n) {
  const json& v = field(obj, key, n);
  if (!v.is_array() || v.size() != N)
    throw ParseError(n, std::string("field \"") + key + "\" must be an array of " + std::to_string(N) + " numbers");
  std::array<double, N> out;
  for (std::size_t i = 0; i < N; ++i) {
    if (!v[i].is_number()) throw ParseError(n, std::string("field \"") + key + "\" must hold numbers");
    out[i] = v[i].get<double>();
  }
  return out;
}

BBox box_field(const json& obj, const char* key, std::size_t n) {
  const auto a = number_array<4>(obj, key, n);
  const BBox b{a[0], a[1], a[2], a[3]};
  try {
    require_valid(b, std::string("\"") + key + "\"");
  } catch (const Error& e) {
    throw ParseError(n, e.what());
  }
  return b;
}

bool blank(std::string_view line) {
  return line.find_first_not_of(" \t\r") == std::string_view::npos;
}

// Negative zero is written as "-0.0".
std::string log_number(double v) {
  return v == 0.0 && std::signbit(v) ? "-0.0" : format_shortest(v);
}

void append_box(std::string& out, const BBox& b) {
  out += '[';
  out += log_number(b.cx);
  out += ',';
  out += log_number(b.cy);
  out += ',';
  out += log_number(b.w);
  out += ',';
  out += log_number(b.h);
  out += ']';
}

void append_vec(std::string& out, const Vec4& v) {
  out += '[';
  for (int d = 0; d < 4; ++d) {
    if (d) out += ',';
    out += format_precise(v[d]);
  }
  out += ']';
}

}  // namespace

ProposalLogRecord parse_record(std::string_view line, std::size_t n) {
  const json obj = parse_json_line(line, n);
  if (!obj.is_object()) throw ParseError(n, "record must be a JSON object");
  reject_unknown(obj, {"image_id", "gt", "gt_class", "proposal", "source", "pred_class"}, n);
  ProposalLogRecord r;
  r.image_id = string_field(obj, "image_id", n);
  r.gt = box_field(obj, "gt", n);
  r.gt_class = int_field(obj, "gt_class", n);
  r.proposal = box_field(obj, "proposal", n);
  const std::string source = string_field(obj, "source", n);
  if (source == "rpn")
    r.source = ProposalSource::rpn;
  else if (source == "sampled")
    r.source = ProposalSource::sampled;
  else
    throw ParseError(n, "field \"source\" must be \"rpn\" or \"sampled\"");
  if (obj.contains("pred_class")) r.pred_class = int_field(obj, "pred_class", n);
  return r;
}

ParsedLog parse_log(std::istream& in, ParseOptions options) {
  ParsedLog log;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (blank(line)) continue;
    try {
      log.records.push_back(parse_record(line, n));
    } catch (const ParseError& e) {
      if (options.strict) throw;
      log.skipped.push_back({e.line(), e.what()});
    }
  }
  return log;
}

std::string serialize_record(const ProposalLogRecord& r) {
  std::string out = "{\"image_id\":";
  out += json(r.image_id).dump();
  out += ",\"gt\":";
  append_box(out, r.gt);
  out += ",\"gt_class\":";
  out += std::to_string(r.gt_class);
  out += ",\"proposal\":";
  append_box(out, r.proposal);
  out += ",\"source\":";
  out += r.source == ProposalSource::rpn ? "\"rpn\"" : "\"sampled\"";
  if (r.pred_class) {
    out += ",\"pred_class\":";
    out += std::to_string(*r.pred_class);
  }
  out += '}';
  return out;
}

void write_log(std::ostream& os, std::span<const ProposalLogRecord> records) {
  for (const auto& r : records) os << serialize_record(r) << '\n';
}

ProposalLogRecord to_log_record(const SampledProposal& p, const BBox& gt) {
  return {p.image_id, gt, p.class_label, p.box, ProposalSource::sampled, std::nullopt};
}

std::vector<GtRecord> parse_gts(std::istream& in) {
  std::vector<GtRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (blank(line)) continue;
    const json obj = parse_json_line(line, n);
    if (!obj.is_object()) throw ParseError(n, "record must be a JSON object");
    reject_unknown(obj, {"image_id", "gt", "gt_class", "image_size"}, n);
    GtRecord g;
    g.image_id = string_field(obj, "image_id", n);
    g.gt = box_field(obj, "gt", n);
    g.gt_class = int_field(obj, "gt_class", n);
    if (obj.contains("image_size")) {
      const auto s = number_array<2>(obj, "image_size", n);
      if (!(s[0] > 0.0) || !(s[1] > 0.0) || !std::isfinite(s[0]) || !std::isfinite(s[1]))
        throw ParseError(n, "field \"image_size\" must be positive");
      g.image_size = ImageBounds{s[0], s[1]};
    }
    out.push_back(std::move(g));
  }
  return out;
}

std::string model_to_json(const OffsetModel& model) {
  std::string out;
  if (const auto* g = std::get_if<DiagonalGaussian4>(&model)) {
    out = "{\"kind\":\"gaussian\",\"mu\":";
    append_vec(out, g->mu);
    out += ",\"var\":";
    append_vec(out, g->var);
  } else {
    const auto& u = std::get<Uniform4>(model);
    out = "{\"kind\":\"uniform\",\"lo\":";
    append_vec(out, u.lo);
    out += ",\"hi\":";
    append_vec(out, u.hi);
  }
  out += '}';
  return out;
}

OffsetModel model_from_json(std::string_view text) {
  json obj;
  try {
    obj = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw Error(std::string("model file: malformed JSON: ") + e.what());
  }
  try {
    if (!obj.is_object()) throw ParseError(1, "model must be a JSON object");
    const std::string kind = string_field(obj, "kind", 1);
    OffsetModel model;
    if (kind == "gaussian") {
      reject_unknown(obj, {"kind", "mu", "var"}, 1);
      model = DiagonalGaussian4{number_array<4>(obj, "mu", 1), number_array<4>(obj, "var", 1)};
    } else if (kind == "uniform") {
      reject_unknown(obj, {"kind", "lo", "hi"}, 1);
      model = Uniform4{number_array<4>(obj, "lo", 1), number_array<4>(obj, "hi", 1)};
    } else {
      throw ParseError(1, "\"kind\" must be \"gaussian\" or \"uniform\"");
    }
    validate(model);
    return model;
  } catch (const ParseError& e) {
    throw Error(std::string("model file: ") + e.what());
  }
}

std::string per_class_to_json(const std::map<int, DiagonalGaussian4>& models) {
  std::string out = "{\"per_class\":[";
  bool first = true;
  for (const auto& [label, g] : models) {
    if (!first) out += ',';
    first = false;
    out += "{\"class\":" + std::to_string(label) + ",\"model\":" + model_to_json(g) + "}";
  }
  out += "]}";
  return out;
}

}  // namespace pdc
