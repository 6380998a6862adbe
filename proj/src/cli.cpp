#include "pdc/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "pdc/diagnostics.hpp"
#include "pdc/error.hpp"
#include "pdc/gradcheck.hpp"
#include "pdc/io.hpp"
#include "pdc/report.hpp"
#include "pdc/simulator.hpp"

namespace pdc::cli {

namespace {

inline constexpr double kGradientTolerance = 1e-5;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ParsedLog load_log(const std::string& path, bool lenient, std::ostream& err) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  try {
    ParsedLog log = parse_log(in, ParseOptions{!lenient});
    for (const auto& issue : log.skipped) err << path << ": line " << issue.line << ": " << issue.message << '\n';
    if (!log.skipped.empty()) err << path << ": skipped " << log.skipped.size() << " malformed line(s)\n";
    return log;
  } catch (const ParseError& e) {
    throw Error(path + ": " + e.what());
  }
}

// Writes to `path`, or to `out` when the path is empty.
void emit(const std::string& path, std::ostream& out, const std::string& text) {
  if (path.empty()) {
    out << text;
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os << text;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
}

std::vector<OffsetVec> log_offsets(std::span<const ProposalLogRecord> records) {
  std::vector<OffsetVec> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(encode_offset(r.proposal, r.gt));
  return out;
}

Matrix log_features(std::span<const ProposalLogRecord> records, const std::string& kind) {
  if (kind == "corners") {
    std::vector<BBox> boxes;
    for (const auto& r : records) boxes.push_back(r.proposal);
    return corner_matrix(boxes);
  }
  return offsets_matrix(log_offsets(records));
}

int fit_stats(const std::string& path, const std::string& output, bool per_class, bool lenient,
              std::ostream& out, std::ostream& err) {
  const ParsedLog log = load_log(path, lenient, err);
  if (log.records.empty()) throw Error(path + ": no records to fit");
  if (per_class) {
    std::vector<LabeledOffset> labeled;
    for (const auto& r : log.records) labeled.push_back({r.gt_class, encode_offset(r.proposal, r.gt)});
    emit(output, out, per_class_to_json(fit_gaussian_per_class(labeled)) + "\n");
  } else {
    emit(output, out, model_to_json(fit_gaussian(log_offsets(log.records))) + "\n");
  }
  return kExitOk;
}

int fit_uniform(const std::string& path, const std::string& output, std::ostream& out) {
  const OffsetModel model = model_from_json(read_file(path));
  const auto* g = std::get_if<DiagonalGaussian4>(&model);
  if (!g) throw Error(path + ": fit-uniform needs a gaussian model");
  emit(output, out, model_to_json(fit_optimal_uniform(*g)) + "\n");
  return kExitOk;
}

int sample(const std::string& path, const std::string& model_path, int j, std::uint64_t seed,
           const std::string& output, std::ostream& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  const auto gts = parse_gts(in);
  SamplerConfig cfg;
  cfg.model = model_from_json(read_file(model_path));
  cfg.j_per_instance = j;
  cfg.seed = seed;
  cfg.validate();

  std::map<std::string, std::size_t> per_image;
  std::vector<ProposalLogRecord> records;
  for (const auto& g : gts) {
    const std::size_t index = per_image[g.image_id]++;
    Rng rng = proposal_stream(seed, g.image_id, index);
    for (const auto& p : sample_proposals_for_gt(g.gt, g.gt_class, index, g.image_id, cfg, g.image_size, rng))
      records.push_back(to_log_record(p, g.gt));
  }
  std::ostringstream os;
  write_log(os, records);
  emit(output, out, os.str());
  return kExitOk;
}

int supcon_check(std::uint64_t seed, std::ostream& out) {
  const SupConCheck check = supcon_gradient_check(seed);
  out << "loss " << format_real(check.loss) << '\n';
  out << "max_relative_error " << format_real(check.max_relative_error) << '\n';
  return check.max_relative_error <= kGradientTolerance ? kExitOk : kExitInvalid;
}

int mmd(const std::string& a_path, const std::string& b_path, const std::string& kernel,
        std::optional<double> bandwidth, const std::string& features, bool lenient, std::ostream& out,
        std::ostream& err) {
  const ParsedLog a = load_log(a_path, lenient, err);
  const ParsedLog b = load_log(b_path, lenient, err);
  if (a.records.empty() || b.records.empty()) throw Error("mmd needs non-empty logs");
  const Matrix fa = log_features(a.records, features);
  const Matrix fb = log_features(b.records, features);
  double value = 0.0;
  if (kernel == "linear") {
    value = mmd_linear(fa, fb);
  } else {
    if (bandwidth && !(*bandwidth > 0.0)) throw Error("bandwidth must be positive");
    value = bandwidth ? mmd_rbf(fa, fb, *bandwidth) : mmd_rbf(fa, fb);
  }
  out << format_real(value) << '\n';
  return kExitOk;
}

int diagnose(const std::string& path, const std::string& figures, bool lenient, std::ostream& out,
             std::ostream& err) {
  const ParsedLog log = load_log(path, lenient, err);
  if (log.records.empty()) throw Error(path + ": no records to diagnose");
  const std::filesystem::path dir(figures);
  std::filesystem::create_directories(dir);

  const auto offsets = log_offsets(log.records);
  const OffsetReport report = offset_report(offsets);
  static constexpr const char* dims[] = {"dx", "dy", "dw", "dh"};
  for (std::size_t d = 0; d < 4; ++d) {
    std::ostringstream csv;
    std::ostringstream svg;
    write_histogram_csv(csv, report.histograms[d]);
    write_histogram_svg(svg, report.histograms[d], std::string("proposal offsets ") + dims[d]);
    write_file(dir / (std::string("offsets_") + dims[d] + ".csv"), csv.str());
    write_file(dir / (std::string("offsets_") + dims[d] + ".svg"), svg.str());
  }
  write_file(dir / "offset_model.json", model_to_json(report.fit) + "\n");

  // One ground truth per distinct (image, gt box, class) triple.
  std::vector<BBox> preds;
  std::vector<GroundTruth> gts;
  std::vector<BBox> gt_boxes;
  std::vector<std::size_t> matching;
  std::map<std::tuple<std::string, Vec4, int>, std::size_t> gt_index;
  for (const auto& r : log.records) {
    const auto key = std::make_tuple(r.image_id, r.gt.as_array(), r.gt_class);
    auto [it, inserted] = gt_index.try_emplace(key, gts.size());
    if (inserted) {
      gts.push_back({r.gt, r.gt_class});
      gt_boxes.push_back(r.gt);
    }
    preds.push_back(r.proposal);
    matching.push_back(it->second);
  }
  const auto edges = uniform_edges(0.0, 1.0, 10);
  const Histogram ious = iou_histogram(preds, gt_boxes, matching, edges);
  {
    std::ostringstream csv;
    std::ostringstream svg;
    write_histogram_csv(csv, ious);
    write_histogram_svg(svg, ious, "proposal IoU with ground truth");
    write_file(dir / "iou_hist.csv", csv.str());
    write_file(dir / "iou_hist.svg", svg.str());
  }

  std::vector<PredictedBox> predicted;
  std::vector<std::size_t> predicted_match;
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    if (!log.records[i].pred_class) continue;
    predicted.push_back({log.records[i].proposal, *log.records[i].pred_class});
    predicted_match.push_back(matching[i]);
  }
  if (!predicted.empty()) {
    const auto buckets = precision_by_iou(predicted, gts, predicted_match, edges);
    std::ostringstream csv;
    std::ostringstream svg;
    write_precision_csv(csv, buckets);
    write_precision_svg(svg, buckets, "precision by IoU");
    write_file(dir / "precision.csv", csv.str());
    write_file(dir / "precision.svg", svg.str());
  }

  out << "records " << log.records.size() << '\n';
  out << "ground_truths " << gts.size() << '\n';
  for (std::size_t d = 0; d < 4; ++d)
    out << dims[d] << " mean " << format_real(report.fit.mu[d]) << " var " << format_real(report.fit.var[d]) << '\n';
  return kExitOk;
}

int simulate(const std::string& path, const std::string& out_root, std::ostream& out) {
  const sim::ExperimentConfig config = sim::config_from_json(read_file(path));
  const sim::ExperimentReport report = sim::run_experiment(config);
  const auto dir = std::filesystem::path(out_root) / ("run-" + sim::config_hash(config));
  sim::write_report(report, dir);
  const auto n = report.seeds.size();
  out << "report " << dir.string() << '\n';
  out << "iou_wins " << report.iou_wins() << '/' << n << '\n';
  out << "accuracy_wins " << report.accuracy_wins() << '/' << n << '\n';
  out << "mmd_wins " << report.mmd_wins() << '/' << n << '\n';
  return kExitOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Proposal distribution calibration toolkit", "pdc"};
  app.require_subcommand(1);
  bool lenient = false;
  app.add_flag("--lenient", lenient, "Skip malformed log lines instead of failing");

  std::string log_path, output, model_path, other_path, kernel = "linear", features = "offsets",
                                                        figures, out_root = ".";
  bool per_class = false;
  int j = 50;
  std::uint64_t seed = 0;
  std::optional<double> bandwidth;

  auto* fit_stats_cmd = app.add_subcommand("fit-stats", "Fit the offset Gaussian of a proposal log");
  fit_stats_cmd->add_option("log", log_path, "Proposal log (JSONL)")->required();
  fit_stats_cmd->add_option("-o,--output", output, "Model file (default: stdout)");
  fit_stats_cmd->add_flag("--per-class", per_class, "One model per ground-truth class");

  auto* fit_uniform_cmd = app.add_subcommand("fit-uniform", "Overlap-maximizing uniform for a Gaussian model");
  fit_uniform_cmd->add_option("model", model_path, "Gaussian model (JSON)")->required();
  fit_uniform_cmd->add_option("-o,--output", output, "Model file (default: stdout)");

  auto* sample_cmd = app.add_subcommand("sample", "Sample calibrated proposals around ground truths");
  sample_cmd->add_option("gts", log_path, "Ground-truth list (JSONL)")->required();
  sample_cmd->add_option("--model", model_path, "Offset model (JSON)")->required();
  sample_cmd->add_option("-J", j, "Proposals per instance")->check(CLI::NonNegativeNumber);
  sample_cmd->add_option("--seed", seed, "Random seed")->required();
  sample_cmd->add_option("-o,--output", output, "Proposal log (default: stdout)");

  auto* supcon_cmd = app.add_subcommand("supcon-check", "Check contrastive gradients against finite differences");
  supcon_cmd->add_option("--seed", seed, "Random seed")->required();

  auto* mmd_cmd = app.add_subcommand("mmd", "Maximum mean discrepancy between two proposal logs");
  mmd_cmd->add_option("log_a", log_path, "First proposal log")->required();
  mmd_cmd->add_option("log_b", other_path, "Second proposal log")->required();
  mmd_cmd->add_option("--kernel", kernel, "linear or rbf")->check(CLI::IsMember({"linear", "rbf"}));
  mmd_cmd->add_option("--bandwidth", bandwidth, "RBF bandwidth (default: median heuristic)");
  mmd_cmd->add_option("--features", features, "offsets or corners")->check(CLI::IsMember({"offsets", "corners"}));

  auto* diagnose_cmd = app.add_subcommand("diagnose", "Offset, IoU and precision reports for a proposal log");
  diagnose_cmd->add_option("log", log_path, "Proposal log (JSONL)")->required();
  diagnose_cmd->add_option("--figures", figures, "Output directory")->required();

  auto* simulate_cmd = app.add_subcommand("simulate", "Run the baseline vs calibrated fine-tuning experiment");
  simulate_cmd->add_option("config", model_path, "Experiment config (JSON)")->required();
  simulate_cmd->add_option("--out", out_root, "Parent directory of the run directory");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "pdc: " << e.what() << '\n';
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  }

  try {
    if (fit_stats_cmd->parsed()) return fit_stats(log_path, output, per_class, lenient, out, err);
    if (fit_uniform_cmd->parsed()) return fit_uniform(model_path, output, out);
    if (sample_cmd->parsed()) return sample(log_path, model_path, j, seed, output, out);
    if (supcon_cmd->parsed()) return supcon_check(seed, out);
    if (mmd_cmd->parsed()) return mmd(log_path, other_path, kernel, bandwidth, features, lenient, out, err);
    if (diagnose_cmd->parsed()) return diagnose(log_path, figures, lenient, out, err);
    if (simulate_cmd->parsed()) return simulate(model_path, out_root, out);
  } catch (const std::exception& e) {
    err << "pdc: " << e.what() << '\n';
    return kExitInvalid;
  }
  return kExitUsage;
}

}  // namespace pdc::cli
