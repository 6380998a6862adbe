// Acceptance suite: one PASS/FAIL line per criterion, with wall time.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "pdc/cli.hpp"
#include "pdc/diagnostics.hpp"
#include "pdc/error.hpp"
#include "pdc/io.hpp"
#include "pdc/losses.hpp"
#include "pdc/sampling.hpp"
#include "pdc/simulator.hpp"
#include "pdc/statistics.hpp"

namespace fs = std::filesystem;
using namespace pdc;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) {
      pass = false;
      detail = what;
    }
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome round_trip() {
  Outcome o;
  Rng rng(101);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const BBox g{rng.uniform(-200, 800), rng.uniform(-200, 800), rng.uniform(0.5, 300), rng.uniform(0.5, 300)};
    const BBox p{rng.uniform(-200, 800), rng.uniform(-200, 800), rng.uniform(0.5, 300), rng.uniform(0.5, 300)};
    const BBox back = apply_offset(g, encode_offset(p, g));
    const double scale = std::max({std::abs(p.cx), std::abs(p.cy), p.w, p.h});
    for (double e : {back.cx - p.cx, back.cy - p.cy, back.w - p.w, back.h - p.h})
      worst = std::max(worst, std::abs(e) / scale);
  }
  o.require(worst <= 1e-9, "max relative error " + fmt("%.3g", worst));
  o.detail = o.pass ? "10^4 pairs, max relative error " + fmt("%.3g", worst) : o.detail;
  return o;
}

Outcome gaussian_fit() {
  Outcome o;
  Rng rng(202);
  const Vec4 mu{0.05, -0.03, 0.1, 0.2}, sd{0.06, 0.04, 0.08, 0.07};
  std::vector<OffsetVec> s(100000);
  oracle::Rows rows;
  rows.reserve(s.size());
  for (auto& x : s) {
    x = {rng.normal(mu[0], sd[0]), rng.normal(mu[1], sd[1]), rng.normal(mu[2], sd[2]), rng.normal(mu[3], sd[3])};
    rows.push_back({x.dx, x.dy, x.dw, x.dh});
  }
  const auto g = fit_gaussian(s);
  const auto m = oracle::two_pass(rows);
  double oracle_err = 0.0, gen_err = 0.0;
  for (int d = 0; d < 4; ++d) {
    oracle_err = std::max({oracle_err, oracle::rel_err(g.mu[d], m.mean[d]), oracle::rel_err(g.var[d], m.var[d])});
    gen_err = std::max({gen_err, std::abs(g.mu[d] - mu[d]) / std::abs(mu[d]),
                        std::abs(g.var[d] - sd[d] * sd[d]) / (sd[d] * sd[d])});
  }
  o.require(oracle_err <= 1e-9, "two-pass mismatch " + fmt("%.3g", oracle_err));
  o.require(gen_err <= 0.02, "generator mismatch " + fmt("%.3g", gen_err));
  if (o.pass) o.detail = "oracle rel " + fmt("%.2g", oracle_err) + ", generator rel " + fmt("%.3f", gen_err);
  return o;
}

Outcome sampling_fidelity() {
  Outcome o;
  const DiagonalGaussian4 model{{0.01, -0.02, -0.03, 0.04}, {0.0036, 0.0016, 0.0081, 0.0049}};
  SamplerConfig cfg;
  cfg.model = model;
  cfg.j_per_instance = 50;
  cfg.seed = 303;
  cfg.clip = false;
  std::vector<GroundTruth> gts;
  for (int i = 0; i < 200; ++i)
    gts.push_back({{20.0 + 3 * i, 50.0 + (i % 13), 10.0 + (i % 17), 8.0 + (i % 11)}, i % 7});
  const auto set = build_calibrated_set("scene", gts, {}, cfg);
  o.require(set.sampled.size() == 10000, "expected 10^4 proposals");
  oracle::Rows rows;
  std::size_t faithful = 0;
  for (const auto& p : set.sampled) {
    faithful += p.class_label == gts[p.source_gt].class_label;
    const auto off = oracle::encode(p.box, gts[p.source_gt].box);
    rows.push_back({off.dx, off.dy, off.dw, off.dh});
  }
  const auto m = oracle::two_pass(rows);
  double mean_dev = 0.0, var_dev = 0.0;
  for (int d = 0; d < 4; ++d) {
    mean_dev = std::max(mean_dev, std::abs(m.mean[d] - model.mu[d]) / std::sqrt(model.var[d]));
    var_dev = std::max(var_dev, std::abs(m.var[d] - model.var[d]) / model.var[d]);
  }
  o.require(faithful == set.sampled.size(), "label fidelity below 100%");
  o.require(mean_dev <= 0.05, "mean off by " + fmt("%.3f", mean_dev) + " sigma");
  o.require(var_dev <= 0.05, "variance off by " + fmt("%.3f", var_dev));
  if (o.pass) o.detail = "mean within " + fmt("%.3f", mean_dev) + " sigma, variance within " + fmt("%.3f", var_dev) + ", labels 100%";
  return o;
}

Outcome uniform_fit() {
  Outcome o;
  const DiagonalGaussian4 g{{0.0, 0.01, -0.02, 0.03}, {0.01, 0.0004, 0.0025, 0.04}};
  const Uniform4 u = fit_optimal_uniform(g);
  const Vec4 sigma = g.sigma();
  double worst = 0.0;
  for (int d = 0; d < 4; ++d) {
    const double a = u.hi[d] - g.mu[d];
    o.require(std::abs((g.mu[d] - u.lo[d]) - a) <= 1e-12 * (1.0 + a), "asymmetric interval");
    worst = std::max(worst, std::abs(a - oracle::grid_half_width(sigma[d])) / sigma[d]);
  }
  o.require(worst <= 1e-3, "grid mismatch " + fmt("%.3g", worst) + " sigma");
  const double a1 = optimal_uniform_half_width(0.1), a2 = optimal_uniform_half_width(0.2);
  o.require(std::abs(a2 - 2.0 * a1) <= 1e-6 * 0.2, "not linear in sigma");
  o.require(std::abs(optimal_uniform_half_width(1.0) - 1.486387700) <= 1e-6, "golden a* mismatch");
  if (o.pass) o.detail = "grid agreement " + fmt("%.2g", worst) + " sigma, a*/sigma " + fmt("%.7f", a1 / 0.1);
  return o;
}

ContrastiveBatch batch_from(const oracle::Rows& z, const std::vector<int>& labels, double tau) {
  ContrastiveBatch b;
  b.tau = tau;
  for (std::size_t i = 0; i < z.size(); ++i) b.embeddings.push_back({z[i], labels[i], i});
  return b;
}

Outcome supcon() {
  Outcome o;
  const double worked = supcon_loss(batch_from({{1, 0}, {1, 0}, {0, 1}}, {0, 0, 1}, 1.0));
  o.require(std::abs(worked - 2.0 * std::log(1.0 + std::exp(-1.0)) / 3.0) <= 1e-6, "worked example " + fmt("%.8f", worked));
  o.require(fmt("%.5f", worked) == "0.20884", "worked example rounds to " + fmt("%.5f", worked));
  Rng rng(404);
  for (int t = 0; t < 10; ++t) {
    const double x = rng.normal(), y = rng.normal();
    const double n = std::hypot(x, y);
    const double v = supcon_loss(batch_from({{x / n, y / n}, {1, 0}}, {3, 3}, rng.uniform(0.05, 2.0)));
    o.require(v == 0.0, "two-sample batch gives " + fmt("%.3g", v));
  }
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 4 + rng.below(12), d = 2 + rng.below(9), classes = 1 + rng.below(4);
    oracle::Rows z(n, std::vector<double>(d));
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (auto& v : z[i]) {
        v = rng.normal();
        s += v * v;
      }
      for (auto& v : z[i]) v /= std::sqrt(s);
      labels[i] = static_cast<int>(rng.below(classes));
    }
    const double tau = rng.uniform(0.1, 1.0);
    const auto g = supcon_grad(batch_from(z, labels, tau));
    const auto fd = oracle::supcon_fd(z, labels, tau);
    double num = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) {
        num = std::max(num, std::abs(g[i][k] - fd[i][k]));
        scale = std::max({scale, std::abs(g[i][k]), std::abs(fd[i][k])});
      }
    worst = std::max(worst, scale == 0.0 ? 0.0 : num / scale);
  }
  o.require(worst <= 1e-5, "gradient relative error " + fmt("%.3g", worst));
  if (o.pass) o.detail = "worked " + fmt("%.6f", worked) + ", 100 batches max gradient rel error " + fmt("%.2g", worst);
  return o;
}

Outcome loss_assembly() {
  Outcome o;
  const auto ex = assemble_pdc_loss(1.0, 0.2, 0.3, 0.5, 0.1);
  o.require(std::abs(ex.re_roi_total - 1.0) <= 1e-15 && std::abs(ex.grand_total - 1.1) <= 1e-15, "worked example");
  Rng rng(505);
  for (int t = 0; t < 10000; ++t) {
    const double base = rng.uniform(0, 10), con = rng.uniform(0, 5), cls = rng.uniform(0, 5), reg = rng.uniform(0, 5);
    const double lambda = rng.uniform(0, 2);
    const auto b = assemble_pdc_loss(base, con, cls, reg, lambda);
    o.require(b.re_roi_total == (cls + con) + reg, "re_roi identity");
    o.require(b.grand_total == base + lambda * b.re_roi_total, "grand identity");
    o.require(b.con == con && b.cls == cls && b.reg == reg && b.base_total == base && b.lambda == lambda, "fields");
    o.require(assemble_pdc_loss(base, con, cls, reg, 0.0).grand_total == base, "lambda = 0");
  }
  if (o.pass) o.detail = "10^4 random inputs, identities exact";
  return o;
}

Matrix to_matrix(const oracle::Rows& r) {
  Matrix m(r.size(), r.front().size());
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t k = 0; k < r[i].size(); ++k) m(i, k) = r[i][k];
  return m;
}

Outcome mmd() {
  Outcome o;
  const auto a = to_matrix({{0, 0}, {2, 0}}), b = to_matrix({{1, 1}});
  o.require(mmd_linear(a, b) == 1.0 && mmd_linear(b, a) == 1.0 && mmd_linear(a, a) == 0.0, "linear hand examples");

  Rng rng(606);
  double worst = 0.0;
  for (int t = 0; t < 5; ++t) {
    const std::size_t na = 50 + rng.below(151), nb = 50 + rng.below(151);
    const double shift = rng.uniform(0, 3);
    oracle::Rows x(na, std::vector<double>(4)), y(nb, std::vector<double>(4));
    for (auto& r : x)
      for (auto& v : r) v = rng.normal();
    for (auto& r : y)
      for (auto& v : r) v = shift + rng.normal();
    const double h = oracle::median_distance(x, y);
    worst = std::max(worst, std::abs(mmd_rbf(to_matrix(x), to_matrix(y)) - oracle::rbf_mmd(x, y, h)));
  }
  o.require(worst <= 1e-9, "rbf oracle mismatch " + fmt("%.3g", worst));

  // Offsets sampled from N(mu_b + delta, sigma_b^2), re-encoded, against a base sample.
  const DiagonalGaussian4 base = sim::ExperimentConfig{}.rpn.offset_dist;
  Rng base_rng(607);
  const auto reference = offsets_matrix(sample_offsets(base, 10000, base_rng));
  std::vector<GroundTruth> gts;
  for (int i = 0; i < 200; ++i) gts.push_back({{40.0 + i, 60.0, 12.0 + (i % 9), 10.0 + (i % 5)}, 0});
  std::vector<double> values;
  std::string trace;
  for (double delta : {0.0, 0.05, 0.1, 0.2}) {
    SamplerConfig cfg;
    cfg.model = DiagonalGaussian4{{base.mu[0] + delta, base.mu[1] + delta, base.mu[2] + delta, base.mu[3] + delta}, base.var};
    cfg.j_per_instance = 50;
    cfg.seed = 608;
    cfg.clip = false;
    std::vector<OffsetVec> offs;
    for (const auto& p : build_calibrated_set("scene", gts, {}, cfg).sampled)
      offs.push_back(encode_offset(p.box, gts[p.source_gt].box));
    values.push_back(mmd_linear(offsets_matrix(offs), reference));
    trace += (trace.empty() ? "" : " < ") + fmt("%.4f", values.back());
  }
  for (std::size_t i = 1; i < values.size(); ++i) o.require(values[i] > values[i - 1], "not monotone: " + trace);
  if (o.pass) o.detail = "rbf oracle " + fmt("%.2g", worst) + ", linear MMD over shifts " + trace;
  return o;
}

Outcome simulator() {
  Outcome o;
  const sim::ExperimentConfig config;
  const auto start = std::chrono::steady_clock::now();
  const auto report = sim::run_experiment(config);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const int n = static_cast<int>(report.seeds.size());
  const int iou = report.iou_wins(), acc = report.accuracy_wins(), mmd = report.mmd_wins();
  const std::string counts = "IoU " + std::to_string(iou) + "/" + std::to_string(n) + ", accuracy " +
                             std::to_string(acc) + "/" + std::to_string(n) + ", MMD " + std::to_string(mmd) + "/" +
                             std::to_string(n);
  o.require(n == 10, "expected 10 seeds");
  o.require(iou >= 8 && acc >= 8 && mmd >= 8, counts);
  o.require(secs < 300.0, "took " + fmt("%.0f", secs) + " s");
  if (o.pass) o.detail = counts;
  return o;
}

struct Cli {
  int code;
  std::string out, err;
};

Cli cli_run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

Outcome cli_contract() {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "pdc-acceptance-cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream(dir / name, std::ios::binary) << text;
    return (dir / name).string();
  };

  const auto zero = write("zero.jsonl",
                          R"({"image_id":"a","gt":[10,10,4,4],"gt_class":1,"proposal":[10,10,4,4],"source":"rpn"})"
                          "\n"
                          R"({"image_id":"b","gt":[5,7,2,3],"gt_class":0,"proposal":[5,7,2,3],"source":"sampled"})"
                          "\n");
  auto r = cli_run({"fit-stats", zero});
  o.require(r.code == 0 && r.out == "{\"kind\":\"gaussian\",\"mu\":[0,0,0,0],\"var\":[0,0,0,0]}\n", "fit-stats zero log");

  const auto a = write("a.jsonl",
                       R"({"image_id":"a","gt":[10,10,4,4],"gt_class":1,"proposal":[11,9,5,4],"source":"rpn"})"
                       "\n"
                       R"({"image_id":"a","gt":[20,10,6,4],"gt_class":2,"proposal":[19,10,6,5],"source":"rpn"})"
                       "\n");
  r = cli_run({"mmd", a, a, "--kernel", "linear"});
  o.require(r.code == 0 && r.out == "0.0\n", "mmd of identical logs");

  r = cli_run({"supcon-check", "--seed", "7"});
  const auto pos = r.out.find("max_relative_error ");
  o.require(r.code == 0 && pos != std::string::npos && std::stod(r.out.substr(pos + 19)) <= 1e-5, "supcon-check");

  o.require(cli_run({"frobnicate"}).code == 2, "unknown subcommand exit code");
  o.require(cli_run({"mmd", a}).code == 2, "missing argument exit code");

  const auto bad = write("bad.jsonl", std::string(R"({"image_id":"a","gt":[10,10,4,4],"gt_class":1,"proposal":[11,9,5,4],"source":"rpn"})") +
                                          "\n\n" + R"({"image_id":"a","gt":[10,10,4,-4],"gt_class":1,"proposal":[11,9,5,4],"source":"rpn"})" + "\n");
  r = cli_run({"fit-stats", bad});
  o.require(r.code == 1 && r.err.find("line 3:") != std::string::npos, "line-numbered invariant error");
  const auto junk = write("junk.jsonl", "{\"image_id\":\n");
  r = cli_run({"diagnose", junk, "--figures", (dir / "f").string()});
  o.require(r.code == 1 && r.err.find("line 1: malformed JSON") != std::string::npos, "line-numbered JSON error");

  // Fuzz corpus: random canonical records through the CLI's sampler and
  // directly, parsed and re-serialized.
  Rng rng(909);
  std::string corpus;
  for (int i = 0; i < 1000; ++i) {
    ProposalLogRecord rec;
    rec.image_id = "img-" + std::to_string(rng.below(100)) + (rng.below(4) == 0 ? "\"\\\xc3\xa9" : "");
    const auto num = [&](bool positive) {
      const double v = std::ldexp(rng.uniform(1.0, 2.0), static_cast<int>(rng.below(60)) - 30);
      return positive || rng.below(2) ? v : -v;
    };
    rec.gt = {num(false), num(false), num(true), num(true)};
    rec.proposal = {num(false), num(false), num(true), num(true)};
    rec.gt_class = static_cast<int>(rng.below(1000));
    rec.source = rng.below(2) ? ProposalSource::rpn : ProposalSource::sampled;
    if (rng.below(2)) rec.pred_class = static_cast<int>(rng.below(1000));
    corpus += serialize_record(rec) + "\n";
  }
  std::istringstream in(corpus);
  const auto parsed = parse_log(in);
  std::ostringstream again;
  write_log(again, parsed.records);
  o.require(parsed.records.size() == 1000 && again.str() == corpus, "fuzz corpus re-serialization");

  fs::remove_all(dir);
  if (o.pass) o.detail = "golden subcommands, line-numbered errors, 1000-line fuzz byte-identical";
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"offset round trip", 1.0, round_trip},
      {"offset statistics fit", 5.0, gaussian_fit},
      {"sampling fidelity", 5.0, sampling_fidelity},
      {"optimal uniform fit", 10.0, uniform_fit},
      {"supervised contrastive loss", 10.0, supcon},
      {"loss assembly", 10.0, loss_assembly},
      {"maximum mean discrepancy", 10.0, mmd},
      {"simulator directional effect", 300.0, simulator},
      {"command-line contract", 60.0, cli_contract},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (o.pass && secs > c.budget_s) {
      o.pass = false;
      o.detail = "over time budget of " + fmt("%.0f", c.budget_s) + " s";
    }
    failed += !o.pass;
    std::printf("%s  %-30s %8.3f s  %s\n", o.pass ? "PASS" : "FAIL", c.name, secs, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
