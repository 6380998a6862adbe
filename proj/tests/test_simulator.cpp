#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "pdc/error.hpp"
#include "pdc/simulator.hpp"

namespace fs = std::filesystem;
using namespace pdc;
using namespace pdc::sim;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.seeds = {0};
  c.base_instances_per_class = 40;
  c.test_instances_per_class = 10;
  c.base_epochs = 30;
  c.finetune_epochs = 10;
  return c;
}

bool same_scenes(const std::vector<SyntheticScene>& a, const std::vector<SyntheticScene>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].image_id != b[i].image_id || a[i].seed != b[i].seed || a[i].objects.size() != b[i].objects.size())
      return false;
    for (std::size_t k = 0; k < a[i].objects.size(); ++k)
      if (a[i].objects[k].box != b[i].objects[k].box || a[i].objects[k].class_label != b[i].objects[k].class_label ||
          a[i].objects[k].appearance != b[i].objects[k].appearance)
        return false;
  }
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TinyRoiHead fresh_head(const ExperimentConfig& c, const Dataset& ds, std::uint64_t seed = 0) {
  Rng rng(seed);
  return TinyRoiHead::init(c.num_classes(), ds.world.feature_dim(), static_cast<std::size_t>(c.contrastive_dim), rng);
}

}  // namespace

TEST_CASE("config JSON round trip and rejection") {
  const ExperimentConfig c;
  const auto text = config_to_json(c);
  const auto back = config_from_json(text);
  CHECK(config_to_json(back) == text);
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(c).size() == 16);
  ExperimentConfig d = c;
  d.lambda = 0.2;
  CHECK(config_hash(d) != config_hash(c));

  CHECK(config_from_json(R"({"k_shot":2})").k_shot == 2);
  CHECK_THROWS_AS(config_from_json(R"({"k_shots":2})"), Error);
  CHECK_THROWS_AS(config_from_json(R"({"rpn":{"bogus":1}})"), Error);
  CHECK_THROWS_AS(config_from_json(R"({"k_shot":0})"), Error);
  CHECK_THROWS_AS(config_from_json(R"({"contrastive_set":"all"})"), Error);
  CHECK_THROWS_AS(config_from_json("[1]"), Error);
  CHECK(config_from_json(R"({"contrastive_set":"both"})").contrastive_set == ContrastiveSet::both);
}

TEST_CASE("defaults carry the published hyper-parameters") {
  const ExperimentConfig c;
  CHECK(c.lambda == 0.1);
  CHECK(c.tau == 0.2);
  CHECK(c.contrastive_dim == 128);
  CHECK(c.j_per_instance == 50);
  CHECK(c.seeds.size() == 10);
}

TEST_CASE("dataset contract") {
  const auto c = small_config();
  const auto ds = generate_dataset(c, 3);
  int novel = 0;
  for (const auto& s : ds.finetune) {
    CHECK(s.objects.size() == 1);
    for (const auto& o : s.objects) novel += c.is_novel(o.class_label);
  }
  CHECK(novel == c.k_shot * c.c_novel);
  CHECK(ds.finetune.size() == static_cast<std::size_t>(c.k_shot * c.num_classes()));
  for (const auto& s : ds.base)
    for (const auto& o : s.objects) {
      CHECK_FALSE(c.is_novel(o.class_label));
      CHECK(o.box.x0() >= 0.0);
      CHECK(o.box.x1() <= c.image_size);
    }

  const auto& p = ds.world.prototypes;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double n = 0.0;
    for (double x : p.row(i)) n += x * x;
    CHECK(n == doctest::Approx(1.0));
    for (std::size_t j = i + 1; j < p.rows(); ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < p.cols(); ++k) dot += p(i, k) * p(j, k);
      CHECK(dot <= 0.3);
    }
  }

  const auto again = generate_dataset(c, 3);
  CHECK(again.world == ds.world);
  CHECK(same_scenes(again.base, ds.base));
  CHECK(same_scenes(again.finetune, ds.finetune));
  CHECK(same_scenes(again.test, ds.test));
  CHECK_FALSE(same_scenes(generate_dataset(c, 4).test, ds.test));

  auto k5 = c;
  k5.k_shot = 5;
  int n5 = 0;
  for (const auto& s : generate_dataset(k5, 3).finetune)
    for (const auto& o : s.objects) n5 += k5.is_novel(o.class_label);
  CHECK(n5 == 25);
}

TEST_CASE("proposal features") {
  const auto c = small_config();
  const auto ds = generate_dataset(c, 1);
  const auto& scene = ds.base.front();
  const auto& obj = scene.objects.front();
  const std::size_t da = ds.world.prototypes.cols();
  const auto beta = ds.world.cue_bias[static_cast<std::size_t>(obj.class_label)];

  const auto f1 = proposal_feature(ds.world, scene, obj.box, 0, false);
  REQUIRE(f1.size() == ds.world.feature_dim());
  for (std::size_t k = 0; k < da; ++k) CHECK(f1[k] == doctest::Approx(obj.appearance[k]));
  for (std::size_t k = 0; k < 4; ++k) CHECK(f1[da + k] == doctest::Approx(ds.world.cue_scale * beta[k]));

  const BBox far{obj.box.cx + 3 * obj.box.w, obj.box.cy, obj.box.w, obj.box.h};
  const auto f0 = proposal_feature(ds.world, scene, far, 0, false);
  for (std::size_t k = 0; k < da; ++k) CHECK(f0[k] == doctest::Approx(ds.world.background[k]));
  for (std::size_t k = 0; k < 4; ++k) CHECK(f0[da + k] == 0.0);
  const auto fn = proposal_feature(ds.world, scene, far, std::nullopt, false);
  CHECK(fn == f0);

  // Horizontal shift by w/3 gives IoU (2/3) / (4/3) = 0.5.
  const BBox half{obj.box.cx + obj.box.w / 3.0, obj.box.cy, obj.box.w, obj.box.h};
  const double q = oracle::iou(half, obj.box);
  CHECK(q == doctest::Approx(0.5));
  const auto fh = proposal_feature(ds.world, scene, half, 0, false);
  const auto t = oracle::encode(obj.box, half);
  const double tv[4] = {t.dx, t.dy, t.dw, t.dh};
  for (std::size_t k = 0; k < da; ++k)
    CHECK(fh[k] == doctest::Approx(q * obj.appearance[k] + (1 - q) * ds.world.background[k]));
  for (std::size_t k = 0; k < 4; ++k) CHECK(fh[da + k] == doctest::Approx(ds.world.cue_scale * (tv[k] + q * beta[k])));

  const auto a = proposal_feature(ds.world, scene, half, 0);
  CHECK(a == proposal_feature(ds.world, scene, half, 0));
  CHECK(a != fh);
  const BBox nudged{half.cx + 1e-9, half.cy, half.w, half.h};
  CHECK(a != proposal_feature(ds.world, scene, nudged, 0));
}

TEST_CASE("head init and zero-epoch training") {
  const auto c = small_config();
  const auto ds = generate_dataset(c, 2);
  const auto head = fresh_head(c, ds);
  CHECK(head.cls_w.rows() == static_cast<std::size_t>(c.num_classes() + 1));
  CHECK(head.reg_w.rows() == 4);
  CHECK(head.proj.rows() == static_cast<std::size_t>(c.contrastive_dim));
  CHECK(head.finite());
  const auto r = base_train(head, c, ds.world, ds.base, 0, 2);
  CHECK(r.head == head);
  CHECK_FALSE(r.base_offsets.empty());
}

TEST_CASE("base training recovers the RPN statistics and learns base classes") {
  const ExperimentConfig c;
  const auto ds = generate_dataset(c, 0);
  const auto r = base_train(fresh_head(c, ds), c, ds.world, ds.base, c.base_epochs, 0);
  const auto& g = c.rpn.offset_dist;
  for (int d = 0; d < 4; ++d) {
    CHECK(std::abs(r.base_stats.mu[d] - g.mu[d]) <= 0.05 * std::sqrt(g.var[d]));
    CHECK(std::abs(r.base_stats.var[d] - g.var[d]) <= 0.05 * g.var[d]);
  }
  const auto m = evaluate(r.head, c, ds.world, ds.test, {}, 0);
  CHECK(m.base_accuracy >= 0.9);
}

TEST_CASE("fine-tuning contracts") {
  auto c = small_config();
  const auto ds = generate_dataset(c, 5);
  const auto base = base_train(fresh_head(c, ds), c, ds.world, ds.base, c.base_epochs, 5);

  const auto baseline = finetune(base.head, c, ds.world, ds.finetune, base.base_stats, false, 5);
  CHECK(baseline == finetune(base.head, c, ds.world, ds.finetune, base.base_stats, false, 5));
  const auto pdc = finetune(base.head, c, ds.world, ds.finetune, base.base_stats, true, 5);
  CHECK(pdc == finetune(base.head, c, ds.world, ds.finetune, base.base_stats, true, 5));
  CHECK_FALSE(pdc == baseline);

  auto j0 = c;
  j0.j_per_instance = 0;
  CHECK(finetune(base.head, j0, ds.world, ds.finetune, base.base_stats, true, 5) == baseline);

  auto l0 = c;
  l0.lambda = 0.0;
  const auto pdc_l0 = finetune(base.head, l0, ds.world, ds.finetune, base.base_stats, true, 5);
  CHECK(pdc_l0.cls_w == baseline.cls_w);
  CHECK(pdc_l0.reg_w == baseline.reg_w);
  l0.ps_in_main_loss = true;
  CHECK_FALSE(finetune(base.head, l0, ds.world, ds.finetune, base.base_stats, true, 5).reg_w == baseline.reg_w);

  CHECK(ds.world == generate_dataset(c, 5).world);
}

TEST_CASE("evaluation bounds") {
  const auto c = small_config();
  const auto ds = generate_dataset(c, 6);
  const auto head = fresh_head(c, ds);
  const auto zero = evaluate(head, c, ds.world, ds.test, {}, 6);
  CHECK(zero.novel_boxes > 0);
  CHECK(zero.mean_iou_novel == doctest::Approx(zero.raw_iou_novel).epsilon(1e-12));

  EvalOptions oracle_opts;
  oracle_opts.oracle_regression = true;
  const auto best = evaluate(head, c, ds.world, ds.test, {}, 6, oracle_opts);
  CHECK(best.mean_iou_novel >= 0.99);

  const auto base = base_train(head, c, ds.world, ds.base, c.base_epochs, 6);
  const auto a = evaluate(base.head, c, ds.world, ds.test, zero.base_residuals, 6);
  const auto b = evaluate(base.head, c, ds.world, ds.test, zero.base_residuals, 6);
  CHECK(a.mean_iou_novel == b.mean_iou_novel);
  CHECK(a.mmd_novel_vs_base_stats == b.mmd_novel_vs_base_stats);
  CHECK(a.mmd_novel_vs_base_stats > 0.0);
  CHECK(a.iou_hist.total == a.novel_boxes);
}

TEST_CASE("experiment report shape and determinism") {
  auto c = small_config();
  c.base_instances_per_class = 10;
  c.test_instances_per_class = 4;
  c.base_epochs = 3;
  c.finetune_epochs = 2;
  c.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto report = run_experiment(c);
  REQUIRE(report.seeds.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) CHECK(report.seeds[i].seed == i);

  const auto d1 = fs::temp_directory_path() / "pdc-sim-report-1";
  const auto d2 = fs::temp_directory_path() / "pdc-sim-report-2";
  fs::remove_all(d1);
  fs::remove_all(d2);
  write_report(report, d1);
  write_report(run_experiment(c), d2);
  std::size_t rows = 0;
  std::istringstream pairs(slurp(d1 / "pairs.csv"));
  for (std::string line; std::getline(pairs, line);) ++rows;
  CHECK(rows == 11);
  for (const auto& e : fs::directory_iterator(d1)) {
    CAPTURE(e.path().filename().string());
    CHECK(slurp(e.path()) == slurp(d2 / e.path().filename()));
  }
  CHECK(fs::exists(d1 / "offsets_dx_base.svg"));
  CHECK(fs::exists(d1 / "iou_hist_pdc.csv"));
  CHECK(fs::exists(d1 / "precision_baseline.svg"));
  fs::remove_all(d1);
  fs::remove_all(d2);
}
