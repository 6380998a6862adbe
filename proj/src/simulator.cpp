#include "pdc/simulator.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <future>
#include <json.hpp>
#include <numeric>
#include <sstream>
#include <thread>

#include "pdc/error.hpp"
#include "pdc/report.hpp"
#include "pdc/simd/kernels.hpp"

namespace pdc::sim {

namespace {

// Stream purposes; every random quantity is keyed by (seed, purpose, ...).
namespace tag {
constexpr std::uint64_t world = 1;
constexpr std::uint64_t base_scenes = 2;
constexpr std::uint64_t finetune_scenes = 3;
constexpr std::uint64_t test_scenes = 4;
constexpr std::uint64_t rpn_base = 5;
constexpr std::uint64_t rpn_finetune = 6;
constexpr std::uint64_t rpn_test = 7;
constexpr std::uint64_t head = 8;
constexpr std::uint64_t sampled = 9;
constexpr std::uint64_t contrastive = 10;
constexpr std::uint64_t cap = 11;
constexpr std::uint64_t background = 12;
}  // namespace tag

constexpr double kMaxPrototypeDot = 0.3;
constexpr double kMinDecodedScale = -0.9;

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void BiasedRpnModel::validate() const {
  offset_dist.validate();
  if (!(miss_rate_novel >= 0.0 && miss_rate_novel <= 1.0))
    throw Error("rpn model: miss_rate_novel must lie in [0, 1]");
  if (proposals_per_object < 1) throw Error("rpn model: proposals_per_object must be positive");
  if (background_per_image < 0) throw Error("rpn model: background_per_image must be non-negative");
}

void ExperimentConfig::validate() const {
  if (c_base < 1 || c_novel < 1) throw Error("config: class counts must be positive");
  if (k_shot < 1) throw Error("config: k_shot must be at least 1");
  if (j_per_instance < 0) throw Error("config: j_per_instance must be non-negative");
  if (!(lambda >= 0.0)) throw Error("config: lambda must be non-negative");
  if (!(tau > 0.0)) throw Error("config: tau must be positive");
  if (seeds.empty()) throw Error("config: at least one seed is required");
  if (base_epochs < 0 || finetune_epochs < 0) throw Error("config: epochs must be non-negative");
  if (!(learning_rate > 0.0)) throw Error("config: learning_rate must be positive");
  if (!(pos_neg_cap > 0.0)) throw Error("config: pos_neg_cap must be positive");
  if (!(image_size > 16.0)) throw Error("config: image_size must exceed 16");
  if (base_instances_per_class < 1 || test_instances_per_class < 1)
    throw Error("config: instance counts must be positive");
  if (max_objects_per_scene < 1) throw Error("config: max_objects_per_scene must be positive");
  if (appearance_dim < num_classes() + 1)
    throw Error("config: appearance_dim must exceed the number of classes");
  if (!(appearance_noise >= 0.0) || !(feature_noise >= 0.0) || !(cue_noise >= 0.0) ||
      !(cue_context_noise >= 0.0) ||
      !(cue_class_bias >= 0.0) || !(cue_scale > 0.0))
    throw Error("config: noise levels must be non-negative and cue_scale positive");
  if (contrastive_dim < 1 || contrastive_batch < 2)
    throw Error("config: contrastive_dim must be positive and contrastive_batch at least 2");
  rpn.validate();
}

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view set_name(ContrastiveSet s) {
  switch (s) {
    case ContrastiveSet::sampled: return "sampled";
    case ContrastiveSet::rpn: return "rpn";
    case ContrastiveSet::both: return "both";
  }
  return "sampled";
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (const auto it = obj.find(key); it != obj.end()) {
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw Error(std::string("config: bad value for \"") + key + "\": " + e.what());
    }
  }
}

void reject_unknown(const json& obj, std::initializer_list<const char*> known, const char* where) {
  for (const auto& [key, _] : obj.items())
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      throw Error(std::string("config: unknown field \"") + key + "\" in " + where);
}

}  // namespace

ExperimentConfig config_from_json(std::string_view text) {
  json obj;
  try {
    obj = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw Error(std::string("config: malformed JSON: ") + e.what());
  }
  if (!obj.is_object()) throw Error("config: expected a JSON object");
  reject_unknown(obj,
                 {"c_base", "c_novel", "k_shot", "j_per_instance", "lambda", "tau", "seeds",
                  "base_epochs", "finetune_epochs", "learning_rate", "pos_neg_cap", "image_size",
                  "base_instances_per_class", "test_instances_per_class", "max_objects_per_scene",
                  "appearance_dim", "appearance_noise", "feature_noise", "cue_noise", "cue_context_noise",
                  "cue_class_bias", "cue_scale", "contrastive_dim", "contrastive_batch", "rpn",
                  "contrastive_set", "ps_in_main_loss"},
                 "config");
  ExperimentConfig c;
  read(obj, "c_base", c.c_base);
  read(obj, "c_novel", c.c_novel);
  read(obj, "k_shot", c.k_shot);
  read(obj, "j_per_instance", c.j_per_instance);
  read(obj, "lambda", c.lambda);
  read(obj, "tau", c.tau);
  read(obj, "seeds", c.seeds);
  read(obj, "base_epochs", c.base_epochs);
  read(obj, "finetune_epochs", c.finetune_epochs);
  read(obj, "learning_rate", c.learning_rate);
  read(obj, "pos_neg_cap", c.pos_neg_cap);
  read(obj, "image_size", c.image_size);
  read(obj, "base_instances_per_class", c.base_instances_per_class);
  read(obj, "test_instances_per_class", c.test_instances_per_class);
  read(obj, "max_objects_per_scene", c.max_objects_per_scene);
  read(obj, "appearance_dim", c.appearance_dim);
  read(obj, "appearance_noise", c.appearance_noise);
  read(obj, "feature_noise", c.feature_noise);
  read(obj, "cue_noise", c.cue_noise);
  read(obj, "cue_context_noise", c.cue_context_noise);
  read(obj, "cue_class_bias", c.cue_class_bias);
  read(obj, "cue_scale", c.cue_scale);
  read(obj, "contrastive_dim", c.contrastive_dim);
  read(obj, "contrastive_batch", c.contrastive_batch);
  read(obj, "ps_in_main_loss", c.ps_in_main_loss);
  if (const auto it = obj.find("contrastive_set"); it != obj.end()) {
    const std::string s = it->is_string() ? it->get<std::string>() : "";
    if (s == "sampled")
      c.contrastive_set = ContrastiveSet::sampled;
    else if (s == "rpn")
      c.contrastive_set = ContrastiveSet::rpn;
    else if (s == "both")
      c.contrastive_set = ContrastiveSet::both;
    else
      throw Error("config: contrastive_set must be \"sampled\", \"rpn\" or \"both\"");
  }
  if (const auto it = obj.find("rpn"); it != obj.end()) {
    if (!it->is_object()) throw Error("config: \"rpn\" must be an object");
    reject_unknown(*it,
                   {"mu", "var", "novel_extra_bias", "miss_rate_novel", "proposals_per_object",
                    "background_per_image"},
                   "rpn");
    read(*it, "mu", c.rpn.offset_dist.mu);
    read(*it, "var", c.rpn.offset_dist.var);
    read(*it, "novel_extra_bias", c.rpn.novel_extra_bias);
    read(*it, "miss_rate_novel", c.rpn.miss_rate_novel);
    read(*it, "proposals_per_object", c.rpn.proposals_per_object);
    read(*it, "background_per_image", c.rpn.background_per_image);
  }
  c.validate();
  return c;
}

std::string config_to_json(const ExperimentConfig& c) {
  ordered_json rpn;
  rpn["mu"] = c.rpn.offset_dist.mu;
  rpn["var"] = c.rpn.offset_dist.var;
  rpn["novel_extra_bias"] = c.rpn.novel_extra_bias;
  rpn["miss_rate_novel"] = c.rpn.miss_rate_novel;
  rpn["proposals_per_object"] = c.rpn.proposals_per_object;
  rpn["background_per_image"] = c.rpn.background_per_image;

  ordered_json o;
  o["c_base"] = c.c_base;
  o["c_novel"] = c.c_novel;
  o["k_shot"] = c.k_shot;
  o["j_per_instance"] = c.j_per_instance;
  o["lambda"] = c.lambda;
  o["tau"] = c.tau;
  o["seeds"] = c.seeds;
  o["base_epochs"] = c.base_epochs;
  o["finetune_epochs"] = c.finetune_epochs;
  o["learning_rate"] = c.learning_rate;
  o["pos_neg_cap"] = c.pos_neg_cap;
  o["image_size"] = c.image_size;
  o["base_instances_per_class"] = c.base_instances_per_class;
  o["test_instances_per_class"] = c.test_instances_per_class;
  o["max_objects_per_scene"] = c.max_objects_per_scene;
  o["appearance_dim"] = c.appearance_dim;
  o["appearance_noise"] = c.appearance_noise;
  o["feature_noise"] = c.feature_noise;
  o["cue_noise"] = c.cue_noise;
  o["cue_context_noise"] = c.cue_context_noise;
  o["cue_class_bias"] = c.cue_class_bias;
  o["cue_scale"] = c.cue_scale;
  o["contrastive_dim"] = c.contrastive_dim;
  o["contrastive_batch"] = c.contrastive_batch;
  o["rpn"] = rpn;
  o["contrastive_set"] = std::string(set_name(c.contrastive_set));
  o["ps_in_main_loss"] = c.ps_in_main_loss;
  return o.dump(2);
}

std::string config_hash(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(hash_string(config_to_json(config))));
  return buf;
}

// ---------------------------------------------------------------------------
// Dataset

namespace {

std::vector<double> random_unit(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  double n2 = 0.0;
  for (double& x : v) {
    x = rng.normal();
    n2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
  return v;
}

double dot(std::span<const double> a, std::span<const double> b) {
  return simd::active().dot(a.data(), b.data(), a.size());
}

FeatureWorld make_world(const ExperimentConfig& config, Rng& rng) {
  const auto classes = static_cast<std::size_t>(config.num_classes());
  const auto d = static_cast<std::size_t>(config.appearance_dim);
  // Prototypes and the background vector are drawn and rejected until every
  // pairwise dot product is at most kMaxPrototypeDot.
  std::vector<std::vector<double>> accepted;
  for (int tries = 0; accepted.size() < classes + 1; ++tries) {
    if (tries > 100000) throw Error("dataset: could not separate class prototypes");
    auto v = random_unit(d, rng);
    if (std::all_of(accepted.begin(), accepted.end(),
                    [&](const auto& u) { return dot(u, v) <= kMaxPrototypeDot; }))
      accepted.push_back(std::move(v));
  }
  FeatureWorld w;
  w.prototypes = Matrix(classes, d);
  for (std::size_t c = 0; c < classes; ++c)
    std::copy(accepted[c].begin(), accepted[c].end(), w.prototypes.row(c).begin());
  w.background = accepted.back();
  for (std::size_t c = 0; c < classes; ++c) {
    Vec4 b;
    for (double& x : b) x = rng.uniform(-config.cue_class_bias, config.cue_class_bias);
    w.cue_bias.push_back(b);
  }
  w.feature_noise = config.feature_noise;
  w.cue_noise = config.cue_noise;
  w.cue_context_noise = config.cue_context_noise;
  w.cue_scale = config.cue_scale;
  return w;
}

// Objects inflated by this factor do not overlap.
constexpr double kObjectSpacing = 1.6;

std::optional<BBox> place_object(const SyntheticScene& scene, double size, Rng& rng) {
  for (int attempt = 0; attempt < 50; ++attempt) {
    const double w = rng.uniform(0.18, 0.36) * size;
    const double h = rng.uniform(0.18, 0.36) * size;
    const double mx = 0.5 * w + 0.3 * w;
    const double my = 0.5 * h + 0.3 * h;
    const BBox b{rng.uniform(mx, size - mx), rng.uniform(my, size - my), w, h};
    const BBox inflated{b.cx, b.cy, b.w * kObjectSpacing, b.h * kObjectSpacing};
    const bool clear = std::none_of(scene.objects.begin(), scene.objects.end(), [&](const auto& o) {
      return iou(inflated, BBox{o.box.cx, o.box.cy, o.box.w * kObjectSpacing, o.box.h * kObjectSpacing}) > 0.0;
    });
    if (clear) return b;
  }
  return std::nullopt;
}

std::vector<SyntheticScene> make_scenes(const ExperimentConfig& config, const FeatureWorld& world,
                                        std::vector<int> labels, int max_per_scene,
                                        const std::string& prefix, Rng& rng) {
  for (std::size_t i = labels.size(); i > 1; --i)
    std::swap(labels[i - 1], labels[rng.below(i)]);
  const auto d = static_cast<std::size_t>(config.appearance_dim);
  std::vector<SyntheticScene> scenes;
  std::size_t next = 0;
  while (next < labels.size()) {
    SyntheticScene scene;
    scene.image_id = prefix + "-" + std::to_string(scenes.size());
    scene.seed = rng.next();
    scene.image_w = scene.image_h = config.image_size;
    const auto want = 1 + rng.below(static_cast<std::uint64_t>(max_per_scene));
    while (scene.objects.size() < want && next < labels.size()) {
      const auto box = place_object(scene, config.image_size, rng);
      if (!box) break;
      SceneObject obj;
      obj.box = *box;
      obj.class_label = labels[next++];
      obj.appearance.resize(d);
      const auto proto = world.prototypes.row(static_cast<std::size_t>(obj.class_label));
      for (std::size_t k = 0; k < d; ++k) obj.appearance[k] = proto[k] + config.appearance_noise * rng.normal();
      scene.objects.push_back(std::move(obj));
    }
    if (scene.objects.empty()) throw Error("dataset: could not place an object");
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

}  // namespace

Dataset generate_dataset(const ExperimentConfig& config, std::uint64_t seed) {
  config.validate();
  Dataset ds;
  Rng world_rng = Rng::keyed(seed, tag::world);
  ds.world = make_world(config, world_rng);

  std::vector<int> base_labels;
  for (int c = 0; c < config.c_base; ++c)
    base_labels.insert(base_labels.end(), static_cast<std::size_t>(config.base_instances_per_class), c);
  Rng base_rng = Rng::keyed(seed, tag::base_scenes);
  ds.base = make_scenes(config, ds.world, base_labels, config.max_objects_per_scene, "base", base_rng);

  // One annotated instance per fine-tuning image: exactly K per class.
  std::vector<int> shot_labels;
  for (int c = 0; c < config.num_classes(); ++c)
    shot_labels.insert(shot_labels.end(), static_cast<std::size_t>(config.k_shot), c);
  Rng ft_rng = Rng::keyed(seed, tag::finetune_scenes);
  ds.finetune = make_scenes(config, ds.world, shot_labels, 1, "shot", ft_rng);

  std::vector<int> test_labels;
  for (int c = 0; c < config.num_classes(); ++c)
    test_labels.insert(test_labels.end(), static_cast<std::size_t>(config.test_instances_per_class), c);
  Rng test_rng = Rng::keyed(seed, tag::test_scenes);
  ds.test = make_scenes(config, ds.world, test_labels, config.max_objects_per_scene, "test", test_rng);
  return ds;
}

// ---------------------------------------------------------------------------
// Features

std::vector<double> proposal_feature(const FeatureWorld& world, const SyntheticScene& scene,
                                     const BBox& proposal, std::optional<std::size_t> object,
                                     bool with_noise) {
  const std::size_t da = world.prototypes.cols();
  std::vector<double> f(da + 4, 0.0);
  const SceneObject* obj = object ? &scene.objects.at(*object) : nullptr;
  const double q = obj ? iou(proposal, obj->box) : 0.0;

  Rng noise = Rng::keyed(scene.seed, std::bit_cast<std::uint64_t>(proposal.cx),
                         std::bit_cast<std::uint64_t>(proposal.cy),
                         std::bit_cast<std::uint64_t>(proposal.w),
                         std::bit_cast<std::uint64_t>(proposal.h), object ? *object + 1 : 0);
  for (std::size_t k = 0; k < da; ++k) {
    const double appearance = obj ? obj->appearance[k] : 0.0;
    f[k] = q * appearance + (1.0 - q) * world.background[k];
    const double n = noise.normal();
    if (with_noise) f[k] += world.feature_noise * n;
  }
  Vec4 cue{};
  if (q > 0.0) {
    const Vec4 t = encode_offset(obj->box, proposal).as_array();
    const Vec4& bias = world.cue_bias[static_cast<std::size_t>(obj->class_label)];
    for (int d = 0; d < 4; ++d) cue[d] = t[d] + q * bias[d];
  }
  const double spread = world.cue_noise + (1.0 - q) * world.cue_context_noise;
  for (int d = 0; d < 4; ++d) {
    const double n = noise.normal();
    f[da + static_cast<std::size_t>(d)] = world.cue_scale * (cue[d] + (with_noise ? spread * n : 0.0));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Head

TinyRoiHead TinyRoiHead::init(int num_classes, std::size_t feature_dim, std::size_t contrastive_dim,
                              Rng& rng) {
  TinyRoiHead h;
  h.cls_w = Matrix(static_cast<std::size_t>(num_classes) + 1, feature_dim);
  h.cls_b.assign(static_cast<std::size_t>(num_classes) + 1, 0.0);
  h.reg_w = Matrix(4, feature_dim);
  h.reg_b.assign(4, 0.0);
  h.proj = Matrix(contrastive_dim, feature_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(feature_dim));
  for (double& v : h.proj.values()) v = scale * rng.normal();
  return h;
}

namespace {

std::vector<double> affine(const Matrix& w, const std::vector<double>* bias, std::span<const double> x) {
  const auto& k = simd::active();
  std::vector<double> out = bias ? *bias : std::vector<double>(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) out[r] += k.dot(w.row(r).data(), x.data(), x.size());
  return out;
}

}  // namespace

std::vector<double> TinyRoiHead::logits(std::span<const double> f) const {
  return affine(cls_w, &cls_b, f);
}

int TinyRoiHead::predict(std::span<const double> f) const {
  const auto l = logits(f);
  return static_cast<int>(std::max_element(l.begin(), l.end()) - l.begin());
}

OffsetVec TinyRoiHead::regress(std::span<const double> f) const {
  const auto v = affine(reg_w, &reg_b, f);
  return OffsetVec{v[0], v[1], v[2], v[3]};
}

bool TinyRoiHead::finite() const noexcept {
  const auto ok = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  return ok(cls_w.values()) && ok(cls_b) && ok(reg_w.values()) && ok(reg_b) && ok(proj.values());
}

// ---------------------------------------------------------------------------
// Proposals

namespace {

RoiSample make_sample(const ExperimentConfig& config, const FeatureWorld& world,
                      std::span<const SyntheticScene> scenes, std::size_t s, const BBox& proposal,
                      std::optional<std::size_t> source) {
  const SyntheticScene& scene = scenes[s];
  RoiSample r;
  r.scene = s;
  r.proposal = proposal;
  r.source = source;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const double v = iou(proposal, scene.objects[i].box);
    if (v > r.iou) {
      r.iou = v;
      r.object = i;
    }
  }
  if (r.iou >= kPositiveIou)
    r.label = scene.objects[*r.object].class_label;
  else if (r.iou < kBackgroundIou)
    r.label = config.num_classes();
  if (r.object) r.target = encode_offset(scene.objects[*r.object].box, proposal);
  r.feature = proposal_feature(world, scene, proposal, r.object);
  return r;
}

}  // namespace

std::vector<RoiSample> rpn_samples(const ExperimentConfig& config, const FeatureWorld& world,
                                   std::span<const SyntheticScene> scenes, std::uint64_t seed,
                                   std::uint64_t purpose) {
  std::vector<RoiSample> out;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const SyntheticScene& scene = scenes[s];
    const ImageBounds bounds{scene.image_w, scene.image_h};
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
      const SceneObject& obj = scene.objects[i];
      Rng rng = Rng::keyed(seed, purpose, hash_string(scene.image_id), i);
      const bool novel = config.is_novel(obj.class_label);
      if (novel && rng.uniform() < config.rpn.miss_rate_novel) continue;
      DiagonalGaussian4 dist = config.rpn.offset_dist;
      if (novel)
        for (int d = 0; d < 4; ++d) dist.mu[d] += config.rpn.novel_extra_bias[d];
      SamplerConfig sc;
      sc.model = dist;
      sc.j_per_instance = config.rpn.proposals_per_object;
      const auto props = sample_proposals_for_gt(obj.box, obj.class_label, i, scene.image_id, sc, bounds, rng);
      for (const auto& p : props) out.push_back(make_sample(config, world, scenes, s, p.box, i));
    }

    Rng bg = Rng::keyed(seed, purpose, hash_string(scene.image_id), tag::background);
    for (int b = 0; b < config.rpn.background_per_image; ++b) {
      for (int attempt = 0; attempt < 50; ++attempt) {
        const double w = bg.uniform(0.15, 0.4) * scene.image_w;
        const double h = bg.uniform(0.15, 0.4) * scene.image_h;
        const BBox box{bg.uniform(0.5 * w, scene.image_w - 0.5 * w),
                       bg.uniform(0.5 * h, scene.image_h - 0.5 * h), w, h};
        const bool clear = std::all_of(scene.objects.begin(), scene.objects.end(),
                                       [&](const auto& o) { return iou(box, o.box) < kBackgroundIou; });
        if (clear) {
          out.push_back(make_sample(config, world, scenes, s, box, std::nullopt));
          break;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct HeadGrad {
  Matrix cls_w;
  std::vector<double> cls_b;
  Matrix reg_w;
  std::vector<double> reg_b;
  Matrix proj;

  explicit HeadGrad(const TinyRoiHead& h)
      : cls_w(h.cls_w.rows(), h.cls_w.cols()),
        cls_b(h.cls_b.size(), 0.0),
        reg_w(4, h.reg_w.cols()),
        reg_b(4, 0.0),
        proj(h.proj.rows(), h.proj.cols()) {}
};

void step(TinyRoiHead& h, const HeadGrad& g, double lr) {
  const auto& k = simd::active();
  k.axpy(-lr, g.cls_w.data(), h.cls_w.data(), g.cls_w.values().size());
  k.axpy(-lr, g.cls_b.data(), h.cls_b.data(), g.cls_b.size());
  k.axpy(-lr, g.reg_w.data(), h.reg_w.data(), g.reg_w.values().size());
  k.axpy(-lr, g.reg_b.data(), h.reg_b.data(), g.reg_b.size());
  k.axpy(-lr, g.proj.data(), h.proj.data(), g.proj.values().size());
}

// grad_w += scale * g_out x^T
void backprop_linear(std::span<const double> g_out, double scale, std::span<const double> x,
                     Matrix& grad_w) {
  const auto& k = simd::active();
  for (std::size_t r = 0; r < grad_w.rows(); ++r)
    if (g_out[r] != 0.0) k.axpy(scale * g_out[r], x.data(), grad_w.row(r).data(), x.size());
}

struct DetectionLoss {
  double cls = 0.0;
  double reg = 0.0;
};

// Mean cross-entropy over labelled samples plus mean smooth-L1 over samples
// of a real class; gradients scaled by `weight` are added to g.
DetectionLoss detection_loss(const TinyRoiHead& head, std::span<const RoiSample* const> samples,
                             int classes, double weight, HeadGrad& g) {
  std::size_t n_cls = 0;
  std::size_t n_reg = 0;
  for (const RoiSample* s : samples) {
    if (s->label >= 0) ++n_cls;
    if (s->label >= 0 && s->label < classes) ++n_reg;
  }
  DetectionLoss loss;
  if (n_cls == 0) return loss;
  const double cls_scale = weight / static_cast<double>(n_cls);
  const double reg_scale = n_reg ? weight / static_cast<double>(n_reg) : 0.0;
  for (const RoiSample* s : samples) {
    if (s->label < 0) continue;
    const auto& h = s->feature;
    const auto logits = affine(head.cls_w, &head.cls_b, h);
    loss.cls += cross_entropy_cls(logits, s->label);
    const auto gl = cross_entropy_grad(logits, s->label);
    backprop_linear(gl, cls_scale, h, g.cls_w);
    for (std::size_t r = 0; r < gl.size(); ++r) g.cls_b[r] += cls_scale * gl[r];
    if (s->label < classes) {
      const auto v = affine(head.reg_w, &head.reg_b, h);
      const OffsetVec pred{v[0], v[1], v[2], v[3]};
      loss.reg += smooth_l1_reg(pred, s->target);
      const Vec4 gr = smooth_l1_grad(pred, s->target);
      backprop_linear(gr, reg_scale, h, g.reg_w);
      for (std::size_t r = 0; r < 4; ++r) g.reg_b[r] += reg_scale * gr[r];
    }
  }
  loss.cls /= static_cast<double>(n_cls);
  if (n_reg) loss.reg /= static_cast<double>(n_reg);
  return loss;
}

// SupCon over normalized projections z = P f / |P f|; the gradient flows
// through the normalization into the projection.
double contrastive_loss(const TinyRoiHead& head, std::span<const RoiSample* const> samples, double tau,
                        double weight, HeadGrad& g) {
  if (samples.empty()) return 0.0;
  const auto& k = simd::active();
  const std::size_t n = samples.size();
  const std::size_t dz = head.proj.rows();
  Matrix z(n, dz);
  std::vector<double> norms(n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto u = affine(head.proj, nullptr, samples[i]->feature);
    norms[i] = std::sqrt(k.dot(u.data(), u.data(), dz));
    if (!(norms[i] > 0.0)) throw Error("contrastive projection collapsed to zero");
    auto zi = z.row(i);
    for (std::size_t r = 0; r < dz; ++r) zi[r] = u[r] / norms[i];
    labels[i] = samples[i]->label;
  }
  const SupConResult res = supcon_loss_and_grad(z, labels, tau);
  std::vector<double> du(dz);
  for (std::size_t i = 0; i < n; ++i) {
    const auto zi = z.row(i);
    const auto gi = res.grad.row(i);
    const double radial = k.dot(zi.data(), gi.data(), dz);
    for (std::size_t r = 0; r < dz; ++r) du[r] = (gi[r] - zi[r] * radial) / norms[i];
    backprop_linear(du, weight, samples[i]->feature, g.proj);
  }
  return res.loss;
}

// Keeps `keep` of `n` indices chosen uniformly, in ascending order.
std::vector<std::size_t> subsample(std::size_t n, std::size_t keep, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  keep = std::min(keep, n);
  for (std::size_t i = 0; i < keep; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<const RoiSample*> pointers(const std::vector<RoiSample>& v) {
  std::vector<const RoiSample*> out;
  out.reserve(v.size());
  for (const auto& s : v) out.push_back(&s);
  return out;
}

void check_finite(double loss, const char* phase, int epoch) {
  if (!std::isfinite(loss))
    throw Error(std::string(phase) + " diverged at epoch " + std::to_string(epoch) + " (non-finite loss)");
}

}  // namespace

BaseTrainResult base_train(TinyRoiHead head, const ExperimentConfig& config,
                           const FeatureWorld& world, std::span<const SyntheticScene> base_scenes,
                           int epochs, std::uint64_t seed) {
  const auto samples = rpn_samples(config, world, base_scenes, seed, tag::rpn_base);
  BaseTrainResult out;
  OffsetAccumulator acc;
  for (const auto& s : samples) {
    if (!s.source) continue;
    const OffsetVec off = encode_offset(s.proposal, base_scenes[s.scene].objects[*s.source].box);
    out.base_offsets.push_back(off);
    acc.add(off);
  }
  out.base_stats = finalize_gaussian(acc);

  const auto ptrs = pointers(samples);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    HeadGrad g(head);
    const auto loss = detection_loss(head, ptrs, config.num_classes(), 1.0, g);
    check_finite(loss.cls + loss.reg, "base training", epoch);
    step(head, g, config.learning_rate);
  }
  if (!head.finite()) throw Error("base training produced non-finite parameters");
  out.head = std::move(head);
  return out;
}

TinyRoiHead finetune(TinyRoiHead head, const ExperimentConfig& config, const FeatureWorld& world,
                     std::span<const SyntheticScene> scenes, const DiagonalGaussian4& base_stats,
                     bool pdc_enabled, std::uint64_t seed) {
  const int classes = config.num_classes();
  const auto rpn = rpn_samples(config, world, scenes, seed, tag::rpn_finetune);

  std::vector<RoiSample> sampled;
  if (pdc_enabled && config.j_per_instance > 0) {
    SamplerConfig sc;
    sc.model = base_stats;
    sc.j_per_instance = config.j_per_instance;
    sc.seed = Rng::keyed(seed, tag::sampled).next();
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      const SyntheticScene& scene = scenes[s];
      std::vector<GroundTruth> gts;
      for (const auto& o : scene.objects) gts.push_back({o.box, o.class_label});
      const auto set = build_calibrated_set(scene.image_id, gts, {}, sc,
                                            ImageBounds{scene.image_w, scene.image_h});
      for (const auto& p : set.sampled) {
        RoiSample r;
        r.scene = s;
        r.proposal = p.box;
        r.object = r.source = p.source_gt;
        r.iou = iou(p.box, scene.objects[p.source_gt].box);
        r.target = encode_offset(scene.objects[p.source_gt].box, p.box);
        r.label = p.class_label;
        r.feature = proposal_feature(world, scene, p.box, p.source_gt);
        sampled.push_back(std::move(r));
      }
    }
    // Positive:negative cap against the background proposals of P_R.
    const auto negatives = static_cast<std::size_t>(
        std::count_if(rpn.begin(), rpn.end(), [&](const auto& r) { return r.label == classes; }));
    const auto limit = static_cast<std::size_t>(std::floor(config.pos_neg_cap * static_cast<double>(negatives)));
    if (sampled.size() > limit) {
      Rng cap_rng = Rng::keyed(seed, tag::cap);
      std::vector<RoiSample> kept;
      for (std::size_t i : subsample(sampled.size(), limit, cap_rng)) kept.push_back(std::move(sampled[i]));
      sampled = std::move(kept);
    }
  }

  std::vector<const RoiSample*> main = pointers(rpn);
  const std::vector<const RoiSample*> ps = pointers(sampled);
  if (config.ps_in_main_loss) main.insert(main.end(), ps.begin(), ps.end());

  std::vector<const RoiSample*> con_pool;
  if (config.contrastive_set != ContrastiveSet::rpn) con_pool = ps;
  if (config.contrastive_set != ContrastiveSet::sampled)
    for (const RoiSample* r : pointers(rpn))
      if (r->label >= 0 && r->label < classes) con_pool.push_back(r);

  const bool re_roi = pdc_enabled && !ps.empty();
  for (int epoch = 0; epoch < config.finetune_epochs; ++epoch) {
    HeadGrad g(head);
    const auto base = detection_loss(head, main, classes, 1.0, g);
    double total = base.cls + base.reg;
    if (re_roi) {
      const auto re = detection_loss(head, ps, classes, config.lambda, g);
      double con = 0.0;
      if (!con_pool.empty()) {
        Rng rng = Rng::keyed(seed, tag::contrastive, static_cast<std::uint64_t>(epoch));
        std::vector<const RoiSample*> batch;
        for (std::size_t i : subsample(con_pool.size(), static_cast<std::size_t>(config.contrastive_batch), rng))
          batch.push_back(con_pool[i]);
        con = contrastive_loss(head, batch, config.tau, config.lambda, g);
      }
      total = assemble_pdc_loss(total, con, re.cls, re.reg, config.lambda).grand_total;
    }
    check_finite(total, "fine-tuning", epoch);
    step(head, g, config.learning_rate);
  }
  if (!head.finite()) throw Error("fine-tuning produced non-finite parameters");
  return head;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalMetrics evaluate(const TinyRoiHead& head, const ExperimentConfig& config,
                     const FeatureWorld& world, std::span<const SyntheticScene> test_scenes,
                     std::span<const OffsetVec> base_reference, std::uint64_t seed, EvalOptions options) {
  const int classes = config.num_classes();
  const auto samples = rpn_samples(config, world, test_scenes, seed, tag::rpn_test);

  // Flattened ground-truth index per (scene, object).
  std::vector<GroundTruth> gts;
  std::vector<std::size_t> first_gt(test_scenes.size());
  for (std::size_t s = 0; s < test_scenes.size(); ++s) {
    first_gt[s] = gts.size();
    for (const auto& o : test_scenes[s].objects) gts.push_back({o.box, o.class_label});
  }

  std::vector<PredictedBox> novel_preds;
  std::vector<BBox> novel_boxes;
  std::vector<std::size_t> novel_match;
  std::vector<OffsetVec> novel_offsets;
  std::vector<OffsetVec> base_offsets;
  double raw_iou = 0.0;
  double reg_iou = 0.0;
  std::size_t novel_correct = 0;
  std::size_t base_n = 0;
  std::size_t base_correct = 0;

  for (const auto& s : samples) {
    if (s.label < 0 || s.label >= classes) continue;
    OffsetVec off = options.oracle_regression ? s.target : head.regress(s.feature);
    off.dw = std::max(off.dw, kMinDecodedScale);
    off.dh = std::max(off.dh, kMinDecodedScale);
    if (!off.valid()) off = OffsetVec{};
    const BBox refined = apply_offset(s.proposal, off);
    const SceneObject& obj = test_scenes[s.scene].objects[*s.object];
    const int predicted = head.predict(s.feature);
    const OffsetVec residual = encode_offset(refined, obj.box);
    if (config.is_novel(s.label)) {
      raw_iou += s.iou;
      reg_iou += iou(refined, obj.box);
      if (predicted == s.label) ++novel_correct;
      novel_preds.push_back({refined, predicted});
      novel_boxes.push_back(refined);
      novel_match.push_back(first_gt[s.scene] + *s.object);
      novel_offsets.push_back(residual);
    } else {
      ++base_n;
      if (predicted == s.label) ++base_correct;
      base_offsets.push_back(residual);
    }
  }

  EvalMetrics m;
  const auto edges = uniform_edges(0.0, 1.0, 10);
  std::vector<BBox> gt_boxes;
  for (const auto& g : gts) gt_boxes.push_back(g.box);
  m.iou_hist = iou_histogram(novel_boxes, gt_boxes, novel_match, edges);
  m.precision = precision_by_iou(novel_preds, gts, novel_match, edges);
  m.novel_boxes = novel_preds.size();
  m.base_residuals = std::move(base_offsets);
  m.base_accuracy = base_n ? static_cast<double>(base_correct) / static_cast<double>(base_n) : 0.0;
  if (!novel_preds.empty()) {
    const double n = static_cast<double>(novel_preds.size());
    m.raw_iou_novel = raw_iou / n;
    m.mean_iou_novel = reg_iou / n;
    m.novel_accuracy = static_cast<double>(novel_correct) / n;
    const Matrix novel = offsets_matrix(novel_offsets);
    if (!base_reference.empty()) {
      const Matrix reference = offsets_matrix(base_reference);
      m.mmd_novel_vs_base_stats = mmd_rbf(novel, reference);
      m.mmd_linear_novel_vs_base_stats = mmd_linear(novel, reference);
    }
    if (!m.base_residuals.empty())
      m.mmd_novel_vs_base_regressed = mmd_rbf(novel, offsets_matrix(m.base_residuals));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Experiment

namespace {

const std::array<std::vector<double>, 4>& report_edges() {
  static const std::array<std::vector<double>, 4> e{
      uniform_edges(-0.6, 0.6, 24), uniform_edges(-0.6, 0.6, 24), uniform_edges(-0.6, 0.6, 24),
      uniform_edges(-0.6, 0.6, 24)};
  return e;
}

}  // namespace

int ExperimentReport::iou_wins() const noexcept {
  return static_cast<int>(std::count_if(seeds.begin(), seeds.end(), [](const auto& s) {
    return s.pdc.mean_iou_novel > s.baseline.mean_iou_novel;
  }));
}

int ExperimentReport::accuracy_wins() const noexcept {
  return static_cast<int>(std::count_if(seeds.begin(), seeds.end(), [](const auto& s) {
    return s.pdc.novel_accuracy > s.baseline.novel_accuracy;
  }));
}

int ExperimentReport::mmd_wins() const noexcept {
  return static_cast<int>(std::count_if(seeds.begin(), seeds.end(), [](const auto& s) {
    return s.pdc.mmd_novel_vs_base_stats < s.baseline.mmd_novel_vs_base_stats;
  }));
}

SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed) {
  const Dataset ds = generate_dataset(config, seed);
  Rng head_rng = Rng::keyed(seed, tag::head);
  TinyRoiHead head = TinyRoiHead::init(config.num_classes(), ds.world.feature_dim(),
                                       static_cast<std::size_t>(config.contrastive_dim), head_rng);
  const BaseTrainResult base = base_train(std::move(head), config, ds.world, ds.base, config.base_epochs, seed);

  SeedResult r;
  r.seed = seed;
  r.base_stats = base.base_stats;
  r.base_offsets = offset_report(base.base_offsets, report_edges());
  std::vector<OffsetVec> novel;
  for (const auto& s : rpn_samples(config, ds.world, ds.finetune, seed, tag::rpn_finetune)) {
    if (!s.source) continue;
    const SceneObject& obj = ds.finetune[s.scene].objects[*s.source];
    if (config.is_novel(obj.class_label)) novel.push_back(encode_offset(s.proposal, obj.box));
  }
  if (!novel.empty()) r.novel_offsets = offset_report(novel, report_edges());
  const EvalMetrics after_base = evaluate(base.head, config, ds.world, ds.test, {}, seed);
  r.base_accuracy_after_base_training = after_base.base_accuracy;

  const TinyRoiHead baseline = finetune(base.head, config, ds.world, ds.finetune, base.base_stats, false, seed);
  const TinyRoiHead pdc = finetune(base.head, config, ds.world, ds.finetune, base.base_stats, true, seed);
  r.baseline = evaluate(baseline, config, ds.world, ds.test, after_base.base_residuals, seed);
  r.pdc = evaluate(pdc, config, ds.world, ds.test, after_base.base_residuals, seed);
  return r;
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  ExperimentReport report;
  report.config = config;
  const std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  // Seeds are independent jobs; results are collected in seed order.
  for (std::size_t begin = 0; begin < config.seeds.size(); begin += workers) {
    std::vector<std::future<SeedResult>> jobs;
    for (std::size_t i = begin; i < std::min(config.seeds.size(), begin + workers); ++i)
      jobs.push_back(std::async(std::launch::async, run_seed, std::cref(config), config.seeds[i]));
    for (auto& j : jobs) report.seeds.push_back(j.get());
  }
  return report;
}

namespace {

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  os << content;
}

template <typename F>
void emit(const std::filesystem::path& p, F&& body) {
  std::ostringstream os;
  body(os);
  write_file(p, os.str());
}

double mean_of(const std::vector<SeedResult>& seeds, double EvalMetrics::*field, bool pdc) {
  double s = 0.0;
  for (const auto& r : seeds) s += (pdc ? r.pdc : r.baseline).*field;
  return seeds.empty() ? 0.0 : s / static_cast<double>(seeds.size());
}

}  // namespace

void write_report(const ExperimentReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file(dir / "config.json", config_to_json(report.config) + "\n");

  emit(dir / "pairs.csv", [&](std::ostream& os) {
    os << "seed,baseline_iou,pdc_iou,baseline_accuracy,pdc_accuracy,baseline_mmd,pdc_mmd,baseline_mmd_regressed,pdc_mmd_regressed,baseline_mmd_linear,pdc_mmd_linear,raw_iou,novel_boxes,base_accuracy_after_base_training\n";
    for (const auto& r : report.seeds)
      os << r.seed << ',' << format_shortest(r.baseline.mean_iou_novel) << ','
         << format_shortest(r.pdc.mean_iou_novel) << ',' << format_shortest(r.baseline.novel_accuracy)
         << ',' << format_shortest(r.pdc.novel_accuracy) << ','
         << format_shortest(r.baseline.mmd_novel_vs_base_stats) << ','
         << format_shortest(r.pdc.mmd_novel_vs_base_stats) << ','
         << format_shortest(r.baseline.mmd_novel_vs_base_regressed) << ','
         << format_shortest(r.pdc.mmd_novel_vs_base_regressed) << ','
         << format_shortest(r.baseline.mmd_linear_novel_vs_base_stats) << ','
         << format_shortest(r.pdc.mmd_linear_novel_vs_base_stats) << ',' << format_shortest(r.pdc.raw_iou_novel)
         << ',' << r.pdc.novel_boxes << ',' << format_shortest(r.base_accuracy_after_base_training) << '\n';
  });

  emit(dir / "summary.csv", [&](std::ostream& os) {
    const auto n = report.seeds.size();
    os << "metric,baseline_mean,pdc_mean,pdc_wins,seeds\n";
    os << "mean_iou_novel," << format_shortest(mean_of(report.seeds, &EvalMetrics::mean_iou_novel, false))
       << ',' << format_shortest(mean_of(report.seeds, &EvalMetrics::mean_iou_novel, true)) << ','
       << report.iou_wins() << ',' << n << '\n';
    os << "novel_accuracy," << format_shortest(mean_of(report.seeds, &EvalMetrics::novel_accuracy, false))
       << ',' << format_shortest(mean_of(report.seeds, &EvalMetrics::novel_accuracy, true)) << ','
       << report.accuracy_wins() << ',' << n << '\n';
    os << "mmd_novel_vs_base_stats,"
       << format_shortest(mean_of(report.seeds, &EvalMetrics::mmd_novel_vs_base_stats, false)) << ','
       << format_shortest(mean_of(report.seeds, &EvalMetrics::mmd_novel_vs_base_stats, true)) << ','
       << report.mmd_wins() << ',' << n << '\n';
  });

  if (report.seeds.empty()) return;
  const SeedResult& first = report.seeds.front();
  static constexpr const char* dims[] = {"dx", "dy", "dw", "dh"};
  for (int d = 0; d < 4; ++d) {
    const std::string stem = std::string("offsets_") + dims[d];
    emit(dir / (stem + "_base.csv"), [&](std::ostream& os) { write_histogram_csv(os, first.base_offsets.histograms[d]); });
    emit(dir / (stem + "_base.svg"), [&](std::ostream& os) {
      write_histogram_svg(os, first.base_offsets.histograms[d], std::string("base proposal offsets ") + dims[d]);
    });
    emit(dir / (stem + "_novel.csv"), [&](std::ostream& os) { write_histogram_csv(os, first.novel_offsets.histograms[d]); });
    emit(dir / (stem + "_novel.svg"), [&](std::ostream& os) {
      write_histogram_svg(os, first.novel_offsets.histograms[d], std::string("novel proposal offsets ") + dims[d]);
    });
  }
  for (const auto& [arm, m] : {std::pair<const char*, const EvalMetrics*>{"baseline", &first.baseline},
                               {"pdc", &first.pdc}}) {
    const std::string a = arm;
    emit(dir / ("iou_hist_" + a + ".csv"), [&](std::ostream& os) { write_histogram_csv(os, m->iou_hist); });
    emit(dir / ("iou_hist_" + a + ".svg"), [&](std::ostream& os) {
      write_histogram_svg(os, m->iou_hist, "novel regressed-box IoU (" + a + ")");
    });
    emit(dir / ("precision_" + a + ".csv"), [&](std::ostream& os) { write_precision_csv(os, m->precision); });
    emit(dir / ("precision_" + a + ".svg"), [&](std::ostream& os) {
      write_precision_svg(os, m->precision, "novel precision by IoU (" + a + ")");
    });
  }
}

}  // namespace pdc::sim
