#include "kpal/harness.hpp"

#include <algorithm>
#include <numeric>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace kpal::harness {

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::baseline: return "baseline";
    case Mode::tta: return "tta";
    case Mode::ttg: return "ttg";
    case Mode::ttg_tta: return "ttg_tta";
  }
  throw ValueError("mode_name: bad enum value");
}

Mode mode_from_name(const std::string& s) {
  if (s == "baseline") return Mode::baseline;
  if (s == "tta") return Mode::tta;
  if (s == "ttg") return Mode::ttg;
  if (s == "ttg_tta") return Mode::ttg_tta;
  throw ConfigError("unknown mode: " + s);
}

void ExperimentSpec::validate() const {
  if (seeds.empty()) throw ConfigError("spec: at least one seed required");
  if (source_train_scenes <= 0 || source_val_scenes <= 0 ||
      target_val_scenes <= 0)
    throw ConfigError("spec: scene counts must be positive");
  if (workers < 1) throw ConfigError("spec: workers must be >= 1");
  if (out_dir.empty()) throw ConfigError("spec: out_dir must be set");
  try {
    tta.validate();
    train.validate();
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  if (source_cfg.domain_tag != "source")
    throw ConfigError("spec: source_cfg must carry the source tag");
  if (target_cfg.domain_tag != "target")
    throw ConfigError("spec: target_cfg must carry the target tag");
}

ExperimentSpec default_spec() {
  ExperimentSpec s;
  s.source_cfg = synth::source_preset();
  s.target_cfg = synth::target_preset();
  // slimmed widths and 48x48 scenes keep the full variant-x-mode matrix
  // inside a single-core time budget; the structural layout (K=17, four
  // variants) is unchanged
  s.source_cfg.height = s.source_cfg.width = 48;
  s.target_cfg.height = s.target_cfg.width = 48;
  s.source_train_scenes = 50;
  s.train.epochs = 60;
  s.train.learning_rate = 0.05;
  s.train.mask_loss_weight = 5.0;
  s.train.keypoint_loss_weight = 2.0;
  s.model_cfg.roi_channels = 64;
  s.model_cfg.backbone_widths = {8, 16, 32, 64};
  s.model_cfg.kp_tower_width = 16;
  s.model_cfg.kp_fe_channels = 32;
  s.model_cfg.mask_width = 16;
  s.model_cfg.decoder_layers = 2;
  s.model_cfg.decoder_heads = 8;
  s.model_cfg.decoder_width = 64;
  s.model_cfg.decoder_ffn = 128;
  s.grids["tta_learning_rate"] = {0.5e-3, 1e-3, 2e-3, 4e-3};
  s.grids["min_person_score"] = {0.5, 0.6, 0.7, 0.8};
  s.grids["min_keypoint_prob"] = {0.05, 0.1, 0.2, 0.4};
  s.grids["adapt_scope"] = {0, 1};  // 0 full backbone, 1 last stage
  return s;
}

namespace {

json gen_cfg_to_json(const synth::GenConfig& c) {
  return json{{"height", c.height},
              {"width", c.width},
              {"min_instances", c.min_instances},
              {"max_instances", c.max_instances},
              {"occlusion", c.occlusion},
              {"keypoints", c.keypoints},
              {"box_jitter", c.box_jitter},
              {"distractor_rate", c.distractor_rate},
              {"score_noise", c.score_noise},
              {"limb_width_min", c.limb_width_min},
              {"limb_width_max", c.limb_width_max},
              {"color_jitter", c.color_jitter},
              {"background_texture", c.background_texture},
              {"figure_scale_min", c.figure_scale_min},
              {"figure_scale_max", c.figure_scale_max},
              {"domain_tag", c.domain_tag}};
}

void gen_cfg_from_json(const json& j, synth::GenConfig& c) {
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.min_instances = j.value("min_instances", c.min_instances);
  c.max_instances = j.value("max_instances", c.max_instances);
  c.occlusion = j.value("occlusion", c.occlusion);
  c.keypoints = j.value("keypoints", c.keypoints);
  c.box_jitter = j.value("box_jitter", c.box_jitter);
  c.distractor_rate = j.value("distractor_rate", c.distractor_rate);
  c.score_noise = j.value("score_noise", c.score_noise);
  c.limb_width_min = j.value("limb_width_min", c.limb_width_min);
  c.limb_width_max = j.value("limb_width_max", c.limb_width_max);
  c.color_jitter = j.value("color_jitter", c.color_jitter);
  c.background_texture = j.value("background_texture", c.background_texture);
  c.figure_scale_min = j.value("figure_scale_min", c.figure_scale_min);
  c.figure_scale_max = j.value("figure_scale_max", c.figure_scale_max);
  c.domain_tag = j.value("domain_tag", c.domain_tag);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

std::string spec_to_json_text(const ExperimentSpec& s) {
  json j;
  j["mode"] = mode_name(s.mode);
  j["variant"] = model::variant_name(s.variant);
  j["seeds"] = s.seeds;
  j["tta"] = {{"rounds", s.tta.rounds},
              {"learning_rate", s.tta.learning_rate},
              {"min_person_score", s.tta.min_person_score},
              {"min_keypoint_prob", s.tta.min_keypoint_prob},
              {"adapt_scope", s.tta.scope == adapt::AdaptScope::full_backbone
                                  ? "full_backbone"
                                  : "last_stage"},
              {"visibility_loss_weight", s.tta.visibility_loss_weight}};
  j["train"] = {{"epochs", s.train.epochs},
                {"batch_scenes", s.train.batch_scenes},
                {"learning_rate", s.train.learning_rate},
                {"mask_loss_weight", s.train.mask_loss_weight},
                {"keypoint_loss_weight", s.train.keypoint_loss_weight},
                {"roi_jitter", s.train.roi_jitter}};
  j["model"] = {{"keypoints", s.model_cfg.keypoints},
                {"roi_channels", s.model_cfg.roi_channels},
                {"backbone_widths", s.model_cfg.backbone_widths},
                {"kp_tower_width", s.model_cfg.kp_tower_width},
                {"kp_fe_channels", s.model_cfg.kp_fe_channels},
                {"mask_width", s.model_cfg.mask_width},
                {"decoder_layers", s.model_cfg.decoder_layers},
                {"decoder_heads", s.model_cfg.decoder_heads},
                {"decoder_width", s.model_cfg.decoder_width},
                {"decoder_ffn", s.model_cfg.decoder_ffn},
                {"v3_value_channels", s.model_cfg.v3_value_channels}};
  j["source"] = gen_cfg_to_json(s.source_cfg);
  j["target"] = gen_cfg_to_json(s.target_cfg);
  j["source_train_scenes"] = s.source_train_scenes;
  j["source_val_scenes"] = s.source_val_scenes;
  j["target_val_scenes"] = s.target_val_scenes;
  j["grids"] = s.grids;
  j["out_dir"] = s.out_dir;
  j["workers"] = s.workers;
  return j.dump(2) + "\n";
}

ExperimentSpec spec_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("spec parse: ") + e.what());
  }
  static const std::set<std::string> known{
      "mode",   "variant",  "seeds",  "tta",
      "train",  "model",    "source", "target",
      "grids",  "out_dir",  "workers", "source_train_scenes",
      "source_val_scenes", "target_val_scenes"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("spec: unknown key '" + it.key() + "'");

  ExperimentSpec s = default_spec();
  try {
    if (j.contains("mode")) s.mode = mode_from_name(j["mode"]);
    if (j.contains("variant"))
      s.variant = model::variant_from_name(j["variant"]);
    if (j.contains("seeds"))
      s.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("tta")) {
      const auto& t = j["tta"];
      s.tta.rounds = t.value("rounds", s.tta.rounds);
      s.tta.learning_rate = t.value("learning_rate", s.tta.learning_rate);
      s.tta.min_person_score =
          t.value("min_person_score", s.tta.min_person_score);
      s.tta.min_keypoint_prob =
          t.value("min_keypoint_prob", s.tta.min_keypoint_prob);
      s.tta.visibility_loss_weight =
          t.value("visibility_loss_weight", s.tta.visibility_loss_weight);
      if (t.contains("adapt_scope")) {
        const std::string sc = t["adapt_scope"];
        if (sc == "full_backbone")
          s.tta.scope = adapt::AdaptScope::full_backbone;
        else if (sc == "last_stage")
          s.tta.scope = adapt::AdaptScope::last_stage;
        else
          throw ConfigError("spec: unknown adapt_scope '" + sc + "'");
      }
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      s.train.epochs = t.value("epochs", s.train.epochs);
      s.train.batch_scenes = t.value("batch_scenes", s.train.batch_scenes);
      s.train.learning_rate = t.value("learning_rate", s.train.learning_rate);
      s.train.mask_loss_weight =
          t.value("mask_loss_weight", s.train.mask_loss_weight);
      s.train.keypoint_loss_weight =
          t.value("keypoint_loss_weight", s.train.keypoint_loss_weight);
      s.train.roi_jitter = t.value("roi_jitter", s.train.roi_jitter);
    }
    if (j.contains("model")) {
      const auto& t = j["model"];
      auto& c = s.model_cfg;
      c.keypoints = t.value("keypoints", c.keypoints);
      c.roi_channels = t.value("roi_channels", c.roi_channels);
      if (t.contains("backbone_widths"))
        c.backbone_widths = t["backbone_widths"].get<std::array<int, 4>>();
      c.kp_tower_width = t.value("kp_tower_width", c.kp_tower_width);
      c.kp_fe_channels = t.value("kp_fe_channels", c.kp_fe_channels);
      c.mask_width = t.value("mask_width", c.mask_width);
      c.decoder_layers = t.value("decoder_layers", c.decoder_layers);
      c.decoder_heads = t.value("decoder_heads", c.decoder_heads);
      c.decoder_width = t.value("decoder_width", c.decoder_width);
      c.decoder_ffn = t.value("decoder_ffn", c.decoder_ffn);
      c.v3_value_channels = t.value("v3_value_channels", c.v3_value_channels);
    }
    if (j.contains("source")) gen_cfg_from_json(j["source"], s.source_cfg);
    if (j.contains("target")) gen_cfg_from_json(j["target"], s.target_cfg);
    s.source_train_scenes =
        j.value("source_train_scenes", s.source_train_scenes);
    s.source_val_scenes = j.value("source_val_scenes", s.source_val_scenes);
    s.target_val_scenes = j.value("target_val_scenes", s.target_val_scenes);
    if (j.contains("grids"))
      s.grids =
          j["grids"].get<std::map<std::string, std::vector<double>>>();
    s.out_dir = j.value("out_dir", s.out_dir);
    s.workers = j.value("workers", s.workers);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("spec field: ") + e.what());
  }
  s.validate();
  return s;
}

ExperimentSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open spec file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return spec_from_json_text(ss.str());
}

void write_text_file(const std::string& path, const std::string& content) {
  const auto dir = fs::path(path).parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValueError("cannot write " + path);
  out << content;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::uint64_t> split_scene_seeds(std::uint64_t seed,
                                             const std::string& split,
                                             int count) {
  std::uint64_t tag = 1469598103934665603ull;  // FNV-1a over the split name
  for (char c : split) {
    tag ^= static_cast<unsigned char>(c);
    tag *= 1099511628211ull;
  }
  Rng rng(seed ^ tag);
  std::vector<std::uint64_t> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(rng.next_u64());
  return out;
}

namespace {

struct SceneInference {
  Tensor<float> mask_logits;  // [N,1,28,28]
  Tensor<float> heatmaps;     // [N,Ck,56,56]
};

// One untaped forward giving masks and keypoints for the same proposals.
SceneInference infer_scene(model::ModelBundle<float>& m,
                           const synth::Scene& scene) {
  auto image = adapt::scene_image<float>(scene);
  auto stages = model::backbone_forward<float>(nullptr, m, image);
  auto roi = model::roi_extract<float>(nullptr, stages.back(),
                                       scene.proposals, scene.height,
                                       scene.width);
  auto kp = model::keypoint_forward<float>(nullptr, m, roi);
  SceneInference out{
      m.ttg_enabled ? model::mask_forward<float>(nullptr, m, roi, &kp.fe)
                    : model::mask_forward<float>(nullptr, m, roi),
      kp.heatmaps};
  return out;
}

// Bilinear upsample of the 28x28 logit grid into the proposal box, thresholded
// at logit 0 (probability 0.5).
std::vector<std::uint8_t> paste_mask(const float* logits,
                                     const std::array<double, 4>& box, int h,
                                     int w) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w, 0);
  const double bw = std::max(box[2] - box[0], 1e-9);
  const double bh = std::max(box[3] - box[1], 1e-9);
  const int y0 = std::max(0, static_cast<int>(std::ceil(box[1])));
  const int y1 = std::min(h - 1, static_cast<int>(std::floor(box[3])));
  const int x0 = std::max(0, static_cast<int>(std::ceil(box[0])));
  const int x1 = std::min(w - 1, static_cast<int>(std::floor(box[2])));
  for (int y = y0; y <= y1; ++y) {
    const double v = (y - box[1]) / bh * 27.0;
    const int vi = std::min(26, static_cast<int>(v));
    const double fv = v - vi;
    for (int x = x0; x <= x1; ++x) {
      const double u = (x - box[0]) / bw * 27.0;
      const int ui = std::min(26, static_cast<int>(u));
      const double fu = u - ui;
      const double l =
          (1 - fv) * ((1 - fu) * logits[vi * 28 + ui] +
                      fu * logits[vi * 28 + ui + 1]) +
          fv * ((1 - fu) * logits[(vi + 1) * 28 + ui] +
                fu * logits[(vi + 1) * 28 + ui + 1]);
      if (l > 0)
        out[static_cast<std::size_t>(y) * static_cast<std::size_t>(w) +
            static_cast<std::size_t>(x)] = 1;
    }
  }
  return out;
}

struct SplitAccum {
  std::vector<double> ious;  // one per matched GT; summed sorted in finish()
  std::size_t n_gt = 0;
  int fp = 0;
  std::array<int, 10> tp{};
  std::size_t key_total = 0, key_hits = 0;

  metrics::SeedMetrics finish() const {
    metrics::SeedMetrics m;
    auto sorted = ious;
    std::sort(sorted.begin(), sorted.end());
    const double iou_sum =
        std::accumulate(sorted.begin(), sorted.end(), 0.0);
    m.miou = n_gt == 0 ? 1.0 : iou_sum / static_cast<double>(n_gt);
    const double denom = static_cast<double>(n_gt) + fp;
    double ap = 0;
    for (int t = 0; t < 10; ++t) ap += denom == 0 ? 1.0 : tp[t] / denom;
    m.ap_mask = ap / 10.0;
    m.ap_key = key_total == 0
                   ? 1.0
                   : static_cast<double>(key_hits) /
                         static_cast<double>(key_total);
    return m;
  }
};

void accumulate_scene(SplitAccum& acc, const synth::Scene& scene,
                      const SceneInference& inf, model::Variant variant) {
  std::vector<std::vector<std::uint8_t>> gts;
  for (const auto& inst : scene.instances) gts.push_back(inst.mask);
  acc.n_gt += gts.size();

  const int n = inf.mask_logits.dim(0);
  const int ck = inf.heatmaps.dim(1);
  std::vector<metrics::MaskPrediction> preds;
  std::vector<metrics::KeypointPrediction> kpreds;
  for (int i = 0; i < n; ++i) {
    const auto& p = scene.proposals[static_cast<std::size_t>(i)];
    metrics::MaskPrediction mp;
    mp.mask = paste_mask(
        inf.mask_logits.ptr() + static_cast<std::size_t>(i) * 28 * 28, p.bbox,
        scene.height, scene.width);
    mp.score = p.score;
    mp.matched_gt = p.matched_gt;
    preds.push_back(std::move(mp));
    kpreds.push_back(metrics::decode_keypoints(
        inf.heatmaps.ptr() + static_cast<std::size_t>(i) * ck * 3136, ck,
        variant, p.bbox, p.matched_gt));
  }

  const auto match = metrics::match_predictions(preds, gts);
  acc.fp += match.false_positives;
  std::vector<int> gt_pred(gts.size(), -1);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (match.gt_index[i] < 0) continue;
    gt_pred[static_cast<std::size_t>(match.gt_index[i])] =
        static_cast<int>(i);
    acc.ious.push_back(match.iou[i]);
    for (int t = 0; t < 10; ++t)
      if (match.iou[i] >= 0.50 + 0.05 * t - 1e-12) ++acc.tp[t];
  }

  for (std::size_t g = 0; g < gts.size(); ++g) {
    const auto& inst = scene.instances[g];
    const double dx = inst.bbox[2] - inst.bbox[0];
    const double dy = inst.bbox[3] - inst.bbox[1];
    const double radius =
        metrics::kKeypointRadiusFraction * std::sqrt(dx * dx + dy * dy);
    for (std::size_t k = 0; k < inst.keypoints.size(); ++k) {
      if (inst.visibility[k] == synth::Visibility::absent) continue;
      ++acc.key_total;
      if (gt_pred[g] < 0) continue;
      const auto& pts = kpreds[static_cast<std::size_t>(gt_pred[g])].points;
      if (k >= pts.size()) continue;
      const double ex = pts[k][0] - inst.keypoints[k][0];
      const double ey = pts[k][1] - inst.keypoints[k][1];
      if (std::sqrt(ex * ex + ey * ey) <= radius) ++acc.key_hits;
    }
  }
}

bool uses_tta(Mode m) { return m == Mode::tta || m == Mode::ttg_tta; }
bool uses_ttg(Mode m) { return m == Mode::ttg || m == Mode::ttg_tta; }

}  // namespace

metrics::SeedMetrics evaluate_split(model::ModelBundle<float>& bundle,
                                    const synth::Dataset& ds, Mode mode,
                                    const adapt::TtaConfig& tta,
                                    std::vector<std::string>* traces) {
  SplitAccum acc;
  for (const auto& scene : ds.scenes) {
    synth::Scene eval_scene = scene;
    eval_scene.proposals.clear();
    for (const auto& p : scene.proposals)
      if (p.score > tta.min_person_score) eval_scene.proposals.push_back(p);

    adapt::WeightSnapshot<float> snap;
    if (uses_tta(mode)) {
      auto trace = adapt::tta_adapt(bundle, scene, tta, &snap);
      if (traces) traces->push_back(adapt::trace_json(trace, scene.seed, tta));
    }
    if (eval_scene.proposals.empty()) {
      acc.n_gt += scene.instances.size();
      for (const auto& inst : scene.instances)
        for (std::size_t k = 0; k < inst.keypoints.size(); ++k)
          if (inst.visibility[k] != synth::Visibility::absent)
            ++acc.key_total;
    } else {
      const auto inf = infer_scene(bundle, eval_scene);
      accumulate_scene(acc, eval_scene, inf, bundle.variant);
    }
    if (uses_tta(mode)) adapt::reset_weights(bundle, snap);
  }
  return acc.finish();
}

model::ModelBundle<float> train_for_seed(const ExperimentSpec& spec,
                                         std::uint64_t seed,
                                         generalize::TrainLog* log) {
  const auto seeds =
      split_scene_seeds(seed, "source_train", spec.source_train_scenes);
  const auto ds = synth::generate_dataset(spec.source_cfg, seeds,
                                          "source_train");
  Rng rng(seed);
  auto m = model::make_model<float>(spec.variant, false, spec.model_cfg, rng);
  if (uses_ttg(spec.mode)) m = generalize::build_ttg_model(m);
  generalize::TrainConfig tc = spec.train;
  tc.seed = seed;
  tc.mode = uses_ttg(spec.mode) ? generalize::TrainMode::ttg
                                : generalize::TrainMode::baseline;
  auto l = generalize::train_source(m, ds, tc);
  if (log) *log = l;
  return m;
}

namespace {

struct SeedOutput {
  std::vector<ResultRow> rows;
  std::vector<std::pair<std::string, std::string>> traces;  // (path, body)
};

SeedOutput run_one_seed(const ExperimentSpec& spec, std::uint64_t seed) {
  SeedOutput out;
  auto bundle = train_for_seed(spec, seed);

  struct SplitJob {
    const char* name;
    const synth::GenConfig* cfg;
    int count;
  };
  const SplitJob jobs[] = {
      {"source_val", &spec.source_cfg, spec.source_val_scenes},
      {"target_val", &spec.target_cfg, spec.target_val_scenes}};
  for (const auto& job : jobs) {
    const auto ds = synth::generate_dataset(
        *job.cfg, split_scene_seeds(seed, job.name, job.count), job.name);
    std::vector<std::string> traces;
    const auto m = evaluate_split(bundle, ds, spec.mode, spec.tta,
                                  uses_tta(spec.mode) ? &traces : nullptr);
    ResultRow row;
    row.variant = model::variant_name(spec.variant);
    row.mode = mode_name(spec.mode);
    row.seed = seed;
    row.split = job.name;
    row.miou = 100.0 * m.miou;
    row.ap_mask = 100.0 * m.ap_mask;
    row.ap_key = 100.0 * m.ap_key;
    out.rows.push_back(row);
    for (std::size_t i = 0; i < traces.size(); ++i)
      out.traces.emplace_back(row.variant + "_" + row.mode + "_seed" +
                                  std::to_string(seed) + "_" + job.name +
                                  "_" + std::to_string(i) + ".json",
                              traces[i]);
  }
  return out;
}

// Runs fn(i) for i in [0,n) across `workers` threads; exceptions propagate.
void parallel_for(int n, int workers,
                  const std::function<void(int)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(
      static_cast<std::size_t>(std::min(workers, n)));
  for (std::size_t t = 0; t < errors.size(); ++t)
    pool.emplace_back([&, t] {
      try {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  const int n = static_cast<int>(spec.seeds.size());
  std::vector<SeedOutput> outputs(static_cast<std::size_t>(n));
  parallel_for(n, spec.workers, [&](int i) {
    outputs[static_cast<std::size_t>(i)] =
        run_one_seed(spec, spec.seeds[static_cast<std::size_t>(i)]);
  });

  ExperimentResult res;
  for (const auto& o : outputs) {
    res.rows.insert(res.rows.end(), o.rows.begin(), o.rows.end());
    for (const auto& [name, body] : o.traces)
      write_text_file(spec.out_dir + "/traces/" + name, body);
  }
  write_text_file(spec.out_dir + "/results.csv", results_csv(res.rows));
  return res;
}

ExperimentResult run_sweep(const ExperimentSpec& spec,
                           const std::string& grid_name) {
  spec.validate();
  const auto it = spec.grids.find(grid_name);
  if (it == spec.grids.end())
    throw ConfigError("unknown sweep grid: " + grid_name);
  if (it->second.empty())
    throw ConfigError("sweep grid '" + grid_name + "' is empty");
  if (!uses_tta(spec.mode))
    throw ConfigError("grid '" + grid_name +
                      "' tunes adaptation; mode '" + mode_name(spec.mode) +
                      "' never adapts");

  // training is independent of every swept parameter, so train once per seed
  const int n = static_cast<int>(spec.seeds.size());
  std::vector<std::vector<ResultRow>> per_seed(static_cast<std::size_t>(n));
  parallel_for(n, spec.workers, [&](int i) {
    const std::uint64_t seed = spec.seeds[static_cast<std::size_t>(i)];
    auto bundle = train_for_seed(spec, seed);
    const auto ds = synth::generate_dataset(
        spec.target_cfg,
        split_scene_seeds(seed, "target_val", spec.target_val_scenes),
        "target_val");
    for (double value : it->second) {
      adapt::TtaConfig tta = spec.tta;
      if (grid_name == "tta_learning_rate")
        tta.learning_rate = value;
      else if (grid_name == "min_person_score")
        tta.min_person_score = value;
      else if (grid_name == "min_keypoint_prob")
        tta.min_keypoint_prob = value;
      else if (grid_name == "adapt_scope")
        tta.scope = value == 0 ? adapt::AdaptScope::full_backbone
                               : adapt::AdaptScope::last_stage;
      else
        throw ConfigError("grid '" + grid_name +
                          "' has no bound parameter");
      const auto m = evaluate_split(bundle, ds, spec.mode, tta);
      ResultRow row;
      row.variant = model::variant_name(spec.variant);
      row.mode = mode_name(spec.mode);
      row.seed = seed;
      row.split = "target_val";
      row.miou = 100.0 * m.miou;
      row.ap_mask = 100.0 * m.ap_mask;
      row.ap_key = 100.0 * m.ap_key;
      row.sweep_param = grid_name;
      row.sweep_value = value;
      per_seed[static_cast<std::size_t>(i)].push_back(row);
    }
  });

  ExperimentResult res;
  // order rows value-major so each grid point's seeds sit together
  for (std::size_t v = 0; v < it->second.size(); ++v)
    for (const auto& rows : per_seed)
      res.rows.push_back(rows[v]);
  write_text_file(spec.out_dir + "/sweep.csv", results_csv(res.rows));
  return res;
}

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string out =
      "variant,mode,seed,split,miou,ap_mask,ap_key,sweep_param,sweep_value\n";
  for (const auto& r : rows)
    out += r.variant + "," + r.mode + "," + std::to_string(r.seed) + "," +
           r.split + "," + fmt(r.miou) + "," + fmt(r.ap_mask) + "," +
           fmt(r.ap_key) + "," + r.sweep_param + "," +
           (r.sweep_param.empty() ? std::string() : fmt(r.sweep_value)) +
           "\n";
  return out;
}

std::vector<ResultRow> parse_results_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) ||
      line.rfind("variant,mode,seed,split,", 0) != 0)
    throw ConfigError("results csv: bad header");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() < 8) throw ConfigError("results csv: short row: " + line);
    ResultRow r;
    r.variant = f[0];
    r.mode = f[1];
    try {
      r.seed = std::stoull(f[2]);
      r.split = f[3];
      r.miou = std::stod(f[4]);
      r.ap_mask = std::stod(f[5]);
      r.ap_key = std::stod(f[6]);
      r.sweep_param = f[7];
      if (!r.sweep_param.empty()) {
        if (f.size() < 9) throw ConfigError("results csv: missing value");
        r.sweep_value = std::stod(f[8]);
      }
    } catch (const std::invalid_argument&) {
      throw ConfigError("results csv: bad number in row: " + line);
    }
    rows.push_back(r);
  }
  return rows;
}

namespace {

struct GroupKey {
  std::string variant, mode, split, sweep_param;
  double sweep_value = 0;
  bool operator<(const GroupKey& o) const {
    return std::tie(variant, mode, split, sweep_param, sweep_value) <
           std::tie(o.variant, o.mode, o.split, o.sweep_param, o.sweep_value);
  }
};

std::string cell(const metrics::Aggregate& a) {
  return a.has_std ? fmt2(a.mean) + "(" + fmt2(a.stddev) + ")" : fmt2(a.mean);
}

}  // namespace

std::string summary_csv(const std::vector<ResultRow>& rows) {
  std::map<GroupKey, std::vector<metrics::SeedMetrics>> groups;
  for (const auto& r : rows) {
    GroupKey k{r.variant, r.mode, r.split, r.sweep_param, r.sweep_value};
    metrics::SeedMetrics m;
    m.miou = r.miou;
    m.ap_mask = r.ap_mask;
    m.ap_key = r.ap_key;
    groups[k].push_back(m);
  }
  std::size_t max_seeds = 0;
  for (const auto& [k, v] : groups) max_seeds = std::max(max_seeds, v.size());
  std::string out =
      "variant,mode,split,sweep_param,sweep_value,seeds,miou,ap_mask,ap_key\n";
  for (const auto& [k, v] : groups) {
    if (v.size() < max_seeds)
      std::cerr << "warning: cell " << k.variant << "/" << k.mode << "/"
                << k.split << " has " << v.size() << " of " << max_seeds
                << " seeds\n";
    const auto s = metrics::aggregate(v);
    out += k.variant + "," + k.mode + "," + k.split + "," + k.sweep_param +
           "," + (k.sweep_param.empty() ? std::string() : fmt(k.sweep_value)) +
           "," + std::to_string(v.size()) + "," + cell(s.miou) + "," +
           cell(s.ap_mask) + "," + cell(s.ap_key) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// SVG plots
// ---------------------------------------------------------------------------

namespace {

constexpr int kW = 640, kH = 400, kPad = 60;
const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                         "#9467bd", "#8c564b"};

std::string svg_header(const std::string& title) {
  std::string s =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
      std::to_string(kW) + "\" height=\"" + std::to_string(kH) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + std::to_string(kW / 2) +
       "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       "font-size=\"16\">" +
       title + "</text>\n";
  return s;
}

}  // namespace

std::string svg_line_chart(
    const std::string& title, const std::vector<double>& xs,
    const std::map<std::string, std::vector<double>>& series) {
  if (xs.empty()) throw ValueError("svg_line_chart: no x values");
  for (const auto& [name, ys] : series)
    if (ys.size() != xs.size())
      throw ValueError("svg_line_chart: series '" + name +
                       "' length mismatch");
  double ymin = 1e300, ymax = -1e300;
  for (const auto& [name, ys] : series)
    for (double y : ys) {
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (series.empty() || ymin > ymax) {
    ymin = 0;
    ymax = 1;
  }
  if (ymax - ymin < 1e-9) {
    ymin -= 1;
    ymax += 1;
  }
  const double xmin = xs.front(), xmax = xs.back();
  const double xspan = std::max(xmax - xmin, 1e-12);
  auto px = [&](double x) {
    return kPad + (x - xmin) / xspan * (kW - 2 * kPad);
  };
  auto py = [&](double y) {
    return kH - kPad - (y - ymin) / (ymax - ymin) * (kH - 2 * kPad);
  };

  std::string s = svg_header(title);
  s += "<line x1=\"" + std::to_string(kPad) + "\" y1=\"" +
       std::to_string(kH - kPad) + "\" x2=\"" + std::to_string(kW - kPad) +
       "\" y2=\"" + std::to_string(kH - kPad) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + std::to_string(kPad) + "\" y1=\"" +
       std::to_string(kPad) + "\" x2=\"" + std::to_string(kPad) +
       "\" y2=\"" + std::to_string(kH - kPad) + "\" stroke=\"black\"/>\n";
  for (double x : xs)
    s += "<text x=\"" + fmt2(px(x)) + "\" y=\"" +
         std::to_string(kH - kPad + 18) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"11\">" +
         fmt2(x) + "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = ymin + (ymax - ymin) * t / 4.0;
    s += "<text x=\"" + std::to_string(kPad - 8) + "\" y=\"" +
         fmt2(py(y) + 4) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" "
         "font-size=\"11\">" +
         fmt2(y) + "</text>\n";
  }
  int ci = 0;
  for (const auto& [name, ys] : series) {
    const char* color = kColors[ci % 6];
    std::string pts;
    for (std::size_t i = 0; i < xs.size(); ++i)
      pts += fmt2(px(xs[i])) + "," + fmt2(py(ys[i])) + " ";
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
         "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    for (std::size_t i = 0; i < xs.size(); ++i)
      s += "<circle cx=\"" + fmt2(px(xs[i])) + "\" cy=\"" + fmt2(py(ys[i])) +
           "\" r=\"3\" fill=\"" + color + "\"/>\n";
    s += "<text x=\"" + std::to_string(kW - kPad + 4) + "\" y=\"" +
         std::to_string(kPad + 16 * ci) +
         "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" + color +
         "\">" + name + "</text>\n";
    ++ci;
  }
  return s + "</svg>\n";
}

std::string svg_bar_chart(const std::string& title,
                          const std::vector<std::string>& labels,
                          const std::vector<double>& values) {
  if (labels.size() != values.size())
    throw ValueError("svg_bar_chart: labels/values length mismatch");
  if (labels.empty()) throw ValueError("svg_bar_chart: nothing to plot");
  double ymax = 1e-9;
  for (double v : values) ymax = std::max(ymax, v);
  const double bw = (kW - 2.0 * kPad) / static_cast<double>(labels.size());
  std::string s = svg_header(title);
  s += "<line x1=\"" + std::to_string(kPad) + "\" y1=\"" +
       std::to_string(kH - kPad) + "\" x2=\"" + std::to_string(kW - kPad) +
       "\" y2=\"" + std::to_string(kH - kPad) + "\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double h = values[i] / ymax * (kH - 2 * kPad);
    const double x = kPad + bw * static_cast<double>(i) + bw * 0.15;
    s += "<rect x=\"" + fmt2(x) + "\" y=\"" + fmt2(kH - kPad - h) +
         "\" width=\"" + fmt2(bw * 0.7) + "\" height=\"" + fmt2(h) +
         "\" fill=\"" + kColors[i % 6] + "\"/>\n";
    s += "<text x=\"" + fmt2(x + bw * 0.35) + "\" y=\"" +
         std::to_string(kH - kPad + 18) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"11\">" +
         labels[i] + "</text>\n";
    s += "<text x=\"" + fmt2(x + bw * 0.35) + "\" y=\"" +
         fmt2(kH - kPad - h - 6) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"11\">" +
         fmt2(values[i]) + "</text>\n";
  }
  return s + "</svg>\n";
}

void make_tables(const std::vector<std::string>& results_paths,
                 const std::string& out_dir) {
  std::vector<ResultRow> rows;
  for (const auto& path : results_paths) {
    const auto parsed = parse_results_csv(read_text_file(path));
    rows.insert(rows.end(), parsed.begin(), parsed.end());
  }
  write_text_file(out_dir + "/summary.csv", summary_csv(rows));
  fs::create_directories(out_dir + "/plots");

  // bar chart: mean target miou per variant/mode (plain rows only)
  std::map<std::string, std::pair<double, int>> bars;
  for (const auto& r : rows)
    if (r.sweep_param.empty() && r.split == "target_val") {
      auto& b = bars[r.variant + "/" + r.mode];
      b.first += r.miou;
      b.second += 1;
    }
  if (!bars.empty()) {
    std::vector<std::string> labels;
    std::vector<double> values;
    for (const auto& [label, acc] : bars) {
      labels.push_back(label);
      values.push_back(acc.first / acc.second);
    }
    write_text_file(out_dir + "/plots/modes.svg",
                    svg_bar_chart("target mIoU by variant and mode", labels,
                                  values));
  }

  // line chart per swept parameter: mean miou vs value, one series per
  // variant/mode
  std::set<std::string> params;
  for (const auto& r : rows)
    if (!r.sweep_param.empty()) params.insert(r.sweep_param);
  for (const auto& param : params) {
    std::set<double> xset;
    for (const auto& r : rows)
      if (r.sweep_param == param) xset.insert(r.sweep_value);
    const std::vector<double> xs(xset.begin(), xset.end());
    std::map<std::string, std::vector<double>> series;
    bool complete = true;
    std::set<std::string> names;
    for (const auto& r : rows)
      if (r.sweep_param == param) names.insert(r.variant + "/" + r.mode);
    for (const auto& name : names) {
      std::vector<double> ys;
      for (double x : xs) {
        double sum = 0;
        int cnt = 0;
        for (const auto& r : rows)
          if (r.sweep_param == param && r.sweep_value == x &&
              r.variant + "/" + r.mode == name) {
            sum += r.miou;
            ++cnt;
          }
        if (cnt == 0) {
          std::cerr << "warning: sweep " << param << " misses value "
                    << fmt(x) << " for " << name << "\n";
          complete = false;
          break;
        }
        ys.push_back(sum / cnt);
      }
      if (ys.size() == xs.size()) series[name] = std::move(ys);
    }
    if (!series.empty())
      write_text_file(out_dir + "/plots/sweep_" + param + ".svg",
                      svg_line_chart("target mIoU vs " + param, xs, series));
    (void)complete;
  }
}

}  // namespace kpal::harness
