#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kpal/model.hpp"
#include "kpal/ops.hpp"
#include "kpal/synthgen.hpp"
#include "kpal/tensor.hpp"

namespace kpal::adapt {

enum class AdaptScope { full_backbone, last_stage };

struct TtaConfig {
  int rounds = 3;
  double learning_rate = 1e-3;
  double min_person_score = 0.5;
  double min_keypoint_prob = 0.05;
  AdaptScope scope = AdaptScope::full_backbone;
  double visibility_loss_weight = 1.0;

  void validate() const {
    if (rounds < 0) throw ValueError("TtaConfig: rounds must be >= 0");
    if (learning_rate <= 0)
      throw ValueError("TtaConfig: learning_rate must be > 0");
    if (min_person_score < 0 || min_person_score > 1 ||
        min_keypoint_prob < 0 || min_keypoint_prob > 1)
      throw ValueError("TtaConfig: thresholds must lie in [0,1]");
  }
};

// Per-keypoint pseudo-label: heatmap argmax cell plus, for the three-channel
// layouts, the visibility class read out at that cell (0 visible, 1 occluded).
struct KeypointLabel {
  bool kept = false;
  int cell = -1;  // 56*row + col
  int visibility = -1;
};

struct ProposalLabels {
  int proposal_index = -1;
  std::vector<KeypointLabel> keypoints;
};

struct PseudoLabels {
  std::vector<ProposalLabels> proposals;

  int kept_keypoints() const {
    int n = 0;
    for (const auto& p : proposals)
      for (const auto& k : p.keypoints) n += k.kept ? 1 : 0;
    return n;
  }
};

struct AdaptationTrace {
  std::vector<double> losses;        // one per executed round
  std::vector<int> kept_proposals;   // per round
  std::vector<int> kept_keypoints;   // per round
  std::string snapshot_id;
};

template <typename T>
struct WeightSnapshot {
  std::map<std::string, std::vector<T>> values;
};

std::string trace_json(const AdaptationTrace& trace, std::uint64_t scene_seed,
                       const TtaConfig& cfg);

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> scene_image(const synth::Scene& s) {
  auto img = Tensor<T>::zeros({1, 3, s.height, s.width});
  for (std::size_t j = 0; j < s.image.size(); ++j)
    (*img.data)[j] = static_cast<T>(s.image[j]);
  return img;
}

// Location-channel index within the heatmap stack for keypoint k.
inline int location_channel(model::Variant v, int k) {
  return v == model::Variant::mrcnn ? k : 3 * k;
}

template <typename T>
PseudoLabels to_pseudo_labels(const model::KeypointOutput<T>& kp,
                              const std::vector<synth::Proposal>& proposals,
                              model::Variant variant, const TtaConfig& cfg) {
  cfg.validate();
  const int n = kp.heatmaps.dim(0), ck = kp.heatmaps.dim(1);
  const int cells = kp.heatmaps.dim(2) * kp.heatmaps.dim(3);
  if (static_cast<std::size_t>(n) != proposals.size())
    throw ShapeError("to_pseudo_labels: " + std::to_string(n) +
                     " heatmap rows vs " + std::to_string(proposals.size()) +
                     " proposals");
  const int k_count = variant == model::Variant::mrcnn ? ck : ck / 3;
  PseudoLabels out;
  for (int i = 0; i < n; ++i) {
    if (proposals[static_cast<std::size_t>(i)].score <= cfg.min_person_score)
      continue;
    ProposalLabels pl;
    pl.proposal_index = i;
    for (int k = 0; k < k_count; ++k) {
      const T* h = kp.heatmaps.ptr() +
                   (static_cast<std::size_t>(i) * ck +
                    static_cast<std::size_t>(location_channel(variant, k))) *
                       cells;
      int arg = 0;
      double mx = h[0];
      for (int c = 1; c < cells; ++c)
        if (h[c] > mx) {
          mx = h[c];
          arg = c;
        }
      double z = 0;
      for (int c = 0; c < cells; ++c) z += std::exp(double(h[c]) - mx);
      const double prob = 1.0 / z;  // softmax value at the argmax

      KeypointLabel lbl;
      lbl.kept = prob >= cfg.min_keypoint_prob;
      lbl.cell = arg;
      if (variant != model::Variant::mrcnn) {
        const T* base = kp.heatmaps.ptr() +
                        static_cast<std::size_t>(i) * ck * cells;
        const double vis = base[(3 * k + 1) * cells + arg];
        const double occ = base[(3 * k + 2) * cells + arg];
        lbl.visibility = occ > vis ? 1 : 0;
      }
      pl.keypoints.push_back(lbl);
    }
    out.proposals.push_back(std::move(pl));
  }
  return out;
}

// Mean spatial CE over kept keypoints plus lambda_vis times the 2-way
// visibility CE at the labeled cell (skipped for the 17-channel layout).
// Returns a plain zero scalar when nothing is kept.
template <typename T>
Tensor<T> keypoint_loss(Tape<T>* tp, const model::KeypointOutput<T>& kp,
                        const PseudoLabels& labels, model::Variant variant,
                        double lambda_vis) {
  const int ck = kp.heatmaps.dim(1);
  const int cells = kp.heatmaps.dim(2) * kp.heatmaps.dim(3);
  const int k_count = variant == model::Variant::mrcnn ? ck : ck / 3;

  std::vector<std::size_t> loc_idx;   // rows of kept keypoints
  std::vector<int> loc_cells;
  std::vector<std::size_t> vis_idx;   // interleaved (vis,occ) logit pairs
  std::vector<int> vis_cls;
  for (const auto& pl : labels.proposals) {
    if (pl.proposal_index < 0 ||
        pl.proposal_index >= kp.heatmaps.dim(0) ||
        static_cast<int>(pl.keypoints.size()) != k_count)
      throw ShapeError("keypoint_loss: labels misaligned with heatmaps");
    const std::size_t base =
        static_cast<std::size_t>(pl.proposal_index) * ck * cells;
    for (int k = 0; k < k_count; ++k) {
      const auto& lbl = pl.keypoints[static_cast<std::size_t>(k)];
      if (!lbl.kept) continue;
      const std::size_t row =
          base + static_cast<std::size_t>(location_channel(variant, k)) *
                     cells;
      for (int c = 0; c < cells; ++c)
        loc_idx.push_back(row + static_cast<std::size_t>(c));
      loc_cells.push_back(lbl.cell);
      if (variant != model::Variant::mrcnn && lbl.visibility >= 0) {
        vis_idx.push_back(base + static_cast<std::size_t>(3 * k + 1) * cells +
                          static_cast<std::size_t>(lbl.cell));
        vis_idx.push_back(base + static_cast<std::size_t>(3 * k + 2) * cells +
                          static_cast<std::size_t>(lbl.cell));
        vis_cls.push_back(lbl.visibility);
      }
    }
  }
  if (loc_cells.empty()) return Tensor<T>::zeros({1});

  auto loc_rows =
      gather(tp, kp.heatmaps, loc_idx)
          .reshaped({static_cast<int>(loc_cells.size()), cells});
  auto loss = spatial_softmax_ce(tp, loc_rows, loc_cells);
  if (!vis_cls.empty() && lambda_vis != 0.0) {
    auto vis_rows = gather(tp, kp.heatmaps, vis_idx)
                        .reshaped({static_cast<int>(vis_cls.size()), 2});
    auto vis_loss = spatial_softmax_ce(tp, vis_rows, vis_cls);
    loss = add(tp, loss, scale(tp, vis_loss, static_cast<T>(lambda_vis)));
  }
  return loss;
}

template <typename T>
WeightSnapshot<T> snapshot_weights(const model::ModelBundle<T>& m,
                                   const std::string& prefix = "") {
  WeightSnapshot<T> s;
  for (const auto& [name, t] : m.params)
    if (name.rfind(prefix, 0) == 0) s.values.emplace(name, *t.data);
  return s;
}

template <typename T>
void reset_weights(model::ModelBundle<T>& m, const WeightSnapshot<T>& snap) {
  if (snap.values.empty())
    throw ValueError("reset_weights: empty snapshot");
  for (const auto& [name, vals] : snap.values) {
    auto& t = m.p(name);
    if (t.numel() != vals.size())
      throw ValueError("reset_weights: size mismatch for " + name);
    *t.data = vals;
  }
}

namespace detail {

inline std::string scope_prefix(AdaptScope s) {
  return s == AdaptScope::full_backbone ? "backbone." : "backbone.stage3.";
}

}  // namespace detail

// Algorithm: n rounds of forward -> pseudo-labels -> keypoint CE -> SGD on
// the backbone (scope-limited). Heads stay frozen. Mutates the bundle; the
// pre-adaptation weights are captured into *snapshot_out when given.
template <typename T>
AdaptationTrace tta_adapt(model::ModelBundle<T>& m, const synth::Scene& scene,
                          const TtaConfig& cfg,
                          WeightSnapshot<T>* snapshot_out = nullptr) {
  cfg.validate();
  AdaptationTrace trace;
  trace.snapshot_id = "seed_" + std::to_string(scene.seed);
  if (snapshot_out) *snapshot_out = snapshot_weights(m, "backbone.");

  const std::string prefix = detail::scope_prefix(cfg.scope);
  auto scope_params = m.params_with_prefix(prefix);
  auto image = scene_image<T>(scene);

  for (int round = 0; round < cfg.rounds; ++round) {
    if (scene.proposals.empty()) {
      trace.losses.push_back(0.0);
      trace.kept_proposals.push_back(0);
      trace.kept_keypoints.push_back(0);
      continue;
    }
    m.set_requires_grad(prefix, true);
    Tape<T> tape;
    auto stages = backbone_forward(&tape, m, image);
    auto roi = model::roi_extract(&tape, stages.back(), scene.proposals,
                                  scene.height, scene.width);
    auto kp = model::keypoint_forward(&tape, m, roi);
    auto labels = to_pseudo_labels(kp, scene.proposals, m.variant, cfg);
    const int kept = labels.kept_keypoints();
    trace.kept_proposals.push_back(static_cast<int>(labels.proposals.size()));
    trace.kept_keypoints.push_back(kept);
    if (kept == 0) {
      trace.losses.push_back(0.0);
      m.set_requires_grad(prefix, false);
      continue;
    }
    auto loss =
        keypoint_loss(&tape, kp, labels, m.variant,
                      cfg.visibility_loss_weight);
    trace.losses.push_back(static_cast<double>(loss[0]));
    tape.backward(loss);
    sgd_step(scope_params, static_cast<T>(cfg.learning_rate));
    zero_grads(scope_params);
    m.set_requires_grad(prefix, false);
  }
  return trace;
}

// Mask inference with the (possibly adapted) backbone; head weights as-is.
// Handles both the baseline and the widened mask head.
template <typename T>
model::MaskOutput<T> tta_infer_masks(model::ModelBundle<T>& m,
                                     const synth::Scene& scene) {
  auto image = scene_image<T>(scene);
  auto stages = backbone_forward<T>(nullptr, m, image);
  auto roi = model::roi_extract<T>(nullptr, stages.back(), scene.proposals,
                                   scene.height, scene.width);
  if (m.ttg_enabled) {
    auto fe = model::kp_fe_forward<T>(nullptr, m, roi);
    return model::mask_forward<T>(nullptr, m, roi, &fe);
  }
  return model::mask_forward<T>(nullptr, m, roi);
}

}  // namespace kpal::adapt
