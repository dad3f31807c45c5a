#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "kpal/adapt.hpp"
#include "kpal/model.hpp"
#include "kpal/rng.hpp"
#include "kpal/synthgen.hpp"
#include "kpal/tensor.hpp"

namespace kpal::generalize {

enum class TrainMode { baseline, ttg };

struct TrainConfig {
  int epochs = 6;
  int batch_scenes = 4;
  double learning_rate = 1e-2;
  double mask_loss_weight = 1.0;
  double keypoint_loss_weight = 1.0;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::baseline;
  double roi_jitter = 2.0;  // px of GT-box jitter for training ROIs

  void validate() const {
    if (epochs < 0 || batch_scenes <= 0)
      throw ValueError("TrainConfig: epochs/batch_scenes out of range");
    if (learning_rate < 0 || mask_loss_weight < 0 ||
        keypoint_loss_weight < 0)
      throw ValueError("TrainConfig: negative rate or weight");
  }
};

struct TrainLog {
  std::vector<double> mask_loss;   // per-epoch means
  std::vector<double> kp_loss;
  std::vector<double> total_loss;
  std::string checkpoint_path;
};

inline std::string train_log_csv(const TrainLog& log) {
  std::string out = "epoch,mask_loss,kp_loss,total_loss\n";
  for (std::size_t e = 0; e < log.total_loss.size(); ++e)
    out += std::to_string(e) + "," + std::to_string(log.mask_loss[e]) + "," +
           std::to_string(log.kp_loss[e]) + "," +
           std::to_string(log.total_loss[e]) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Ground-truth targets in ROI coordinates
// ---------------------------------------------------------------------------

// Nearest-pixel crop of the instance's visible mask under `box`, on a
// corner-aligned size x size grid. Values are exact 0/1 targets.
inline std::vector<double> roi_mask_target(const synth::Instance& inst,
                                           const std::array<double, 4>& box,
                                           int size, int img_h, int img_w) {
  std::vector<double> out(static_cast<std::size_t>(size) * size, 0.0);
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double y = box[1] + (box[3] - box[1]) * i / (size - 1.0);
      const double x = box[0] + (box[2] - box[0]) * j / (size - 1.0);
      const long py = std::lround(y), px = std::lround(x);
      if (py < 0 || py >= img_h || px < 0 || px >= img_w) continue;
      out[static_cast<std::size_t>(i) * size + static_cast<std::size_t>(j)] =
          inst.mask[static_cast<std::size_t>(py) * img_w +
                    static_cast<std::size_t>(px)];
    }
  return out;
}

// GT keypoint labels in the same structure the self-supervised loss consumes:
// cell = keypoint position mapped into the box's 56x56 grid; absent
// keypoints are dropped from both loss terms.
inline adapt::PseudoLabels gt_keypoint_labels(
    const std::vector<synth::Instance>& instances,
    const std::vector<std::array<double, 4>>& boxes,
    const std::vector<int>& matched, int keypoints) {
  adapt::PseudoLabels out;
  for (std::size_t r = 0; r < boxes.size(); ++r) {
    if (matched[r] < 0) continue;
    const auto& inst = instances[static_cast<std::size_t>(matched[r])];
    const auto& box = boxes[r];
    adapt::ProposalLabels pl;
    pl.proposal_index = static_cast<int>(r);
    for (int k = 0; k < keypoints; ++k) {
      adapt::KeypointLabel lbl;
      if (inst.visibility[static_cast<std::size_t>(k)] !=
          synth::Visibility::absent) {
        const double fx = (inst.keypoints[static_cast<std::size_t>(k)][0] -
                           box[0]) /
                          std::max(box[2] - box[0], 1e-9) * 55.0;
        const double fy = (inst.keypoints[static_cast<std::size_t>(k)][1] -
                           box[1]) /
                          std::max(box[3] - box[1], 1e-9) * 55.0;
        const long col = std::clamp(std::lround(fx), 0L, 55L);
        const long row = std::clamp(std::lround(fy), 0L, 55L);
        lbl.kept = true;
        lbl.cell = static_cast<int>(56 * row + col);
        lbl.visibility = inst.visibility[static_cast<std::size_t>(k)] ==
                                 synth::Visibility::occluded
                             ? 1
                             : 0;
      }
      pl.keypoints.push_back(lbl);
    }
    out.proposals.push_back(std::move(pl));
  }
  return out;
}

// ---------------------------------------------------------------------------
// TTG model construction
// ---------------------------------------------------------------------------

// Widens the mask head's first conv to accept [roi || fe]; the new input
// columns start at zero so the widened head initially reproduces the
// baseline output.
template <typename T>
model::ModelBundle<T> build_ttg_model(const model::ModelBundle<T>& base) {
  if (base.ttg_enabled)
    throw ValueError("build_ttg_model: bundle already widened");
  auto m = base.clone();
  m.ttg_enabled = true;
  const int cfe = model::fe_channels(m.variant, m.config);
  const auto& old_w = base.p("mask.conv0.w");
  const int mw = old_w.dim(0), old_in = old_w.dim(1);
  auto new_w = Tensor<T>::zeros({mw, old_in + cfe, 3, 3});
  for (int o = 0; o < mw; ++o)
    for (int c = 0; c < old_in; ++c)
      for (int t = 0; t < 9; ++t)
        (*new_w.data)[(static_cast<std::size_t>(o) * (old_in + cfe) +
                       static_cast<std::size_t>(c)) *
                          9 +
                      static_cast<std::size_t>(t)] =
            (*old_w.data)[(static_cast<std::size_t>(o) * old_in +
                           static_cast<std::size_t>(c)) *
                              9 +
                          static_cast<std::size_t>(t)];
  m.params.erase("mask.conv0.w");
  m.params.emplace("mask.conv0.w", std::move(new_w));
  return m;
}

// ---------------------------------------------------------------------------
// Source training
// ---------------------------------------------------------------------------

template <typename T>
TrainLog train_source(model::ModelBundle<T>& m, const synth::Dataset& ds,
                      const TrainConfig& cfg) {
  cfg.validate();
  if (ds.scenes.empty()) throw ValueError("train_source: empty dataset");
  if (ds.config.domain_tag != "source")
    throw ValueError("train_source: dataset tagged '" + ds.config.domain_tag +
                     "', refusing to train on non-source data");
  if ((cfg.mode == TrainMode::ttg) != m.ttg_enabled)
    throw ValueError("train_source: mode does not match bundle ttg flag");

  Rng rng(0x7242 ^ cfg.seed);
  std::vector<Tensor<T>*> all_params;
  for (auto& [name, t] : m.params) all_params.push_back(&t);
  for (auto* p : all_params) p->set_requires_grad(true);

  const int k_count = m.config.keypoints;
  TrainLog log;
  std::vector<std::size_t> order(ds.scenes.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // linear warmup; full-rate SGD from a raw init occasionally diverges at
    // the rates this budget needs
    const double warm = 0.1 * cfg.epochs;
    const double lr =
        cfg.learning_rate *
        (epoch < warm ? std::min(1.0, (epoch + 1) / warm) : 1.0);
    // deterministic shuffle
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(i)]);

    double em = 0, ek = 0;
    std::size_t in_batch = 0;
    for (std::size_t si = 0; si < order.size(); ++si) {
      const synth::Scene& scene = ds.scenes[order[si]];
      if (scene.instances.empty()) continue;

      std::vector<synth::Proposal> rois;
      std::vector<std::array<double, 4>> boxes;
      std::vector<int> matched;
      for (std::size_t gi = 0; gi < scene.instances.size(); ++gi) {
        synth::Proposal p;
        for (int c = 0; c < 4; ++c)
          p.bbox[static_cast<std::size_t>(c)] =
              scene.instances[gi].bbox[static_cast<std::size_t>(c)] +
              rng.uniform(-cfg.roi_jitter, cfg.roi_jitter);
        if (p.bbox[2] <= p.bbox[0] + 1) p.bbox[2] = p.bbox[0] + 1;
        if (p.bbox[3] <= p.bbox[1] + 1) p.bbox[3] = p.bbox[1] + 1;
        p.score = 1.0;
        p.matched_gt = static_cast<int>(gi);
        rois.push_back(p);
        boxes.push_back(p.bbox);
        matched.push_back(static_cast<int>(gi));
      }

      Tape<T> tape;
      auto image = adapt::scene_image<T>(scene);
      auto stages = backbone_forward(&tape, m, image);
      auto roi = model::roi_extract(&tape, stages.back(), rois, scene.height,
                                    scene.width);
      auto kp = model::keypoint_forward(&tape, m, roi);

      Tensor<T> mask_logits;
      if (m.ttg_enabled) {
        // the mask head reads the keypoint features but must not steer them:
        // letting the (heavier-weighted) mask loss backprop into the tower
        // degrades keypoint learning and with it both heads
        auto fe_in = Tensor<T>::zeros(kp.fe.shape);
        *fe_in.data = *kp.fe.data;
        mask_logits = model::mask_forward(&tape, m, roi, &fe_in);
      } else {
        mask_logits = model::mask_forward(&tape, m, roi);
      }

      std::vector<T> mask_target;
      for (std::size_t r = 0; r < rois.size(); ++r) {
        auto t = roi_mask_target(
            scene.instances[static_cast<std::size_t>(matched[r])], boxes[r],
            28, scene.height, scene.width);
        for (double v : t) mask_target.push_back(static_cast<T>(v));
      }
      auto l_mask = bce_with_logits_mean(
          &tape,
          mask_logits.reshaped(
              {static_cast<int>(mask_logits.numel())}),
          mask_target);

      auto gt = gt_keypoint_labels(scene.instances, boxes, matched, k_count);
      auto l_kp = adapt::keypoint_loss(&tape, kp, gt, m.variant, 1.0);
      const bool kp_live = gt.kept_keypoints() > 0;

      em += static_cast<double>(l_mask[0]);
      ek += static_cast<double>(l_kp[0]);

      auto total = scale(&tape, l_mask, static_cast<T>(cfg.mask_loss_weight));
      if (kp_live)
        total = add(&tape, total,
                    scale(&tape, l_kp,
                          static_cast<T>(cfg.keypoint_loss_weight)));
      tape.backward(total);
      ++in_batch;

      if (in_batch == static_cast<std::size_t>(cfg.batch_scenes) ||
          si + 1 == order.size()) {
        sgd_step(all_params, static_cast<T>(lr / double(in_batch)));
        zero_grads(all_params);
        in_batch = 0;
      }
    }
    const double n = static_cast<double>(order.size());
    log.mask_loss.push_back(em / n);
    log.kp_loss.push_back(ek / n);
    log.total_loss.push_back(
        (cfg.mask_loss_weight * em + cfg.keypoint_loss_weight * ek) / n);
  }
  for (auto* p : all_params) p->set_requires_grad(false);
  return log;
}

// Single forward pass with aggregated features; never mutates weights.
template <typename T>
model::MaskOutput<T> ttg_infer(model::ModelBundle<T>& m,
                               const synth::Scene& scene) {
  if (!m.ttg_enabled)
    throw ValueError("ttg_infer: bundle has no widened mask head");
  return adapt::tta_infer_masks(m, scene);
}

}  // namespace kpal::generalize
