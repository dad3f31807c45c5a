#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "kpal/model.hpp"
#include "kpal/synthgen.hpp"

namespace kpal::metrics {

// One predicted instance mask at full image resolution, already binarized.
struct MaskPrediction {
  std::vector<std::uint8_t> mask;
  double score = 0.0;
  int matched_gt = -1;  // -1: unmatched, pair greedily by IoU
};

// Predicted keypoint locations in image coordinates for one instance.
struct KeypointPrediction {
  std::vector<std::array<double, 2>> points;  // (x, y)
  int matched_gt = -1;
};

struct SeedMetrics {
  double miou = 0.0;     // all three on [0,1]
  double ap_mask = 0.0;
  double ap_key = 0.0;
};

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;   // population std; meaningful only when has_std
  bool has_std = false;
};

struct Summary {
  Aggregate miou, ap_mask, ap_key;
  std::vector<SeedMetrics> per_seed;
};

// |a ∩ b| / |a ∪ b| over equal-size binary rasters; 1.0 when both empty.
double mask_iou(const std::vector<std::uint8_t>& a,
                const std::vector<std::uint8_t>& b);

// Pairs predictions to GT (explicit matched_gt wins, else greedy by IoU in
// descending score order, each GT used once) and returns the matched IoU per
// prediction index (-1 entries for unmatched) plus the pairing.
struct MatchResult {
  std::vector<double> iou;      // per prediction; -1 if unmatched
  std::vector<int> gt_index;    // per prediction; -1 if unmatched
  int false_positives = 0;
};
MatchResult match_predictions(const std::vector<MaskPrediction>& preds,
                              const std::vector<std::vector<std::uint8_t>>& gts);

// Matched recall TP_t / (n_gt + FP) at each IoU threshold 0.50:0.05:0.95.
std::vector<double> recall_by_threshold(
    const std::vector<MaskPrediction>& preds,
    const std::vector<std::vector<std::uint8_t>>& gts);

// Mean of recall_by_threshold.
double ap_mask_surrogate(const std::vector<MaskPrediction>& preds,
                         const std::vector<std::vector<std::uint8_t>>& gts);

// Hit radius for the keypoint surrogate, as a fraction of the GT box
// diagonal. Tight enough that snapping to a nearby occluder limb counts as
// a miss.
constexpr double kKeypointRadiusFraction = 0.1;

// Fraction of non-absent GT keypoints whose prediction falls within
// radius_fraction of the GT box diagonal. GT instances without a matched
// prediction count as misses.
double ap_key_surrogate(const std::vector<KeypointPrediction>& preds,
                        const std::vector<synth::Instance>& gts,
                        double radius_fraction = kKeypointRadiusFraction);

// Heatmap argmax of each location channel mapped back into image coordinates
// through the proposal box (corner-aligned 56x56 grid).
KeypointPrediction decode_keypoints(const float* heatmaps, int ck,
                                    model::Variant variant,
                                    const std::array<double, 4>& box,
                                    int matched_gt);

// Unweighted mean and population std across seeds; std flagged absent for a
// single seed.
Summary aggregate(const std::vector<SeedMetrics>& per_seed);

}  // namespace kpal::metrics
