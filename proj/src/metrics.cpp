#include "kpal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kpal/adapt.hpp"
#include "kpal/tensor.hpp"

namespace kpal::metrics {

double mask_iou(const std::vector<std::uint8_t>& a,
                const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size())
    throw ShapeError("mask_iou: sizes " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

MatchResult match_predictions(
    const std::vector<MaskPrediction>& preds,
    const std::vector<std::vector<std::uint8_t>>& gts) {
  MatchResult res;
  res.iou.assign(preds.size(), -1.0);
  res.gt_index.assign(preds.size(), -1);
  std::vector<bool> gt_used(gts.size(), false);

  // explicit pairings first
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int g = preds[i].matched_gt;
    if (g >= 0 && g < static_cast<int>(gts.size()) &&
        !gt_used[static_cast<std::size_t>(g)]) {
      res.gt_index[i] = g;
      res.iou[i] = mask_iou(preds[i].mask, gts[static_cast<std::size_t>(g)]);
      gt_used[static_cast<std::size_t>(g)] = true;
    }
  }
  // remaining predictions greedily by IoU, visiting in descending score
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (res.gt_index[i] < 0) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a,
                                                   std::size_t b) {
    return preds[a].score > preds[b].score;
  });
  for (std::size_t i : order) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[g]) continue;
      const double iou = mask_iou(preds[i].mask, gts[g]);
      if (iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou > 0.0) {
      res.gt_index[i] = best;
      res.iou[i] = best_iou;
      gt_used[static_cast<std::size_t>(best)] = true;
    }
  }
  for (std::size_t i = 0; i < preds.size(); ++i)
    res.false_positives += res.gt_index[i] < 0 ? 1 : 0;
  return res;
}

std::vector<double> recall_by_threshold(
    const std::vector<MaskPrediction>& preds,
    const std::vector<std::vector<std::uint8_t>>& gts) {
  const auto match = match_predictions(preds, gts);
  std::vector<double> out;
  const double denom =
      static_cast<double>(gts.size() + static_cast<std::size_t>(
                                           match.false_positives));
  for (int t = 0; t < 10; ++t) {
    const double thr = 0.50 + 0.05 * t;
    int tp = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
      // half-ulp slack so an exact-threshold IoU counts on both sides of
      // the float rounding
      if (match.gt_index[i] >= 0 && match.iou[i] >= thr - 1e-12) ++tp;
    out.push_back(denom == 0 ? 1.0 : tp / denom);
  }
  return out;
}

double ap_mask_surrogate(const std::vector<MaskPrediction>& preds,
                         const std::vector<std::vector<std::uint8_t>>& gts) {
  const auto r = recall_by_threshold(preds, gts);
  return std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(
                                                        r.size());
}

double ap_key_surrogate(const std::vector<KeypointPrediction>& preds,
                        const std::vector<synth::Instance>& gts,
                        double radius_fraction) {
  if (radius_fraction <= 0)
    throw ValueError("ap_key_surrogate: radius_fraction must be > 0");
  std::vector<const KeypointPrediction*> by_gt(gts.size(), nullptr);
  for (const auto& p : preds)
    if (p.matched_gt >= 0 && p.matched_gt < static_cast<int>(gts.size()) &&
        !by_gt[static_cast<std::size_t>(p.matched_gt)])
      by_gt[static_cast<std::size_t>(p.matched_gt)] = &p;

  std::size_t total = 0, hits = 0;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const auto& inst = gts[g];
    const double dx = inst.bbox[2] - inst.bbox[0];
    const double dy = inst.bbox[3] - inst.bbox[1];
    const double radius = radius_fraction * std::sqrt(dx * dx + dy * dy);
    for (std::size_t k = 0; k < inst.keypoints.size(); ++k) {
      if (inst.visibility[k] == synth::Visibility::absent) continue;
      ++total;
      const auto* pred = by_gt[g];
      if (!pred || k >= pred->points.size()) continue;
      const double ex = pred->points[k][0] - inst.keypoints[k][0];
      const double ey = pred->points[k][1] - inst.keypoints[k][1];
      if (std::sqrt(ex * ex + ey * ey) <= radius) ++hits;
    }
  }
  return total == 0 ? 1.0 : static_cast<double>(hits) / total;
}

KeypointPrediction decode_keypoints(const float* heatmaps, int ck,
                                    model::Variant variant,
                                    const std::array<double, 4>& box,
                                    int matched_gt) {
  const int k_count = variant == model::Variant::mrcnn ? ck : ck / 3;
  KeypointPrediction out;
  out.matched_gt = matched_gt;
  for (int k = 0; k < k_count; ++k) {
    const float* h =
        heatmaps +
        static_cast<std::size_t>(adapt::location_channel(variant, k)) * 3136;
    int arg = 0;
    float mx = h[0];
    for (int c = 1; c < 3136; ++c)
      if (h[c] > mx) {
        mx = h[c];
        arg = c;
      }
    const int row = arg / 56, col = arg % 56;
    out.points.push_back(
        {box[0] + (box[2] - box[0]) * col / 55.0,
         box[1] + (box[3] - box[1]) * row / 55.0});
  }
  return out;
}

Summary aggregate(const std::vector<SeedMetrics>& per_seed) {
  if (per_seed.empty()) throw ValueError("aggregate: no seeds");
  Summary s;
  s.per_seed = per_seed;
  auto agg = [&](auto field) {
    Aggregate a;
    double sum = 0;
    for (const auto& m : per_seed) sum += m.*field;
    a.mean = sum / static_cast<double>(per_seed.size());
    if (per_seed.size() >= 2) {
      double sq = 0;
      for (const auto& m : per_seed) {
        const double d = m.*field - a.mean;
        sq += d * d;
      }
      a.stddev = std::sqrt(sq / static_cast<double>(per_seed.size()));
      a.has_std = true;
    }
    return a;
  };
  s.miou = agg(&SeedMetrics::miou);
  s.ap_mask = agg(&SeedMetrics::ap_mask);
  s.ap_key = agg(&SeedMetrics::ap_key);
  return s;
}

}  // namespace kpal::metrics
