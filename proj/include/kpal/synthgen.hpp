#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "kpal/tensor.hpp"

namespace kpal::synth {

struct PlacementError : ValueError {
  using ValueError::ValueError;
};
struct CorruptFileError : ValueError {
  using ValueError::ValueError;
};
struct VersionError : ValueError {
  using ValueError::ValueError;
};

enum class Visibility : std::uint8_t { visible = 0, occluded = 1, absent = 2 };

// COCO keypoint order: nose, eyes, ears, shoulders, elbows, wrists, hips,
// knees, ankles (left before right).
constexpr int kCocoKeypoints = 17;

struct Instance {
  std::array<double, 4> bbox{};  // amodal x0,y0,x1,y1 in pixels
  std::vector<std::uint8_t> mask;  // visible region, H*W row-major
  std::vector<std::array<double, 2>> keypoints;  // (x, y) per keypoint
  std::vector<Visibility> visibility;
  int depth_rank = 0;  // larger = nearer to camera (drawn later)
};

struct Proposal {
  std::array<double, 4> bbox{};
  double score = 0.0;
  int matched_gt = -1;  // -1 = distractor
};

struct Scene {
  int height = 0, width = 0;
  std::vector<float> image;  // 3 planes, H*W each, values in [0,1]
  std::vector<Instance> instances;
  std::vector<Proposal> proposals;
  std::uint64_t seed = 0;
  std::string domain_tag;  // "source" or "target"
};

struct GenConfig {
  int height = 64, width = 64;
  int min_instances = 2, max_instances = 2;
  double occlusion = 0.08;  // target mean pairwise box MaxIoU
  int keypoints = kCocoKeypoints;
  double box_jitter = 2.0;       // proposal jitter magnitude, px
  double distractor_rate = 0.5;  // Poisson mean of distractor proposals
  double score_noise = 0.05;
  double limb_width_min = 2.6, limb_width_max = 3.8;
  double color_jitter = 0.10;
  double background_texture = 0.20;
  double figure_scale_min = 0.50, figure_scale_max = 0.70;  // of image height
  std::string domain_tag = "source";
};

struct Dataset {
  std::vector<Scene> scenes;
  GenConfig config;
  std::string split;
  std::vector<std::uint64_t> seeds;
};

struct MaxIouStats {
  std::vector<double> per_instance;  // flattened over scenes
  double mean = 0.0;
  std::vector<int> histogram;  // 10 bins over [0,1]
};

GenConfig source_preset();
GenConfig target_preset();

Scene generate_scene(const GenConfig& cfg, std::uint64_t seed);
Dataset generate_dataset(const GenConfig& cfg,
                         const std::vector<std::uint64_t>& seeds,
                         const std::string& split);

std::vector<Proposal> make_proposals(const Scene& scene, double jitter,
                                     double distractor_rate,
                                     std::uint64_t rng_seed,
                                     double score_noise = 0.0);

MaxIouStats max_iou_stats(const Dataset& ds);

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b);

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace kpal::synth
