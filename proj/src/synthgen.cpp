#include "kpal/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "kpal/rng.hpp"

namespace kpal::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Vec2 {
  double x = 0, y = 0;
};

struct Capsule {
  Vec2 a, b;
  double r;
};
struct Disk {
  Vec2 c;
  double r;
};
struct Quad {
  std::array<Vec2, 4> v;  // convex, CCW or CW
};

// One articulated stick figure: torso quad, head disk, limb capsules, plus
// the 17 COCO keypoints that generated them.
struct Figure {
  std::vector<Capsule> capsules;
  Disk head{};
  Quad torso{};
  std::array<Vec2, kCocoKeypoints> kps{};
  std::array<double, 4> bbox{};
  double scale = 0;
};

double dist_point_segment(const Vec2& p, const Vec2& a, const Vec2& b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double px = a.x + t * dx - p.x, py = a.y + t * dy - p.y;
  return std::sqrt(px * px + py * py);
}

bool point_in_quad(const Vec2& p, const Quad& q) {
  // consistent-side test for a convex quad
  int sign = 0;
  for (int i = 0; i < 4; ++i) {
    const Vec2& a = q.v[static_cast<std::size_t>(i)];
    const Vec2& b = q.v[static_cast<std::size_t>((i + 1) % 4)];
    const double cr = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    if (cr > 1e-12) {
      if (sign < 0) return false;
      sign = 1;
    } else if (cr < -1e-12) {
      if (sign > 0) return false;
      sign = -1;
    }
  }
  return true;
}

bool figure_covers(const Figure& f, double x, double y) {
  const Vec2 p{x, y};
  const double dx = p.x - f.head.c.x, dy = p.y - f.head.c.y;
  if (dx * dx + dy * dy <= f.head.r * f.head.r) return true;
  if (point_in_quad(p, f.torso)) return true;
  for (const auto& c : f.capsules)
    if (dist_point_segment(p, c.a, c.b) <= c.r) return true;
  return false;
}

// Brightness factor of the body part under (x, y). Left and right limbs get
// distinct shades (like sleeves catching light from one side) so a pixel
// patch carries the side information a mirror-symmetric figure would lack.
double part_shade(const Figure& f, double x, double y) {
  const Vec2 p{x, y};
  // capsule layout: 0-1 bars, 2-3 torso sides, 4-5 left arm, 6-7 right arm,
  // 8-9 left leg, 10-11 right leg, 12 neck
  static constexpr double kLimbShade[] = {0.80, 0.80, 1.22, 1.22,
                                          0.88, 0.88, 1.14, 1.14};
  for (std::size_t i = 4; i < 12; ++i)
    if (dist_point_segment(p, f.capsules[i].a, f.capsules[i].b) <=
        f.capsules[i].r)
      return kLimbShade[i - 4];
  const double dx = p.x - f.head.c.x, dy = p.y - f.head.c.y;
  if (dx * dx + dy * dy <= f.head.r * f.head.r) return 1.06;
  return 1.0;
}

// Builds a figure at center (cx, cy) with the given pixel scale (full body
// height). Pose angles come from rng.
Figure build_figure(double cx, double cy, double scale, double limb_w,
                    Rng& rng) {
  Figure f;
  f.scale = scale;
  const double rot = rng.uniform(-0.6, 0.6);
  const double cr = std::cos(rot), sr = std::sin(rot);
  auto place = [&](double lx, double ly) {
    return Vec2{cx + scale * (lx * cr - ly * sr),
                cy + scale * (lx * sr + ly * cr)};
  };

  const double sh_y = -0.30, hip_y = 0.05, sh_w = 0.16, hip_w = 0.10;
  const Vec2 nose_l{0.0, -0.42};

  auto& k = f.kps;
  k[0] = place(nose_l.x, nose_l.y);
  k[1] = place(-0.035, -0.455);  // left eye
  k[2] = place(0.035, -0.455);
  k[3] = place(-0.075, -0.435);  // left ear
  k[4] = place(0.075, -0.435);
  k[5] = place(-sh_w, sh_y);  // shoulders
  k[6] = place(sh_w, sh_y);
  k[11] = place(-hip_w, hip_y);  // hips
  k[12] = place(hip_w, hip_y);

  // arms: shoulder -> elbow -> wrist
  for (int side = 0; side < 2; ++side) {
    const double s = side == 0 ? -1.0 : 1.0;
    const double a1 = rng.uniform(0.05, 1.9);  // from straight-down, outward
    const double a2 = a1 + rng.uniform(-1.3, 0.9);
    const double ua = 0.19, fa = 0.17;
    const Vec2 sh{side == 0 ? -sh_w : sh_w, sh_y};
    const Vec2 el{sh.x + s * ua * std::sin(a1), sh.y + ua * std::cos(a1)};
    const Vec2 wr{el.x + s * fa * std::sin(a2), el.y + fa * std::cos(a2)};
    k[7 + side] = place(el.x, el.y);
    k[9 + side] = place(wr.x, wr.y);
  }
  // legs: hip -> knee -> ankle
  for (int side = 0; side < 2; ++side) {
    const double s = side == 0 ? -1.0 : 1.0;
    const double a1 = rng.uniform(-0.55, 0.85);
    const double a2 = a1 + rng.uniform(-0.8, 0.5);
    const double ul = 0.22, ll = 0.22;
    const Vec2 hp{side == 0 ? -hip_w : hip_w, hip_y};
    const Vec2 kn{hp.x + s * ul * std::sin(a1), hp.y + ul * std::cos(a1)};
    const Vec2 an{kn.x + s * ll * std::sin(a2), kn.y + ll * std::cos(a2)};
    k[13 + side] = place(kn.x, kn.y);
    k[15 + side] = place(an.x, an.y);
  }

  f.head = Disk{k[0], 0.14 * scale};
  // torso drawn wider than the shoulder/hip keypoint span so the body reads
  // as a solid region that genuinely hides whatever sits behind it
  f.torso = Quad{{place(-1.7 * sh_w, sh_y - 0.03), place(1.7 * sh_w, sh_y - 0.03),
                  place(1.9 * hip_w, hip_y + 0.05),
                  place(-1.9 * hip_w, hip_y + 0.05)}};
  const double r = limb_w * 0.5;
  const double ru = r * 1.4;  // upper limbs are beefier than forearms/shins
  f.capsules = {
      {k[5], k[6], r},    {k[11], k[12], r},  // shoulder and hip bars
      {k[5], k[11], r},   {k[6], k[12], r},   // torso sides
      {k[5], k[7], ru},   {k[7], k[9], r},    // left arm
      {k[6], k[8], ru},   {k[8], k[10], r},   // right arm
      {k[11], k[13], ru}, {k[13], k[15], r},  // left leg
      {k[12], k[14], ru}, {k[14], k[16], r},  // right leg
      {k[0], place(0.0, sh_y), r},            // neck
  };

  double x0 = 1e18, y0 = 1e18, x1 = -1e18, y1 = -1e18;
  auto grow = [&](double x, double y, double rad) {
    x0 = std::min(x0, x - rad);
    y0 = std::min(y0, y - rad);
    x1 = std::max(x1, x + rad);
    y1 = std::max(y1, y + rad);
  };
  grow(f.head.c.x, f.head.c.y, f.head.r);
  for (const auto& v : f.torso.v) grow(v.x, v.y, 0.0);
  for (const auto& c : f.capsules) {
    grow(c.a.x, c.a.y, c.r);
    grow(c.b.x, c.b.y, c.r);
  }
  f.bbox = {x0, y0, x1, y1};
  return f;
}

double overlap_1d(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

}  // namespace

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double iw = overlap_1d(a[0], a[2], b[0], b[2]);
  const double ih = overlap_1d(a[1], a[3], b[1], b[3]);
  const double inter = iw * ih;
  const double ua = (a[2] - a[0]) * (a[3] - a[1]) +
                    (b[2] - b[0]) * (b[3] - b[1]) - inter;
  return ua > 0 ? inter / ua : 0.0;
}

GenConfig source_preset() {
  GenConfig cfg;
  cfg.occlusion = 0.08;
  cfg.domain_tag = "source";
  return cfg;
}

GenConfig target_preset() {
  GenConfig cfg;
  cfg.occlusion = 0.67;
  // a third figure deepens the occlusion stack without moving the pairwise
  // overlap statistic
  cfg.max_instances = 3;
  cfg.domain_tag = "target";
  return cfg;
}

Scene generate_scene(const GenConfig& cfg, std::uint64_t seed) {
  Rng rng = Rng(0xC0FFEEULL).fork(seed);
  const int h = cfg.height, w = cfg.width;
  Scene scene;
  scene.height = h;
  scene.width = w;
  scene.seed = seed;
  scene.domain_tag = cfg.domain_tag;

  const int count =
      cfg.min_instances +
      static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(
          cfg.max_instances - cfg.min_instances + 1)));

  std::vector<Figure> figures;
  for (int i = 0; i < count; ++i) {
    const double limb_w =
        rng.uniform(cfg.limb_width_min, cfg.limb_width_max);
    bool placed = false;
    // anchored construction places the figure against an existing one at a
    // sampled box IoU; free placement drops it anywhere and tolerates only
    // incidental overlap. Low-occlusion layouts mix the two so the mean
    // stays small while a heavy tail of real overlaps remains. Decided once
    // per figure: retries must not drift toward the easier-to-place branch.
    const bool anchored = i > 0 && cfg.occlusion > 0.0 &&
                          (cfg.occlusion > 0.3 || rng.uniform() < 0.14);
    for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
      double scale = rng.uniform(cfg.figure_scale_min, cfg.figure_scale_max) *
                     cfg.height;
      // free layouts need spare room: start smaller and shrink on retries
      if (i > 0 && !anchored)
        scale *= std::max(0.40, 0.80 - 0.006 * attempt);
      // freeze the pose so the probe figure and the placed figure are exact
      // translates of each other
      const std::uint64_t pose_seed = rng.next_u64();
      Rng probe_rng(pose_seed);
      Figure trial = build_figure(0, 0, scale, limb_w, probe_rng);
      double cx, cy;
      if (i == 0) {
        cx = rng.uniform(0.25 * w, 0.75 * w);
        cy = rng.uniform(0.35 * h, 0.65 * h);
      } else if (!anchored) {
        cx = rng.uniform(0.1 * w, 0.9 * w);
        cy = rng.uniform(0.22 * h, 0.78 * h);
      } else {
        const Figure& anchor = figures[rng.uniform_int(figures.size())];
        if (cfg.occlusion > 0.3) {
          // size diversity keeps the overlapping pair from being twins
          // while staying inside the feasible IoU range
          scale = anchor.scale * rng.uniform(0.84, 1.16);
          Rng rescaled(pose_seed);
          trial = build_figure(0, 0, scale, limb_w, rescaled);
        }
        const double nominal = cfg.occlusion > 0.3 ? cfg.occlusion : 0.5;
        const double target_iou =
            std::clamp(rng.normal(nominal, cfg.occlusion > 0.3 ? 0.06 : 0.07),
                       0.0, 0.9);
        const double wa = anchor.bbox[2] - anchor.bbox[0];
        const double ha = anchor.bbox[3] - anchor.bbox[1];
        const double wb = trial.bbox[2] - trial.bbox[0];
        const double hb = trial.bbox[3] - trial.bbox[1];
        const double sa = wa * ha, sb = wb * hb;
        double inter = target_iou * (sa + sb) / (1.0 + target_iou);
        const double wmin = std::min(wa, wb), hmin = std::min(ha, hb);
        inter = std::min(inter, 0.98 * wmin * hmin);
        double iw, ih;
        if (inter <= 0) {
          iw = ih = 0;
        } else {
          const double lo = inter / hmin;
          iw = rng.uniform(std::min(lo, wmin), wmin);
          ih = inter / iw;
        }
        const double sx = rng.uniform() < 0.5 ? -1.0 : 1.0;
        const double sy = rng.uniform() < 0.5 ? -1.0 : 1.0;
        const double acx = 0.5 * (anchor.bbox[0] + anchor.bbox[2]);
        const double acy = 0.5 * (anchor.bbox[1] + anchor.bbox[3]);
        // trial was built at origin; its box center offset from (0,0)
        const double tcx = 0.5 * (trial.bbox[0] + trial.bbox[2]);
        const double tcy = 0.5 * (trial.bbox[1] + trial.bbox[3]);
        cx = acx + sx * (0.5 * (wa + wb) - iw) - tcx;
        cy = acy + sy * (0.5 * (ha + hb) - ih) - tcy;
      }
      Rng place_rng(pose_seed);
      Figure fig = build_figure(cx, cy, scale, limb_w, place_rng);
      // require most of the figure inside the image
      const double bw = fig.bbox[2] - fig.bbox[0];
      const double bh = fig.bbox[3] - fig.bbox[1];
      const double in_frac =
          (overlap_1d(fig.bbox[0], fig.bbox[2], 0, w - 1) *
           overlap_1d(fig.bbox[1], fig.bbox[3], 0, h - 1)) /
          (bw * bh);
      const double need = i == 0 ? 0.85 : 0.60;
      if (in_frac < need) continue;
      if (i > 0 && !anchored) {
        // free placements may touch but must not genuinely overlap
        const double cap = cfg.occlusion <= 0.0 ? 0.0 : 0.05;
        bool ok = true;
        for (const auto& other : figures)
          if (box_iou(fig.bbox, other.bbox) > cap) ok = false;
        if (!ok) continue;
      }
      figures.push_back(fig);
      placed = true;
    }
    if (!placed && static_cast<int>(figures.size()) < cfg.min_instances)
      throw PlacementError(
          "generate_scene: could not place minimum instance count " +
          std::to_string(cfg.min_instances) + " (seed " +
          std::to_string(seed) + ")");
    if (!placed) break;
  }

  const int n_inst = static_cast<int>(figures.size());
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  // background: low-frequency value noise
  scene.image.assign(3 * plane, 0.0f);
  const int gn = 8;
  std::vector<double> grid(3 * gn * gn);
  for (auto& g : grid) g = 0.10 + cfg.background_texture * rng.uniform();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double fy = static_cast<double>(y) * (gn - 1) / (h - 1);
        const double fx = static_cast<double>(x) * (gn - 1) / (w - 1);
        const int y0 = std::min(static_cast<int>(fy), gn - 2);
        const int x0 = std::min(static_cast<int>(fx), gn - 2);
        const double wy = fy - y0, wx = fx - x0;
        const double* g = grid.data() + static_cast<std::size_t>(c) * gn * gn;
        const double v =
            (1 - wy) * ((1 - wx) * g[y0 * gn + x0] + wx * g[y0 * gn + x0 + 1]) +
            wy * ((1 - wx) * g[(y0 + 1) * gn + x0] +
                  wx * g[(y0 + 1) * gn + x0 + 1]);
        scene.image[static_cast<std::size_t>(c) * plane + y * w + x] =
            static_cast<float>(v);
      }

  // figure colors from a shared palette so appearance alone cannot separate
  // overlapping people
  std::vector<std::array<double, 3>> colors;
  for (int i = 0; i < n_inst; ++i) {
    std::array<double, 3> base{0.62, 0.52, 0.44};
    for (auto& c : base)
      c = std::clamp(c + cfg.color_jitter * rng.uniform(-1.0, 1.0), 0.05,
                     0.95);
    colors.push_back(base);
  }

  // rasterize back-to-front; owner = index of the topmost figure per pixel
  std::vector<int> owner(plane, -1);
  std::vector<std::vector<std::uint8_t>> amodal(
      static_cast<std::size_t>(n_inst));
  for (int i = 0; i < n_inst; ++i) {
    amodal[static_cast<std::size_t>(i)].assign(plane, 0);
    const Figure& f = figures[static_cast<std::size_t>(i)];
    const int x0 = std::max(0, static_cast<int>(std::floor(f.bbox[0])));
    const int y0 = std::max(0, static_cast<int>(std::floor(f.bbox[1])));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(f.bbox[2])));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(f.bbox[3])));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (figure_covers(f, x, y)) {
          amodal[static_cast<std::size_t>(i)][y * w + x] = 1;
          owner[y * w + x] = i;
          const double shade = part_shade(f, x, y);
          for (int c = 0; c < 3; ++c)
            scene.image[static_cast<std::size_t>(c) * plane + y * w + x] =
                static_cast<float>(std::clamp(
                    colors[static_cast<std::size_t>(i)]
                          [static_cast<std::size_t>(c)] *
                        shade,
                    0.0, 1.0));
        }
  }

  const int kp_count = std::min(cfg.keypoints, kCocoKeypoints);
  for (int i = 0; i < n_inst; ++i) {
    const Figure& f = figures[static_cast<std::size_t>(i)];
    Instance inst;
    inst.bbox = f.bbox;
    inst.depth_rank = i;
    inst.mask.assign(plane, 0);
    for (std::size_t p = 0; p < plane; ++p)
      inst.mask[p] = owner[p] == i ? 1 : 0;
    for (int k = 0; k < kp_count; ++k) {
      const Vec2& kp = f.kps[static_cast<std::size_t>(k)];
      inst.keypoints.push_back({kp.x, kp.y});
      const long px = std::lround(kp.x), py = std::lround(kp.y);
      Visibility vis;
      if (px < 0 || px >= w || py < 0 || py >= h) {
        vis = Visibility::absent;
      } else if (owner[py * w + px] == i) {
        vis = Visibility::visible;
      } else {
        vis = Visibility::occluded;
      }
      inst.visibility.push_back(vis);
    }
    scene.instances.push_back(std::move(inst));
  }

  scene.proposals = make_proposals(scene, cfg.box_jitter, cfg.distractor_rate,
                                   seed ^ 0x9E3779B9ULL, cfg.score_noise);
  return scene;
}

Dataset generate_dataset(const GenConfig& cfg,
                         const std::vector<std::uint64_t>& seeds,
                         const std::string& split) {
  Dataset ds;
  ds.config = cfg;
  ds.split = split;
  ds.seeds = seeds;
  ds.scenes.reserve(seeds.size());
  for (auto s : seeds) ds.scenes.push_back(generate_scene(cfg, s));
  return ds;
}

std::vector<Proposal> make_proposals(const Scene& scene, double jitter,
                                     double distractor_rate,
                                     std::uint64_t rng_seed,
                                     double score_noise) {
  Rng rng = Rng(0xB0B0ULL).fork(rng_seed);
  std::vector<Proposal> props;
  for (std::size_t i = 0; i < scene.instances.size(); ++i) {
    const auto& gt = scene.instances[i].bbox;
    Proposal p;
    for (int c = 0; c < 4; ++c)
      p.bbox[static_cast<std::size_t>(c)] =
          gt[static_cast<std::size_t>(c)] + rng.uniform(-jitter, jitter);
    if (p.bbox[2] <= p.bbox[0] + 1) p.bbox[2] = p.bbox[0] + 1;
    if (p.bbox[3] <= p.bbox[1] + 1) p.bbox[3] = p.bbox[1] + 1;
    double s = box_iou(p.bbox, gt);
    if (score_noise > 0) s += rng.normal(0.0, score_noise);
    p.score = std::clamp(s, 0.0, 1.0);
    p.matched_gt = static_cast<int>(i);
    props.push_back(p);
  }
  const int extra = distractor_rate > 0 ? rng.poisson(distractor_rate) : 0;
  for (int d = 0; d < extra; ++d) {
    Proposal p;
    const double bw = rng.uniform(0.15, 0.5) * scene.width;
    const double bh = rng.uniform(0.15, 0.5) * scene.height;
    const double cx = rng.uniform(0.0, scene.width - 1.0);
    const double cy = rng.uniform(0.0, scene.height - 1.0);
    p.bbox = {cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2};
    p.score = rng.uniform(0.05, 0.45);
    p.matched_gt = -1;
    props.push_back(p);
  }
  return props;
}

MaxIouStats max_iou_stats(const Dataset& ds) {
  if (ds.scenes.empty())
    throw ValueError("max_iou_stats: empty dataset");
  MaxIouStats st;
  st.histogram.assign(10, 0);
  double sum = 0.0;
  for (const auto& scene : ds.scenes) {
    for (std::size_t i = 0; i < scene.instances.size(); ++i) {
      double mx = 0.0;
      for (std::size_t j = 0; j < scene.instances.size(); ++j)
        if (j != i)
          mx = std::max(mx, box_iou(scene.instances[i].bbox,
                                    scene.instances[j].bbox));
      st.per_instance.push_back(mx);
      sum += mx;
      st.histogram[static_cast<std::size_t>(
          std::min(9, static_cast<int>(mx * 10)))]++;
    }
  }
  st.mean = st.per_instance.empty()
                ? 0.0
                : sum / static_cast<double>(st.per_instance.size());
  return st;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kFormatVersion = 1;
constexpr char kMagic[4] = {'K', 'P', 'A', 'L'};

json config_to_json(const GenConfig& c) {
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

GenConfig config_from_json(const json& j) {
  GenConfig c;
  c.height = j.at("height");
  c.width = j.at("width");
  c.min_instances = j.at("min_instances");
  c.max_instances = j.at("max_instances");
  c.occlusion = j.at("occlusion");
  c.keypoints = j.at("keypoints");
  c.box_jitter = j.at("box_jitter");
  c.distractor_rate = j.at("distractor_rate");
  c.score_noise = j.at("score_noise");
  c.limb_width_min = j.at("limb_width_min");
  c.limb_width_max = j.at("limb_width_max");
  c.color_jitter = j.at("color_jitter");
  c.background_texture = j.at("background_texture");
  c.figure_scale_min = j.at("figure_scale_min");
  c.figure_scale_max = j.at("figure_scale_max");
  c.domain_tag = j.at("domain_tag");
  return c;
}

template <typename T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void get(std::ifstream& is, T& v, const std::string& path) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CorruptFileError("truncated scene record: " + path);
}

void get_bytes(std::ifstream& is, void* dst, std::size_t n,
               const std::string& path) {
  is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (!is) throw CorruptFileError("truncated scene record: " + path);
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  json manifest{{"format_version", kFormatVersion},
                {"split", ds.split},
                {"config", config_to_json(ds.config)},
                {"seeds", ds.seeds}};
  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";

  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    const Scene& s = ds.scenes[i];
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%05zu.bin", i);
    std::ofstream os(fs::path(dir) / name, std::ios::binary);
    os.write(kMagic, 4);
    put(os, kFormatVersion);
    put(os, static_cast<std::uint32_t>(s.height));
    put(os, static_cast<std::uint32_t>(s.width));
    put(os, static_cast<std::uint32_t>(s.instances.size()));
    const std::uint32_t k =
        s.instances.empty()
            ? 0
            : static_cast<std::uint32_t>(s.instances[0].keypoints.size());
    put(os, k);
    put(os, static_cast<std::uint32_t>(s.proposals.size()));
    put(os, s.seed);
    put(os, static_cast<std::uint8_t>(s.domain_tag == "target" ? 1 : 0));
    os.write(reinterpret_cast<const char*>(s.image.data()),
             static_cast<std::streamsize>(s.image.size() * sizeof(float)));
    for (const auto& inst : s.instances) {
      for (double b : inst.bbox) put(os, static_cast<float>(b));
      put(os, static_cast<std::int32_t>(inst.depth_rank));
      os.write(reinterpret_cast<const char*>(inst.mask.data()),
               static_cast<std::streamsize>(inst.mask.size()));
      for (const auto& kp : inst.keypoints) {
        put(os, static_cast<float>(kp[0]));
        put(os, static_cast<float>(kp[1]));
      }
      for (auto v : inst.visibility) put(os, static_cast<std::uint8_t>(v));
    }
    for (const auto& p : s.proposals) {
      for (double b : p.bbox) put(os, static_cast<float>(b));
      put(os, static_cast<float>(p.score));
      put(os, static_cast<std::int32_t>(p.matched_gt));
    }
  }
}

Dataset load_dataset(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream mf(mpath);
  if (!mf) throw CorruptFileError("missing manifest: " + mpath.string());
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw CorruptFileError("unreadable manifest: " + std::string(e.what()));
  }
  if (manifest.at("format_version").get<std::uint32_t>() != kFormatVersion)
    throw VersionError("dataset format version mismatch in " +
                       mpath.string());
  Dataset ds;
  ds.split = manifest.at("split");
  ds.config = config_from_json(manifest.at("config"));
  ds.seeds = manifest.at("seeds").get<std::vector<std::uint64_t>>();

  for (std::size_t i = 0; i < ds.seeds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%05zu.bin", i);
    const std::string path = (fs::path(dir) / name).string();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CorruptFileError("missing scene record: " + path);
    char magic[4];
    get_bytes(is, magic, 4, path);
    if (std::memcmp(magic, kMagic, 4) != 0)
      throw CorruptFileError("bad magic in " + path);
    std::uint32_t version;
    get(is, version, path);
    if (version != kFormatVersion)
      throw VersionError("scene record version mismatch in " + path);
    std::uint32_t h, w, n_inst, k, n_prop;
    std::uint64_t seed;
    std::uint8_t tag;
    get(is, h, path);
    get(is, w, path);
    get(is, n_inst, path);
    get(is, k, path);
    get(is, n_prop, path);
    get(is, seed, path);
    get(is, tag, path);
    Scene s;
    s.height = static_cast<int>(h);
    s.width = static_cast<int>(w);
    s.seed = seed;
    s.domain_tag = tag ? "target" : "source";
    s.image.resize(static_cast<std::size_t>(3) * h * w);
    get_bytes(is, s.image.data(), s.image.size() * sizeof(float), path);
    for (std::uint32_t ii = 0; ii < n_inst; ++ii) {
      Instance inst;
      for (int c = 0; c < 4; ++c) {
        float b;
        get(is, b, path);
        inst.bbox[static_cast<std::size_t>(c)] = b;
      }
      std::int32_t rank;
      get(is, rank, path);
      inst.depth_rank = rank;
      inst.mask.resize(static_cast<std::size_t>(h) * w);
      get_bytes(is, inst.mask.data(), inst.mask.size(), path);
      for (std::uint32_t kk = 0; kk < k; ++kk) {
        float x, y;
        get(is, x, path);
        get(is, y, path);
        inst.keypoints.push_back({x, y});
      }
      for (std::uint32_t kk = 0; kk < k; ++kk) {
        std::uint8_t v;
        get(is, v, path);
        if (v > 2) throw CorruptFileError("bad visibility code in " + path);
        inst.visibility.push_back(static_cast<Visibility>(v));
      }
      s.instances.push_back(std::move(inst));
    }
    for (std::uint32_t pp = 0; pp < n_prop; ++pp) {
      Proposal p;
      for (int c = 0; c < 4; ++c) {
        float b;
        get(is, b, path);
        p.bbox[static_cast<std::size_t>(c)] = b;
      }
      float sc;
      get(is, sc, path);
      p.score = sc;
      std::int32_t mg;
      get(is, mg, path);
      p.matched_gt = mg;
      s.proposals.push_back(p);
    }
    ds.scenes.push_back(std::move(s));
  }
  return ds;
}

}  // namespace kpal::synth
