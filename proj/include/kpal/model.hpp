#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kpal/ops.hpp"
#include "kpal/rng.hpp"
#include "kpal/synthgen.hpp"
#include "kpal/tensor.hpp"

namespace kpal::model {

struct CheckpointError : ValueError {
  using ValueError::ValueError;
};

enum class Variant { mrcnn, v1, v2, v3 };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::mrcnn: return "mrcnn";
    case Variant::v1: return "v1";
    case Variant::v2: return "v2";
    case Variant::v3: return "v3";
  }
  throw ValueError("variant_name: bad enum value");
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "mrcnn") return Variant::mrcnn;
  if (s == "v1") return Variant::v1;
  if (s == "v2") return Variant::v2;
  if (s == "v3") return Variant::v3;
  throw ValueError("unknown variant name: " + s);
}

struct ModelConfig {
  int keypoints = 17;
  int roi_channels = 256;
  std::array<int, 4> backbone_widths{16, 32, 64, 256};
  int kp_tower_width = 32;   // hidden width of the conv tower (mrcnn/v1)
  int kp_fe_channels = 512;  // tower output width (mrcnn/v1)
  int mask_width = 32;
  int decoder_layers = 6;
  int decoder_heads = 8;
  int decoder_width = 256;
  int decoder_ffn = 512;
  int v3_value_channels = 7;  // per-keypoint channels derived from values
};

// fe output channel count per variant
inline int fe_channels(Variant v, const ModelConfig& c) {
  switch (v) {
    case Variant::mrcnn:
    case Variant::v1: return c.kp_fe_channels;
    case Variant::v2: return 3 * c.keypoints;
    case Variant::v3:
      return (c.decoder_heads + c.v3_value_channels) * c.keypoints;
  }
  throw ValueError("fe_channels: bad variant");
}

inline int heatmap_channels(Variant v, const ModelConfig& c) {
  return v == Variant::mrcnn ? c.keypoints : 3 * c.keypoints;
}

template <typename T>
struct ModelBundle {
  Variant variant = Variant::mrcnn;
  bool ttg_enabled = false;
  ModelConfig config;
  // sorted by name: deterministic enumeration for SGD and checkpoints
  std::map<std::string, Tensor<T>> params;
  // all keypoint-head names below this prefix belong to the fe stage; the
  // rest of "kp." is the reg stage
  std::string fe_prefix = "kp.fe.";

  Tensor<T>& p(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ValueError("missing parameter: " + name);
    return it->second;
  }
  const Tensor<T>& p(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ValueError("missing parameter: " + name);
    return it->second;
  }

  std::vector<Tensor<T>*> params_with_prefix(const std::string& prefix) {
    std::vector<Tensor<T>*> out;
    for (auto& [name, t] : params)
      if (name.rfind(prefix, 0) == 0) out.push_back(&t);
    return out;
  }

  void set_requires_grad(const std::string& prefix, bool flag) {
    for (auto* t : params_with_prefix(prefix)) t->set_requires_grad(flag);
  }

  ModelBundle clone() const {
    ModelBundle c;
    c.variant = variant;
    c.ttg_enabled = ttg_enabled;
    c.config = config;
    c.fe_prefix = fe_prefix;
    for (const auto& [name, t] : params) c.params.emplace(name, t.clone());
    return c;
  }
};

template <typename T>
struct RoiFeature {
  Tensor<T> features;  // [N, C, 14, 14]
  std::vector<synth::Proposal> proposals;
};

template <typename T>
struct KeypointOutput {
  Tensor<T> heatmaps;  // [N, Ck, 56, 56]; per keypoint [location, vis, occ]
  Tensor<T> fe;        // [N, Cfe, 14, 14]
  Tensor<T> last_attn;  // [N*heads, Q, T] rows of the final cross-attention
                        // (v2/v3 only, else empty)
};

template <typename T>
using MaskOutput = Tensor<T>;  // [N, 1, 28, 28]

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void add_param(ModelBundle<T>& m, const std::string& name, const Shape& shape,
               double fan_in, Rng& rng) {
  auto t = Tensor<T>::zeros(shape);
  if (fan_in > 0) {
    const double sd = std::sqrt(2.0 / fan_in);
    for (auto& v : *t.data) v = static_cast<T>(rng.normal(0.0, sd));
  }
  m.params.emplace(name, std::move(t));
}

template <typename T>
void add_attention(ModelBundle<T>& m, const std::string& prefix, int d,
                   Rng& rng) {
  for (const char* n : {"wq", "wk", "wv", "wo"})
    add_param(m, prefix + n, {d, d}, d, rng);
  for (const char* n : {"bq", "bk", "bv", "bo"})
    add_param(m, prefix + n, {d}, 0, rng);
}

template <typename T>
void add_decoder(ModelBundle<T>& m, const ModelConfig& c, Rng& rng) {
  const int d = c.decoder_width;
  add_param(m, "kp.fe.query", {c.keypoints, d}, d, rng);
  if (c.roi_channels != d)
    add_param(m, "kp.fe.mem_proj.w", {c.roi_channels, d}, c.roi_channels,
              rng);
  for (int l = 0; l < c.decoder_layers; ++l) {
    const std::string pre = "kp.fe.l" + std::to_string(l) + ".";
    add_attention(m, pre + "self.", d, rng);
    add_attention(m, pre + "cross.", d, rng);
    for (const char* ln : {"ln1.", "ln2.", "ln3."}) {
      auto g = Tensor<T>::full({d}, T(1));
      m.params.emplace(pre + ln + std::string("g"), std::move(g));
      add_param(m, pre + ln + std::string("b"), {d}, 0, rng);
    }
    add_param(m, pre + "ffn.w1", {d, c.decoder_ffn}, d, rng);
    add_param(m, pre + "ffn.b1", {c.decoder_ffn}, 0, rng);
    add_param(m, pre + "ffn.w2", {c.decoder_ffn, d}, c.decoder_ffn, rng);
    add_param(m, pre + "ffn.b2", {d}, 0, rng);
  }
}

}  // namespace detail

template <typename T>
ModelBundle<T> make_model(Variant variant, bool ttg, const ModelConfig& cfg,
                          Rng& rng) {
  if (cfg.decoder_width % cfg.decoder_heads != 0)
    throw ValueError("decoder width must divide by head count");
  ModelBundle<T> m;
  m.variant = variant;
  m.ttg_enabled = ttg;
  m.config = cfg;

  using detail::add_param;
  int prev = 3;
  for (int s = 0; s < 4; ++s) {
    const int w = cfg.backbone_widths[static_cast<std::size_t>(s)];
    const std::string pre = "backbone.stage" + std::to_string(s) + ".";
    add_param(m, pre + "w", {w, prev, 3, 3}, 9.0 * prev, rng);
    add_param(m, pre + "b", {w}, 0, rng);
    prev = w;
  }
  if (prev != cfg.roi_channels)
    throw ValueError("last backbone width must equal roi_channels");

  const int k = cfg.keypoints;
  switch (variant) {
    case Variant::mrcnn:
    case Variant::v1: {
      const int tw = cfg.kp_tower_width;
      int cin = cfg.roi_channels;
      for (int i = 0; i < 8; ++i) {
        const int cout = i == 7 ? cfg.kp_fe_channels : tw;
        const std::string pre = "kp.fe.conv" + std::to_string(i) + ".";
        add_param(m, pre + "w", {cout, cin, 3, 3}, 9.0 * cin, rng);
        add_param(m, pre + "b", {cout}, 0, rng);
        cin = cout;
      }
      const int hk = heatmap_channels(variant, cfg);
      add_param(m, "kp.reg.deconv.w", {cfg.kp_fe_channels, hk, 4, 4},
                16.0 * cfg.kp_fe_channels, rng);
      add_param(m, "kp.reg.deconv.b", {hk}, 0, rng);
      break;
    }
    case Variant::v2: {
      detail::add_decoder(m, cfg, rng);
      const int d = cfg.decoder_width;
      add_param(m, "kp.fe.mlp.w1", {d, 512}, d, rng);
      add_param(m, "kp.fe.mlp.b1", {512}, 0, rng);
      add_param(m, "kp.fe.mlp.w2", {512, 512}, 512, rng);
      add_param(m, "kp.fe.mlp.b2", {512}, 0, rng);
      add_param(m, "kp.fe.mlp.w3", {512, 588}, 512, rng);
      add_param(m, "kp.fe.mlp.b3", {588}, 0, rng);
      // per-keypoint groups: each keypoint's 3 channels decode independently
      add_param(m, "kp.reg.deconv.w", {3 * k, 3, 4, 4}, 48.0,
                rng);
      add_param(m, "kp.reg.deconv.b", {3 * k}, 0, rng);
      break;
    }
    case Variant::v3: {
      detail::add_decoder(m, cfg, rng);
      add_param(m, "kp.fe.value_map.w",
                {cfg.decoder_width, cfg.v3_value_channels}, cfg.decoder_width,
                rng);
      add_param(m, "kp.fe.value_map.b", {cfg.v3_value_channels}, 0, rng);
      const int pc = cfg.decoder_heads + cfg.v3_value_channels;  // per kp
      add_param(m, "kp.reg.conv0.w", {10 * k, pc, 3, 3}, 9.0 * pc, rng);
      add_param(m, "kp.reg.conv0.b", {10 * k}, 0, rng);
      add_param(m, "kp.reg.conv1.w", {10 * k, 10, 3, 3}, 90.0, rng);
      add_param(m, "kp.reg.conv1.b", {10 * k}, 0, rng);
      add_param(m, "kp.reg.deconv.w", {10 * k, 3, 4, 4}, 160.0, rng);
      add_param(m, "kp.reg.deconv.b", {3 * k}, 0, rng);
      break;
    }
  }

  const int mask_in =
      cfg.roi_channels + (ttg ? fe_channels(variant, cfg) : 0);
  const int mw = cfg.mask_width;
  add_param(m, "mask.conv0.w", {mw, mask_in, 3, 3}, 9.0 * mask_in, rng);
  add_param(m, "mask.conv0.b", {mw}, 0, rng);
  add_param(m, "mask.conv1.w", {mw, mw, 3, 3}, 9.0 * mw, rng);
  add_param(m, "mask.conv1.b", {mw}, 0, rng);
  add_param(m, "mask.deconv.w", {mw, mw, 2, 2}, 4.0 * mw, rng);
  add_param(m, "mask.deconv.b", {mw}, 0, rng);
  add_param(m, "mask.out.w", {1, mw, 1, 1}, mw, rng);
  add_param(m, "mask.out.b", {1}, 0, rng);
  // start at the foreground-prior logit; a zero bias leaves BCE training on
  // the predict-the-prior plateau for a long, init-dependent stretch
  m.p("mask.out.b")[0] = T(-0.85);
  return m;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// 4 stages of [conv3x3, relu]; stride-2 between stages (total stride 8).
// Returned vector holds all stage outputs; .back() feeds roi_extract and
// "backbone.stage3." is the last-stage freezing scope.
template <typename T>
std::vector<Tensor<T>> backbone_forward(Tape<T>* tp, ModelBundle<T>& m,
                                        const Tensor<T>& image) {
  if (image.ndim() != 4 || image.dim(1) != 3)
    throw ShapeError("backbone_forward: want [1,3,H,W], got " +
                     shape_str(image.shape));
  std::vector<Tensor<T>> stages;
  Tensor<T> x = image;
  for (int s = 0; s < 4; ++s) {
    const std::string pre = "backbone.stage" + std::to_string(s) + ".";
    // stages 1-2 downsample; the final stage keeps resolution so ROI crops
    // retain enough spatial detail for 56x56 heatmaps (total stride 4)
    const int stride = (s == 1 || s == 2) ? 2 : 1;
    x = relu(tp, conv2d(tp, x, m.p(pre + "w"), m.p(pre + "b"), stride, 1));
    stages.push_back(x);
  }
  return stages;
}

// Corner-aligned 14x14 crop of `features` under each proposal box given in
// image coordinates.
template <typename T>
RoiFeature<T> roi_extract(Tape<T>* tp, const Tensor<T>& features,
                          const std::vector<synth::Proposal>& proposals,
                          int image_h, int image_w) {
  if (proposals.empty())
    throw ValueError("roi_extract: no proposals");
  if (features.ndim() != 4 || features.dim(0) != 1)
    throw ShapeError("roi_extract: want [1,C,Hf,Wf], got " +
                     shape_str(features.shape));
  const int c = features.dim(1), hf = features.dim(2), wf = features.dim(3);
  const double sy = image_h > 1 ? double(hf - 1) / (image_h - 1) : 0.0;
  const double sx = image_w > 1 ? double(wf - 1) / (image_w - 1) : 0.0;
  auto plane = features.reshaped({c, hf, wf});
  std::vector<Tensor<T>> crops;
  for (const auto& pr : proposals) {
    std::vector<std::pair<double, double>> pts;
    pts.reserve(196);
    for (int i = 0; i < 14; ++i)
      for (int j = 0; j < 14; ++j) {
        const double y = pr.bbox[1] + (pr.bbox[3] - pr.bbox[1]) * i / 13.0;
        const double x = pr.bbox[0] + (pr.bbox[2] - pr.bbox[0]) * j / 13.0;
        pts.push_back({y * sy, x * sx});
      }
    crops.push_back(bilinear_sample(tp, plane, pts));
  }
  auto flat = concat_flat(tp, crops);
  RoiFeature<T> out;
  out.features =
      flat.reshaped({static_cast<int>(proposals.size()), c, 14, 14});
  out.proposals = proposals;
  return out;
}

namespace detail {

template <typename T>
Tensor<T> attention_block(Tape<T>* tp, ModelBundle<T>& m,
                          const std::string& pre, const Tensor<T>& q,
                          const Tensor<T>& kv, int heads,
                          AttentionOutput<T>* capture = nullptr) {
  AttentionParams<T> p{m.p(pre + "wq"), m.p(pre + "bq"), m.p(pre + "wk"),
                       m.p(pre + "bk"), m.p(pre + "wv"), m.p(pre + "bv"),
                       m.p(pre + "wo"), m.p(pre + "bo")};
  auto res = multi_head_attention(tp, q, kv, kv, heads, p);
  if (capture) *capture = res;
  return res.output;
}

template <typename T>
Tensor<T> ln(Tape<T>* tp, ModelBundle<T>& m, const std::string& pre,
             const Tensor<T>& x) {
  return layer_norm(tp, x, m.p(pre + "g"), m.p(pre + "b"));
}

// Pre-norm transformer decoder over the 17 learned queries with the 196 ROI
// tokens as memory. Returns the decoded queries and (via out params) the last
// cross-attention internals for the attention-map head.
template <typename T>
Tensor<T> run_decoder(Tape<T>* tp, ModelBundle<T>& m, const Tensor<T>& roi_chw,
                      AttentionOutput<T>* last_cross) {
  const ModelConfig& c = m.config;
  const int d = c.decoder_width;
  // [C,14,14] -> tokens [196, C] (-> [196, d] if projected)
  auto tokens = transpose2d(tp, roi_chw.reshaped({c.roi_channels, 196}));
  if (c.roi_channels != d)
    tokens = matmul(tp, tokens, m.p("kp.fe.mem_proj.w"));
  Tensor<T> x = m.p("kp.fe.query");
  for (int l = 0; l < c.decoder_layers; ++l) {
    const std::string pre = "kp.fe.l" + std::to_string(l) + ".";
    auto n1 = ln(tp, m, pre + "ln1.", x);
    x = add(tp, x, attention_block(tp, m, pre + "self.", n1, n1,
                                   c.decoder_heads));
    AttentionOutput<T> cross;
    auto b = attention_block(tp, m, pre + "cross.",
                             ln(tp, m, pre + "ln2.", x), tokens,
                             c.decoder_heads, &cross);
    x = add(tp, x, b);
    if (l == c.decoder_layers - 1 && last_cross) *last_cross = cross;
    auto hidden = relu(
        tp, linear(tp, ln(tp, m, pre + "ln3.", x), m.p(pre + "ffn.w1"),
                   m.p(pre + "ffn.b1")));
    x = add(tp, x,
            linear(tp, hidden, m.p(pre + "ffn.w2"), m.p(pre + "ffn.b2")));
  }
  return x;
}

// v3: per keypoint, stack the 8 per-head attention maps with 7 channels of
// value features gated by that keypoint's mean attention map.
template <typename T>
Tensor<T> v3_assemble(Tape<T>* tp, ModelBundle<T>& m,
                      const AttentionOutput<T>& cross) {
  const ModelConfig& c = m.config;
  const int heads = c.decoder_heads, k = c.keypoints;
  const int t = cross.attn.dim(2);
  // mean attention over heads: [1, K*T]
  auto ones = Tensor<T>::full({1, heads}, static_cast<T>(1.0 / heads));
  auto mean_attn =
      matmul(tp, ones, cross.attn.reshaped({heads, k * t}));
  // value features: [T, d] -> [vc, T]
  auto vf = transpose2d(
      tp, linear(tp, cross.value_proj, m.p("kp.fe.value_map.w"),
                 m.p("kp.fe.value_map.b")));
  const int vc = c.v3_value_channels;
  std::vector<Tensor<T>> parts;
  for (int kp = 0; kp < k; ++kp) {
    std::vector<std::size_t> attn_idx;
    for (int h = 0; h < heads; ++h)
      for (int j = 0; j < t; ++j)
        attn_idx.push_back(static_cast<std::size_t>((h * k + kp) * t + j));
    parts.push_back(gather(tp, cross.attn, attn_idx));

    std::vector<std::size_t> mean_idx, vf_idx;
    for (int v = 0; v < vc; ++v)
      for (int j = 0; j < t; ++j) {
        mean_idx.push_back(static_cast<std::size_t>(kp * t + j));
        vf_idx.push_back(static_cast<std::size_t>(v * t + j));
      }
    auto gated = mul(tp, gather(tp, vf, vf_idx), gather(tp, mean_attn, mean_idx));
    parts.push_back(gated);
  }
  return concat_flat(tp, parts);  // [K * (heads+vc) * T]
}

}  // namespace detail

// m_k^fe: variant-specific feature stage; output [N, Cfe, 14, 14].
template <typename T>
Tensor<T> kp_fe_forward(Tape<T>* tp, ModelBundle<T>& m,
                        const RoiFeature<T>& roi,
                        Tensor<T>* last_attn_out = nullptr) {
  const ModelConfig& c = m.config;
  if (roi.features.dim(1) != c.roi_channels)
    throw ShapeError("kp_fe_forward: roi channels " +
                     std::to_string(roi.features.dim(1)) + " != config " +
                     std::to_string(c.roi_channels));
  const int n = roi.features.dim(0);
  switch (m.variant) {
    case Variant::mrcnn:
    case Variant::v1: {
      Tensor<T> x = roi.features;
      for (int i = 0; i < 8; ++i) {
        const std::string pre = "kp.fe.conv" + std::to_string(i) + ".";
        x = relu(tp, conv2d(tp, x, m.p(pre + "w"), m.p(pre + "b"), 1, 1));
      }
      return x;
    }
    case Variant::v2: {
      std::vector<Tensor<T>> fe_parts, attn_parts;
      for (int i = 0; i < n; ++i) {
        auto one = roi.features.reshaped({n, c.roi_channels * 196});
        std::vector<std::size_t> idx;
        const std::size_t base =
            static_cast<std::size_t>(i) * c.roi_channels * 196;
        for (std::size_t j = 0; j < static_cast<std::size_t>(c.roi_channels) * 196; ++j)
          idx.push_back(base + j);
        auto chw = gather(tp, one, idx).reshaped({c.roi_channels, 14, 14});
        AttentionOutput<T> cross;
        auto q = detail::run_decoder(tp, m, chw, &cross);
        auto h1 = relu(tp, linear(tp, q, m.p("kp.fe.mlp.w1"),
                                  m.p("kp.fe.mlp.b1")));
        auto h2 = relu(tp, linear(tp, h1, m.p("kp.fe.mlp.w2"),
                                  m.p("kp.fe.mlp.b2")));
        auto h3 = linear(tp, h2, m.p("kp.fe.mlp.w3"), m.p("kp.fe.mlp.b3"));
        fe_parts.push_back(h3);  // [K, 588]; rows reshape to 3x14x14
        attn_parts.push_back(cross.attn);
      }
      if (last_attn_out)
        *last_attn_out = concat_flat(tp, attn_parts)
                             .reshaped({n * c.decoder_heads, c.keypoints,
                                        attn_parts[0].dim(2)});
      return concat_flat(tp, fe_parts)
          .reshaped({n, 3 * c.keypoints, 14, 14});
    }
    case Variant::v3: {
      std::vector<Tensor<T>> fe_parts, attn_parts;
      for (int i = 0; i < n; ++i) {
        auto one = roi.features.reshaped({n, c.roi_channels * 196});
        std::vector<std::size_t> idx;
        const std::size_t base =
            static_cast<std::size_t>(i) * c.roi_channels * 196;
        for (std::size_t j = 0; j < static_cast<std::size_t>(c.roi_channels) * 196; ++j)
          idx.push_back(base + j);
        auto chw = gather(tp, one, idx).reshaped({c.roi_channels, 14, 14});
        AttentionOutput<T> cross;
        detail::run_decoder(tp, m, chw, &cross);
        fe_parts.push_back(detail::v3_assemble(tp, m, cross));
        attn_parts.push_back(cross.attn);
      }
      if (last_attn_out)
        *last_attn_out = concat_flat(tp, attn_parts)
                             .reshaped({n * c.decoder_heads, c.keypoints,
                                        attn_parts[0].dim(2)});
      return concat_flat(tp, fe_parts)
          .reshaped({n, fe_channels(m.variant, c), 14, 14});
    }
  }
  throw ValueError("kp_fe_forward: bad variant");
}

// m_k^reg: fe features -> [N, Ck, 56, 56] heatmap logits.
template <typename T>
Tensor<T> kp_reg_forward(Tape<T>* tp, ModelBundle<T>& m, const Tensor<T>& fe) {
  const ModelConfig& c = m.config;
  if (fe.dim(1) != fe_channels(m.variant, c))
    throw ShapeError("kp_reg_forward: fe channels " +
                     std::to_string(fe.dim(1)) + " != " +
                     std::to_string(fe_channels(m.variant, c)));
  Tensor<T> x = fe;
  if (m.variant == Variant::v3) {
    const int g = c.keypoints;
    x = relu(tp, conv2d(tp, x, m.p("kp.reg.conv0.w"), m.p("kp.reg.conv0.b"),
                        1, 1, g));
    x = relu(tp, conv2d(tp, x, m.p("kp.reg.conv1.w"), m.p("kp.reg.conv1.b"),
                        1, 1, g));
    x = conv_transpose2d(tp, x, m.p("kp.reg.deconv.w"), m.p("kp.reg.deconv.b"),
                         2, g);
  } else {
    const int g = m.variant == Variant::v2 ? c.keypoints : 1;
    x = conv_transpose2d(tp, x, m.p("kp.reg.deconv.w"), m.p("kp.reg.deconv.b"),
                         2, g);
  }
  return bilinear_upsample(tp, x, 56, 56);
}

template <typename T>
KeypointOutput<T> keypoint_forward(Tape<T>* tp, ModelBundle<T>& m,
                                   const RoiFeature<T>& roi) {
  KeypointOutput<T> out;
  out.fe = kp_fe_forward(tp, m, roi, &out.last_attn);
  out.heatmaps = kp_reg_forward(tp, m, out.fe);
  return out;
}

// Baseline: 2 convs + 2x2 transposed conv + 1x1 conv -> [N,1,28,28].
// With ttg_enabled the fe features are channel-concatenated first and the
// first conv is correspondingly wider.
template <typename T>
MaskOutput<T> mask_forward(Tape<T>* tp, ModelBundle<T>& m,
                           const RoiFeature<T>& roi,
                           const Tensor<T>* kp_features = nullptr) {
  if (m.ttg_enabled && !kp_features)
    throw ValueError("mask_forward: widened head needs kp_features");
  if (!m.ttg_enabled && kp_features)
    throw ValueError("mask_forward: baseline head got unexpected kp_features");
  Tensor<T> x = roi.features;
  if (m.ttg_enabled) x = concat_channels(tp, x, *kp_features);
  x = relu(tp, conv2d(tp, x, m.p("mask.conv0.w"), m.p("mask.conv0.b"), 1, 1));
  x = relu(tp, conv2d(tp, x, m.p("mask.conv1.w"), m.p("mask.conv1.b"), 1, 1));
  x = relu(tp, conv_transpose2d(tp, x, m.p("mask.deconv.w"),
                                m.p("mask.deconv.b"), 2, 1));
  return conv2d(tp, x, m.p("mask.out.w"), m.p("mask.out.b"), 1, 0);
}

// ---------------------------------------------------------------------------
// Checkpoint I/O (float32 JSON with hex-encoded little-endian payloads)
// ---------------------------------------------------------------------------

void save_checkpoint(const ModelBundle<float>& m, const std::string& path);
ModelBundle<float> load_checkpoint(const std::string& path);
// Loads into an existing bundle; throws CheckpointError if the file's
// variant/ttg/config disagree with the bundle.
void load_checkpoint(ModelBundle<float>& m, const std::string& path);

}  // namespace kpal::model
