#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kpal/model.hpp"

using namespace kpal;
using namespace kpal::model;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.keypoints = 3;
  c.roi_channels = 8;
  c.backbone_widths = {4, 4, 6, 8};
  c.kp_tower_width = 4;
  c.kp_fe_channels = 6;
  c.mask_width = 4;
  c.decoder_layers = 2;
  c.decoder_heads = 2;
  c.decoder_width = 8;
  c.decoder_ffn = 16;
  c.v3_value_channels = 3;
  return c;
}

std::vector<synth::Proposal> fake_proposals(int n, int img) {
  std::vector<synth::Proposal> props;
  for (int i = 0; i < n; ++i) {
    synth::Proposal p;
    p.bbox = {2.0 + i, 3.0, img * 0.6 + i, img * 0.85};
    p.score = 0.9;
    p.matched_gt = i;
    props.push_back(p);
  }
  return props;
}

template <typename T>
RoiFeature<T> forward_to_roi(Tape<T>* tp, ModelBundle<T>& m, Rng& rng, int n,
                             int img) {
  auto image = Tensor<T>::randn({1, 3, img, img}, rng, T(1));
  auto stages = backbone_forward(tp, m, image);
  return roi_extract(tp, stages.back(), fake_proposals(n, img), img, img);
}

}  // namespace

TEST_CASE("channel ledger: fe and heatmap channels per variant at K=17") {
  const ModelConfig cfg;  // defaults, K=17
  CHECK(fe_channels(Variant::mrcnn, cfg) == 512);
  CHECK(fe_channels(Variant::v1, cfg) == 512);
  CHECK(fe_channels(Variant::v2, cfg) == 51);
  CHECK(fe_channels(Variant::v3, cfg) == 255);
  CHECK(heatmap_channels(Variant::mrcnn, cfg) == 17);
  CHECK(heatmap_channels(Variant::v1, cfg) == 51);
  CHECK(heatmap_channels(Variant::v2, cfg) == 51);
  CHECK(heatmap_channels(Variant::v3, cfg) == 51);
}

TEST_CASE("full-size forward shapes for every variant") {
  const ModelConfig cfg;
  Rng rng(1);
  for (auto v : {Variant::mrcnn, Variant::v1, Variant::v2, Variant::v3}) {
    auto m = make_model<float>(v, false, cfg, rng);
    Rng drng(7);
    auto roi = forward_to_roi<float>(nullptr, m, drng, 2, 64);
    CHECK(roi.features.shape == Shape{2, 256, 14, 14});
    auto kp = keypoint_forward<float>(nullptr, m, roi);
    CHECK(kp.fe.shape ==
          Shape{2, fe_channels(v, cfg), 14, 14});
    CHECK(kp.heatmaps.shape == Shape{2, heatmap_channels(v, cfg), 56, 56});
    auto mask = mask_forward<float>(nullptr, m, roi);
    CHECK(mask.shape == Shape{2, 1, 28, 28});
  }
}

TEST_CASE("backbone: zero image gives spatially constant stage outputs") {
  Rng rng(2);
  auto m = make_model<float>(Variant::mrcnn, false, tiny_config(), rng);
  auto image = Tensor<float>::zeros({1, 3, 16, 16});
  auto stages = backbone_forward<float>(nullptr, m, image);
  REQUIRE(stages.size() == 4);
  // stride product: stages 1 and 2 halve the size, 0 and 3 keep it
  CHECK(stages[0].shape == Shape{1, 4, 16, 16});
  CHECK(stages[1].shape == Shape{1, 4, 8, 8});
  CHECK(stages[2].shape == Shape{1, 6, 4, 4});
  CHECK(stages[3].shape == Shape{1, 8, 4, 4});
  // with zero input, interior pixels all equal relu(bias)
  const auto& last = stages[3];
  for (int c = 0; c < last.dim(1); ++c) {
    const float ref = last[static_cast<std::size_t>(c) * 4];
    for (int p = 0; p < 4; ++p)
      CHECK(last[static_cast<std::size_t>(c) * 4 +
                 static_cast<std::size_t>(p)] ==
            doctest::Approx(ref).epsilon(1e-6));
  }
}

TEST_CASE("backbone: stage-1 weight gradients match finite differences") {
  Rng rng(3);
  auto m = make_model<double>(Variant::mrcnn, false, tiny_config(), rng);
  Rng drng(4);
  auto image = Tensor<double>::randn({1, 3, 8, 8}, drng, 1.0);
  auto weights = Tensor<double>::randn({1, 8, 1, 1}, drng, 1.0);

  auto loss_of = [&](Tape<double>* tp) {
    auto stages = backbone_forward(tp, m, image);
    // weighted readout so every output channel matters
    auto w = Tensor<double>::zeros(stages[3].shape);
    Rng wr(5);
    for (auto& v : *w.data) v = wr.uniform(-1.0, 1.0);
    return sum_all(tp, mul(tp, stages[3], w));
  };

  auto& w0 = m.p("backbone.stage0.w");
  w0.set_requires_grad(true);
  Tape<double> tape;
  auto loss = loss_of(&tape);
  tape.backward(loss);

  const double eps = 1e-4;
  int checked = 0;
  for (std::size_t j = 0; j < w0.numel(); j += 7) {
    const double orig = w0[j];
    w0[j] = orig + eps;
    const double lp = loss_of(nullptr)[0];
    w0[j] = orig - eps;
    const double lm = loss_of(nullptr)[0];
    w0[j] = orig;
    const double fd = (lp - lm) / (2 * eps);
    const double g = (*w0.grad)[j];
    CHECK(std::abs(g - fd) / std::max({1.0, std::abs(g), std::abs(fd)}) <
          1e-5);
    ++checked;
  }
  CHECK(checked > 10);
}

TEST_CASE("roi_extract: box over the whole map is an identity crop") {
  Rng rng(6);
  auto features = Tensor<float>::randn({1, 3, 14, 14}, rng, 1.0f);
  synth::Proposal p;
  p.bbox = {0.0, 0.0, 13.0, 13.0};
  auto roi = roi_extract<float>(nullptr, features, {p}, 14, 14);
  REQUIRE(roi.features.shape == Shape{1, 3, 14, 14});
  for (std::size_t j = 0; j < features.numel(); ++j)
    CHECK(roi.features[j] == doctest::Approx(features[j]).epsilon(1e-6));
}

TEST_CASE("roi_extract: constant map gives constant crops") {
  auto features = Tensor<float>::full({1, 2, 6, 6}, 0.75f);
  synth::Proposal p;
  p.bbox = {3.0, 5.0, 40.0, 50.0};
  auto roi = roi_extract<float>(nullptr, features, {p}, 64, 64);
  for (std::size_t j = 0; j < roi.features.numel(); ++j)
    CHECK(roi.features[j] == doctest::Approx(0.75f));
}

TEST_CASE("roi_extract: matches a per-point bilinear oracle") {
  Rng rng(7);
  const int hf = 6, wf = 6, img = 48;
  auto features = Tensor<float>::randn({1, 2, hf, wf}, rng, 1.0f);
  synth::Proposal p;
  p.bbox = {5.5, 8.25, 39.0, 44.75};
  auto roi = roi_extract<float>(nullptr, features, {p}, img, img);
  const double sy = double(hf - 1) / (img - 1), sx = double(wf - 1) / (img - 1);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 14; ++i)
      for (int j = 0; j < 14; ++j) {
        double fy = (p.bbox[1] + (p.bbox[3] - p.bbox[1]) * i / 13.0) * sy;
        double fx = (p.bbox[0] + (p.bbox[2] - p.bbox[0]) * j / 13.0) * sx;
        fy = std::clamp(fy, 0.0, hf - 1.0);
        fx = std::clamp(fx, 0.0, wf - 1.0);
        const int y0 = std::min(int(fy), hf - 1), y1 = std::min(y0 + 1, hf - 1);
        const int x0 = std::min(int(fx), wf - 1), x1 = std::min(x0 + 1, wf - 1);
        const double wy = fy - y0, wx = fx - x0;
        auto at = [&](int y, int x) {
          return double(features[static_cast<std::size_t>(c) * hf * wf +
                                 static_cast<std::size_t>(y) * wf +
                                 static_cast<std::size_t>(x)]);
        };
        const double want = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                            wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        const double got = roi.features[(static_cast<std::size_t>(c) * 14 +
                                         static_cast<std::size_t>(i)) *
                                            14 +
                                        static_cast<std::size_t>(j)];
        CHECK(std::abs(got - want) < 1e-6);
      }
}

TEST_CASE("roi_extract rejects empty proposal lists") {
  auto features = Tensor<float>::zeros({1, 2, 6, 6});
  CHECK_THROWS_AS(roi_extract<float>(nullptr, features, {}, 48, 48),
                  ValueError);
}

TEST_CASE("keypoint head: composing fe and reg equals the combined pass") {
  Rng rng(8);
  for (auto v : {Variant::mrcnn, Variant::v1, Variant::v2, Variant::v3}) {
    auto m = make_model<float>(v, false, tiny_config(), rng);
    Rng drng(9);
    auto roi = forward_to_roi<float>(nullptr, m, drng, 2, 24);
    auto combined = keypoint_forward<float>(nullptr, m, roi);
    auto fe = kp_fe_forward<float>(nullptr, m, roi);
    auto heat = kp_reg_forward<float>(nullptr, m, fe);
    REQUIRE(combined.heatmaps.shape == heat.shape);
    for (std::size_t j = 0; j < heat.numel(); ++j)
      CHECK(combined.heatmaps[j] == heat[j]);  // bit-exact
  }
}

TEST_CASE("decoder attention rows sum to one") {
  Rng rng(10);
  for (auto v : {Variant::v2, Variant::v3}) {
    auto m = make_model<double>(v, false, tiny_config(), rng);
    Rng drng(11);
    auto roi = forward_to_roi<double>(nullptr, m, drng, 1, 24);
    auto kp = keypoint_forward<double>(nullptr, m, roi);
    REQUIRE(kp.last_attn.ndim() == 3);
    const int rows = kp.last_attn.dim(0) * kp.last_attn.dim(1);
    const int t = kp.last_attn.dim(2);
    for (int r = 0; r < rows; ++r) {
      double s = 0;
      for (int j = 0; j < t; ++j)
        s += kp.last_attn[static_cast<std::size_t>(r) * t +
                          static_cast<std::size_t>(j)];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("per-ROI independence: each ROI's outputs ignore the others") {
  Rng rng(12);
  for (auto v : {Variant::v1, Variant::v3}) {
    auto m = make_model<float>(v, false, tiny_config(), rng);
    Rng drng(13);
    const int img = 24;
    auto image = Tensor<float>::randn({1, 3, img, img}, drng, 1.0f);
    auto stages = backbone_forward<float>(nullptr, m, image);
    auto props = fake_proposals(2, img);
    auto both = roi_extract<float>(nullptr, stages.back(), props, img, img);
    auto kp_both = keypoint_forward<float>(nullptr, m, both);
    const std::size_t per = kp_both.heatmaps.numel() / 2;
    for (int i = 0; i < 2; ++i) {
      auto solo = roi_extract<float>(nullptr, stages.back(),
                                     {props[static_cast<std::size_t>(i)]},
                                     img, img);
      auto kp_solo = keypoint_forward<float>(nullptr, m, solo);
      REQUIRE(kp_solo.heatmaps.numel() == per);
      for (std::size_t j = 0; j < per; ++j)
        CHECK(kp_solo.heatmaps[j] ==
              doctest::Approx(
                  kp_both.heatmaps[static_cast<std::size_t>(i) * per + j])
                  .epsilon(1e-6));
    }
  }
}

TEST_CASE("mask head: widened input channels and kp_features plumbing") {
  const ModelConfig cfg;  // K=17 defaults
  Rng rng(14);
  auto m2 = make_model<float>(Variant::v2, true, cfg, rng);
  CHECK(m2.p("mask.conv0.w").dim(1) == 256 + 51);  // 307
  auto m3 = make_model<float>(Variant::v3, true, cfg, rng);
  CHECK(m3.p("mask.conv0.w").dim(1) == 256 + 255);
  auto m0 = make_model<float>(Variant::mrcnn, true, cfg, rng);
  CHECK(m0.p("mask.conv0.w").dim(1) == 256 + 512);

  // zeroed kp_features: shape contract holds, output finite
  auto tiny = tiny_config();
  auto mt = make_model<float>(Variant::v2, true, tiny, rng);
  RoiFeature<float> roi;
  Rng drng(15);
  roi.features = Tensor<float>::randn({2, tiny.roi_channels, 14, 14}, drng,
                                      1.0f);
  roi.proposals = fake_proposals(2, 24);
  auto zeros =
      Tensor<float>::zeros({2, fe_channels(Variant::v2, tiny), 14, 14});
  auto mask = mask_forward<float>(nullptr, mt, roi, &zeros);
  CHECK(mask.shape == Shape{2, 1, 28, 28});
  for (std::size_t j = 0; j < mask.numel(); ++j)
    CHECK(std::isfinite(mask[j]));

  // wrong plumbing is rejected both ways
  CHECK_THROWS_AS(mask_forward<float>(nullptr, mt, roi), ValueError);
  auto mbase = make_model<float>(Variant::v2, false, tiny, rng);
  CHECK_THROWS_AS(mask_forward<float>(nullptr, mbase, roi, &zeros),
                  ValueError);
}

TEST_CASE("mask head: gradient reaches both roi and kp feature inputs") {
  auto tiny = tiny_config();
  Rng rng(16);
  auto m = make_model<float>(Variant::v2, true, tiny, rng);
  RoiFeature<float> roi;
  Rng drng(17);
  roi.features =
      Tensor<float>::randn({1, tiny.roi_channels, 14, 14}, drng, 1.0f);
  roi.proposals = fake_proposals(1, 24);
  auto kp = Tensor<float>::randn({1, fe_channels(Variant::v2, tiny), 14, 14},
                                 drng, 1.0f);
  roi.features.set_requires_grad(true);
  kp.set_requires_grad(true);
  Tape<float> tape;
  auto mask = mask_forward(&tape, m, roi, &kp);
  auto loss = sum_all(&tape, mul(&tape, mask, mask));
  tape.backward(loss);
  auto nonzero = [](const Tensor<float>& t) {
    double s = 0;
    for (float g : *t.grad) s += std::abs(g);
    return s > 0;
  };
  CHECK(nonzero(roi.features));
  CHECK(nonzero(kp));
}

TEST_CASE("checkpoint: save/load round trip is bit-exact") {
  const fs::path dir = fs::temp_directory_path() / "kpal_ckpt";
  fs::create_directories(dir);
  auto tiny = tiny_config();
  Rng rng(18);
  auto m = make_model<float>(Variant::mrcnn, false, tiny, rng);
  Rng drng(19);
  auto roi = forward_to_roi<float>(nullptr, m, drng, 1, 24);
  auto before = keypoint_forward<float>(nullptr, m, roi);

  const std::string p1 = (dir / "a.json").string();
  const std::string p2 = (dir / "b.json").string();
  save_checkpoint(m, p1);
  auto loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);

  auto slurp = [](const std::string& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
  };
  CHECK(slurp(p1) == slurp(p2));

  Rng drng2(19);
  auto roi2 = forward_to_roi<float>(nullptr, loaded, drng2, 1, 24);
  auto after = keypoint_forward<float>(nullptr, loaded, roi2);
  REQUIRE(after.heatmaps.numel() == before.heatmaps.numel());
  for (std::size_t j = 0; j < before.heatmaps.numel(); ++j)
    CHECK(after.heatmaps[j] == before.heatmaps[j]);  // bit-exact
  fs::remove_all(dir);
}

TEST_CASE("checkpoint: variant mismatch on load is an error") {
  const fs::path dir = fs::temp_directory_path() / "kpal_ckpt_mismatch";
  fs::create_directories(dir);
  auto tiny = tiny_config();
  Rng rng(20);
  auto m2 = make_model<float>(Variant::v2, false, tiny, rng);
  const std::string p = (dir / "v2.json").string();
  save_checkpoint(m2, p);
  auto m3 = make_model<float>(Variant::v3, false, tiny, rng);
  CHECK_THROWS_AS(load_checkpoint(m3, p), CheckpointError);
  // matching bundle loads fine
  auto m2b = make_model<float>(Variant::v2, false, tiny, rng);
  load_checkpoint(m2b, p);
  for (const auto& [name, t] : m2.params) {
    const auto& u = m2b.p(name);
    for (std::size_t j = 0; j < t.numel(); ++j) CHECK(t[j] == u[j]);
  }
  fs::remove_all(dir);
}
