#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "kpal/harness.hpp"

using namespace kpal;
using namespace kpal::harness;

namespace {

ExperimentSpec tiny_spec(const std::string& out_dir) {
  auto s = default_spec();
  s.mode = Mode::tta;
  s.variant = model::Variant::v1;
  s.seeds = {0, 1};
  s.source_train_scenes = 5;
  s.source_val_scenes = 3;
  s.target_val_scenes = 3;
  s.train.epochs = 1;
  s.source_cfg.height = s.source_cfg.width = 48;
  s.target_cfg.height = s.target_cfg.width = 48;
  s.out_dir = out_dir;
  return s;
}

}  // namespace

TEST_CASE("spec json round-trips and rejects unknown keys") {
  auto s = tiny_spec("/tmp/kpal_h0");
  s.tta.scope = adapt::AdaptScope::last_stage;
  s.tta.min_keypoint_prob = 0.2;
  auto back = spec_from_json_text(spec_to_json_text(s));
  CHECK(back.mode == s.mode);
  CHECK(back.variant == s.variant);
  CHECK(back.seeds == s.seeds);
  CHECK(back.tta.scope == adapt::AdaptScope::last_stage);
  CHECK(back.tta.min_keypoint_prob == 0.2);
  CHECK(back.source_train_scenes == 5);
  CHECK(back.source_cfg.height == 48);
  CHECK(back.grids == s.grids);

  CHECK_THROWS_AS(spec_from_json_text("{\"bogus_key\": 1}"), ConfigError);
  CHECK_THROWS_AS(spec_from_json_text("{\"mode\": \"warp\"}"), ConfigError);
  CHECK_THROWS_AS(spec_from_json_text("not json"), ConfigError);
  CHECK_THROWS_AS(spec_from_json_text("{\"seeds\": []}"), ConfigError);
}

TEST_CASE("split_scene_seeds: deterministic, split- and seed-dependent") {
  const auto a = split_scene_seeds(3, "source_val", 10);
  CHECK(a == split_scene_seeds(3, "source_val", 10));
  CHECK(a != split_scene_seeds(3, "target_val", 10));
  CHECK(a != split_scene_seeds(4, "source_val", 10));
  std::set<std::uint64_t> uniq(a.begin(), a.end());
  CHECK(uniq.size() == a.size());
  // prefix stability: a longer request extends the shorter one
  const auto b = split_scene_seeds(3, "source_val", 4);
  CHECK(std::equal(b.begin(), b.end(), a.begin()));
}

TEST_CASE("run_experiment: one row per seed and split, deterministic bytes") {
  auto s = tiny_spec("/tmp/kpal_h1");
  auto r1 = run_experiment(s);
  REQUIRE(r1.rows.size() == 4);  // 2 seeds x {source_val, target_val}
  std::set<std::string> cells;
  for (const auto& r : r1.rows) {
    CHECK(r.variant == "v1");
    CHECK(r.mode == "tta");
    cells.insert(std::to_string(r.seed) + "/" + r.split);
  }
  CHECK(cells.size() == 4);
  const auto csv1 = read_text_file("/tmp/kpal_h1/results.csv");
  auto r2 = run_experiment(s);
  CHECK(read_text_file("/tmp/kpal_h1/results.csv") == csv1);
  // adaptation traces exist for the tta mode
  CHECK(std::filesystem::exists(
      "/tmp/kpal_h1/traces/v1_tta_seed0_target_val_0.json"));
}

TEST_CASE("zero adaptation rounds reproduces the baseline numbers") {
  auto base = tiny_spec("/tmp/kpal_h2a");
  base.mode = Mode::baseline;
  base.seeds = {0};
  auto rb = run_experiment(base);

  auto idle = tiny_spec("/tmp/kpal_h2b");
  idle.mode = Mode::tta;
  idle.seeds = {0};
  idle.tta.rounds = 0;
  auto ri = run_experiment(idle);

  REQUIRE(rb.rows.size() == ri.rows.size());
  for (std::size_t i = 0; i < rb.rows.size(); ++i) {
    CHECK(rb.rows[i].split == ri.rows[i].split);
    CHECK(rb.rows[i].miou == ri.rows[i].miou);
    CHECK(rb.rows[i].ap_mask == ri.rows[i].ap_mask);
    CHECK(rb.rows[i].ap_key == ri.rows[i].ap_key);
  }
}

TEST_CASE("evaluate_split is invariant to scene order under adaptation") {
  auto s = tiny_spec("/tmp/kpal_h3");
  s.seeds = {0};
  auto bundle = train_for_seed(s, 0);
  auto ds = synth::generate_dataset(
      s.target_cfg, split_scene_seeds(0, "target_val", 4), "target_val");
  const auto fwd = evaluate_split(bundle, ds, Mode::tta, s.tta);
  std::reverse(ds.scenes.begin(), ds.scenes.end());
  const auto rev = evaluate_split(bundle, ds, Mode::tta, s.tta);
  CHECK(fwd.miou == rev.miou);      // per-image reset makes order irrelevant
  CHECK(fwd.ap_mask == rev.ap_mask);
  CHECK(fwd.ap_key == rev.ap_key);
}

TEST_CASE("run_sweep: tagged rows, value-major order, applicability") {
  auto s = tiny_spec("/tmp/kpal_h4");
  s.seeds = {0, 1};
  s.grids["min_keypoint_prob"] = {0.0, 0.5};
  auto res = run_sweep(s, "min_keypoint_prob");
  REQUIRE(res.rows.size() == 4);  // 2 values x 2 seeds
  CHECK(res.rows[0].sweep_value == 0.0);
  CHECK(res.rows[1].sweep_value == 0.0);
  CHECK(res.rows[2].sweep_value == 0.5);
  for (const auto& r : res.rows) {
    CHECK(r.sweep_param == "min_keypoint_prob");
    CHECK(r.split == "target_val");
  }
  // byte-level reproducibility of the artifact
  const auto csv1 = read_text_file("/tmp/kpal_h4/sweep.csv");
  run_sweep(s, "min_keypoint_prob");
  CHECK(read_text_file("/tmp/kpal_h4/sweep.csv") == csv1);

  CHECK_THROWS_AS(run_sweep(s, "nonexistent_grid"), ConfigError);
  auto off = s;
  off.mode = Mode::baseline;
  CHECK_THROWS_AS(run_sweep(off, "min_keypoint_prob"), ConfigError);
}

TEST_CASE("default sweep grids carry the documented values") {
  const auto s = default_spec();
  CHECK(s.grids.at("tta_learning_rate") ==
        std::vector<double>{0.5e-3, 1e-3, 2e-3, 4e-3});
  CHECK(s.grids.at("min_person_score") ==
        std::vector<double>{0.5, 0.6, 0.7, 0.8});
  CHECK(s.grids.at("min_keypoint_prob") ==
        std::vector<double>{0.05, 0.1, 0.2, 0.4});
  CHECK(s.grids.at("adapt_scope") == std::vector<double>{0, 1});
}

TEST_CASE("results csv round-trips through the parser") {
  std::vector<ResultRow> rows(2);
  rows[0] = {"v2", "ttg", 7, "target_val", 41.125, 12.5, 33.25, "", 0.0};
  rows[1] = {"mrcnn", "tta", 1, "source_val", 10.0, 5.0, 2.0,
             "min_person_score", 0.6};
  const auto text = results_csv(rows);
  const auto back = parse_results_csv(text);
  REQUIRE(back.size() == 2);
  CHECK(back[0].variant == "v2");
  CHECK(back[0].seed == 7);
  CHECK(back[0].miou == doctest::Approx(41.125));
  CHECK(back[0].sweep_param.empty());
  CHECK(back[1].sweep_param == "min_person_score");
  CHECK(back[1].sweep_value == doctest::Approx(0.6));
  CHECK_THROWS_AS(parse_results_csv("nope\n"), ConfigError);
  CHECK_THROWS_AS(parse_results_csv(
                      "variant,mode,seed,split,miou,ap_mask,ap_key,"
                      "sweep_param,sweep_value\nv1,tta,x,target_val,1,2,3,,\n"),
                  ConfigError);
}

TEST_CASE("summary pivot matches a hand-computed mean(std) cell") {
  // seeds 2,4,4,6 -> mean 4.00, population std 1.41
  std::vector<ResultRow> rows;
  for (double v : {2.0, 4.0, 4.0, 6.0}) {
    ResultRow r{"v1", "baseline", static_cast<std::uint64_t>(rows.size()),
                "target_val", v, v, v, "", 0.0};
    rows.push_back(r);
  }
  const auto csv = summary_csv(rows);
  CHECK(csv.find("v1,baseline,target_val,,,4,4.00(1.41),4.00(1.41),"
                 "4.00(1.41)") != std::string::npos);

  // a single seed reports the mean without a spread
  const auto single = summary_csv({rows[0]});
  CHECK(single.find("2.00") != std::string::npos);
  CHECK(single.find("(") == std::string::npos);
}

TEST_CASE("make_tables writes summary and plots; missing input raises") {
  const std::string dir = "/tmp/kpal_h5";
  std::filesystem::remove_all(dir);
  std::vector<ResultRow> rows;
  for (int seed = 0; seed < 2; ++seed)
    for (const char* mode : {"baseline", "tta"}) {
      ResultRow r{"v1", mode, static_cast<std::uint64_t>(seed), "target_val",
                  30.0 + seed, 10.0, 20.0, "", 0.0};
      rows.push_back(r);
    }
  for (int seed = 0; seed < 2; ++seed)
    for (double v : {0.5, 0.7}) {
      ResultRow r{"v1", "tta", static_cast<std::uint64_t>(seed), "target_val",
                  25.0 + 10 * v, 10.0, 20.0, "min_person_score", v};
      rows.push_back(r);
    }
  write_text_file(dir + "/results.csv", results_csv(rows));
  make_tables({dir + "/results.csv"}, dir);
  CHECK(std::filesystem::exists(dir + "/summary.csv"));
  CHECK(std::filesystem::exists(dir + "/plots/modes.svg"));
  CHECK(std::filesystem::exists(dir + "/plots/sweep_min_person_score.svg"));
  const auto svg = read_text_file(dir + "/plots/modes.svg");
  CHECK(svg.find("<svg") == 0);
  CHECK(svg.find("</svg>") != std::string::npos);

  CHECK_THROWS_AS(make_tables({dir + "/absent.csv"}, dir),
                  MissingArtifactError);
}

TEST_CASE("spec validation rejects broken configurations") {
  auto s = tiny_spec("/tmp/kpal_h6");
  s.seeds.clear();
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = tiny_spec("/tmp/kpal_h6");
  s.workers = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = tiny_spec("/tmp/kpal_h6");
  s.target_cfg.domain_tag = "source";
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = tiny_spec("/tmp/kpal_h6");
  s.tta.learning_rate = -1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}
