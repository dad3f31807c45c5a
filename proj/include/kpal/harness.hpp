#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kpal/adapt.hpp"
#include "kpal/generalize.hpp"
#include "kpal/metrics.hpp"
#include "kpal/model.hpp"
#include "kpal/synthgen.hpp"

namespace kpal::harness {

struct ConfigError : ValueError {
  using ValueError::ValueError;
};
struct MissingArtifactError : ValueError {
  using ValueError::ValueError;
};

enum class Mode { baseline, tta, ttg, ttg_tta };

std::string mode_name(Mode m);
Mode mode_from_name(const std::string& s);

struct ExperimentSpec {
  Mode mode = Mode::baseline;
  model::Variant variant = model::Variant::mrcnn;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3};
  adapt::TtaConfig tta;
  generalize::TrainConfig train;
  model::ModelConfig model_cfg;      // experiment-scale widths by default
  synth::GenConfig source_cfg;       // occlusion presets
  synth::GenConfig target_cfg;
  int source_train_scenes = 60;
  int source_val_scenes = 40;
  int target_val_scenes = 40;
  // ablation grids; defaults follow the reported sweep values
  std::map<std::string, std::vector<double>> grids;
  std::string out_dir = "out";
  int workers = 1;

  void validate() const;
};

// Experiment-scale defaults: paper-facing structure (K=17, all four variants)
// with widths shrunk so the full matrix fits a single-core time budget.
ExperimentSpec default_spec();

ExperimentSpec spec_from_json_text(const std::string& text);
std::string spec_to_json_text(const ExperimentSpec& spec);
ExperimentSpec load_spec(const std::string& path);  // ConfigError on failure

// One results.csv row; metrics on the 0-100 scale. sweep_param is empty for
// plain experiment rows.
struct ResultRow {
  std::string variant;
  std::string mode;
  std::uint64_t seed = 0;
  std::string split;
  double miou = 0.0;
  double ap_mask = 0.0;
  double ap_key = 0.0;
  std::string sweep_param;
  double sweep_value = 0.0;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
};

// Deterministic per-(seed, split) scene seeds.
std::vector<std::uint64_t> split_scene_seeds(std::uint64_t seed,
                                             const std::string& split,
                                             int count);

// Evaluation of one trained bundle on one scene list. TTA modes adapt
// per-image and reset afterwards; traces (one JSON per image) are appended
// to *traces when given.
metrics::SeedMetrics evaluate_split(model::ModelBundle<float>& bundle,
                                    const synth::Dataset& ds, Mode mode,
                                    const adapt::TtaConfig& tta,
                                    std::vector<std::string>* traces = nullptr);

// Builds and trains the bundle for (spec, seed). Mode picks baseline or the
// widened TTG model.
model::ModelBundle<float> train_for_seed(const ExperimentSpec& spec,
                                         std::uint64_t seed,
                                         generalize::TrainLog* log = nullptr);

// Full protocol: for each seed train, then evaluate source_val and
// target_val; writes results.csv, traces/*.json under spec.out_dir.
ExperimentResult run_experiment(const ExperimentSpec& spec);

// One run_experiment per grid value with constant seeds; writes sweep.csv.
// Throws ConfigError when the parameter does not apply to spec.mode.
ExperimentResult run_sweep(const ExperimentSpec& spec,
                           const std::string& grid_name);

std::string results_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_results_csv(const std::string& text);

// Pivots rows into mean(std) cells per (variant, mode, split); also emits
// sweep line charts and a mode-comparison bar chart under out_dir/plots.
// Missing cells warn on stderr but never fail.
void make_tables(const std::vector<std::string>& results_paths,
                 const std::string& out_dir);

std::string summary_csv(const std::vector<ResultRow>& rows);

// Minimal static SVG charts.
std::string svg_line_chart(const std::string& title,
                           const std::vector<double>& xs,
                           const std::map<std::string, std::vector<double>>&
                               series);
std::string svg_bar_chart(const std::string& title,
                          const std::vector<std::string>& labels,
                          const std::vector<double>& values);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);  // MissingArtifactError

}  // namespace kpal::harness
