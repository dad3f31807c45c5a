// Command-line front end: dataset generation, source training, evaluation,
// test-time adaptation runs, sweeps, and report generation.
//
// Exit codes: 0 success, 2 configuration error, 3 missing or unreadable
// artifact.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kpal/harness.hpp"

namespace fs = std::filesystem;
using namespace kpal;

namespace {

struct Cli {
  std::string config;
  std::string out_dir;
  std::string variant;
  std::string mode;
  std::string split = "target_val";
  std::string grid;
  std::vector<std::uint64_t> seeds;
  int workers = 0;
};

harness::ExperimentSpec make_spec(const Cli& cli) {
  auto spec = cli.config.empty() ? harness::default_spec()
                                 : harness::load_spec(cli.config);
  if (!cli.out_dir.empty()) spec.out_dir = cli.out_dir;
  if (!cli.variant.empty())
    spec.variant = model::variant_from_name(cli.variant);
  if (!cli.mode.empty()) spec.mode = harness::mode_from_name(cli.mode);
  if (!cli.seeds.empty()) spec.seeds = cli.seeds;
  if (cli.workers > 0) spec.workers = cli.workers;
  spec.validate();
  return spec;
}

std::string train_mode_of(harness::Mode m) {
  return (m == harness::Mode::ttg || m == harness::Mode::ttg_tta) ? "ttg"
                                                                  : "baseline";
}

std::string checkpoint_path(const harness::ExperimentSpec& spec,
                            std::uint64_t seed) {
  return spec.out_dir + "/checkpoints/" + model::variant_name(spec.variant) +
         "_" + train_mode_of(spec.mode) + "_seed" + std::to_string(seed) +
         ".json";
}

int cmd_gen(const Cli& cli) {
  const auto spec = make_spec(cli);
  for (std::uint64_t seed : spec.seeds) {
    struct Job {
      const char* split;
      const synth::GenConfig* cfg;
      int count;
    };
    const Job jobs[] = {
        {"source_train", &spec.source_cfg, spec.source_train_scenes},
        {"source_val", &spec.source_cfg, spec.source_val_scenes},
        {"target_val", &spec.target_cfg, spec.target_val_scenes}};
    for (const auto& job : jobs) {
      const auto ds = synth::generate_dataset(
          *job.cfg, harness::split_scene_seeds(seed, job.split, job.count),
          job.split);
      const auto dir = spec.out_dir + "/datasets/seed" +
                       std::to_string(seed) + "/" + job.split;
      synth::save_dataset(ds, dir);
      const auto stats = synth::max_iou_stats(ds);
      std::cout << dir << ": " << ds.scenes.size()
                << " scenes, mean MaxIoU " << stats.mean << "\n";
    }
  }
  return 0;
}

int cmd_train(const Cli& cli) {
  const auto spec = make_spec(cli);
  for (std::uint64_t seed : spec.seeds) {
    generalize::TrainLog log;
    auto bundle = harness::train_for_seed(spec, seed, &log);
    const auto path = checkpoint_path(spec, seed);
    fs::create_directories(fs::path(path).parent_path());
    model::save_checkpoint(bundle, path);
    harness::write_text_file(
        spec.out_dir + "/trainlogs/" + model::variant_name(spec.variant) +
            "_" + train_mode_of(spec.mode) + "_seed" + std::to_string(seed) +
            ".csv",
        generalize::train_log_csv(log));
    std::cout << path << ": final loss "
              << (log.total_loss.empty() ? 0.0 : log.total_loss.back())
              << "\n";
  }
  return 0;
}

int cmd_eval(const Cli& cli) {
  const auto spec = make_spec(cli);
  if (cli.split != "source_val" && cli.split != "target_val")
    throw harness::ConfigError("unknown split: " + cli.split);
  const bool target = cli.split == "target_val";
  const auto& gen_cfg = target ? spec.target_cfg : spec.source_cfg;
  const int count =
      target ? spec.target_val_scenes : spec.source_val_scenes;

  std::vector<harness::ResultRow> rows;
  const auto results_path = spec.out_dir + "/results.csv";
  if (fs::exists(results_path))
    rows = harness::parse_results_csv(harness::read_text_file(results_path));

  for (std::uint64_t seed : spec.seeds) {
    auto bundle = model::load_checkpoint(checkpoint_path(spec, seed));
    const auto ds = synth::generate_dataset(
        gen_cfg, harness::split_scene_seeds(seed, cli.split, count),
        cli.split);
    std::vector<std::string> traces;
    const bool tta = spec.mode == harness::Mode::tta ||
                     spec.mode == harness::Mode::ttg_tta;
    const auto m = harness::evaluate_split(bundle, ds, spec.mode, spec.tta,
                                           tta ? &traces : nullptr);
    harness::ResultRow row;
    row.variant = model::variant_name(spec.variant);
    row.mode = harness::mode_name(spec.mode);
    row.seed = seed;
    row.split = cli.split;
    row.miou = 100.0 * m.miou;
    row.ap_mask = 100.0 * m.ap_mask;
    row.ap_key = 100.0 * m.ap_key;
    rows.push_back(row);
    for (std::size_t i = 0; i < traces.size(); ++i)
      harness::write_text_file(spec.out_dir + "/traces/" + row.variant + "_" +
                                   row.mode + "_seed" + std::to_string(seed) +
                                   "_" + cli.split + "_" + std::to_string(i) +
                                   ".json",
                               traces[i]);
    std::cout << row.variant << "/" << row.mode << " seed " << seed << " "
              << cli.split << ": miou " << row.miou << " ap_mask "
              << row.ap_mask << " ap_key " << row.ap_key << "\n";
  }
  harness::write_text_file(results_path, harness::results_csv(rows));
  return 0;
}

int cmd_run(const Cli& cli) {
  const auto spec = make_spec(cli);
  const auto res = harness::run_experiment(spec);
  std::cout << spec.out_dir << "/results.csv: " << res.rows.size()
            << " rows\n";
  return 0;
}

int cmd_sweep(const Cli& cli) {
  auto spec = make_spec(cli);
  std::string name = cli.grid;
  const auto eq = name.find('=');
  if (eq != std::string::npos) {
    // --grid name=v1,v2,... overrides the configured grid values
    std::vector<double> values;
    std::istringstream vs(name.substr(eq + 1));
    std::string tok;
    while (std::getline(vs, tok, ',')) {
      try {
        values.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw harness::ConfigError("bad grid value: " + tok);
      }
    }
    name = name.substr(0, eq);
    spec.grids[name] = values;
  }
  const auto res = harness::run_sweep(spec, name);
  std::cout << spec.out_dir << "/sweep.csv: " << res.rows.size() << " rows\n";
  return 0;
}

int cmd_report(const Cli& cli) {
  const auto spec = make_spec(cli);
  std::vector<std::string> paths;
  const auto results = spec.out_dir + "/results.csv";
  const auto sweep = spec.out_dir + "/sweep.csv";
  if (fs::exists(results)) paths.push_back(results);
  if (fs::exists(sweep)) paths.push_back(sweep);
  if (paths.empty())
    throw harness::MissingArtifactError("no results.csv or sweep.csv under " +
                                        spec.out_dir);
  harness::make_tables(paths, spec.out_dir);
  std::cout << spec.out_dir << "/summary.csv written\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"occlusion-shift keypoint/segmentation laboratory"};
  app.require_subcommand(1);

  Cli cli;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", cli.config, "experiment spec (json)");
    sub->add_option("--out-dir", cli.out_dir, "artifact directory");
    sub->add_option("--seed,--seeds", cli.seeds, "seed list override");
    sub->add_option("--variant", cli.variant, "mrcnn|v1|v2|v3");
    sub->add_option("--mode", cli.mode, "baseline|tta|ttg|ttg_tta");
    sub->add_option("--workers", cli.workers, "parallel seed jobs");
    return sub;
  };

  auto* gen = add_common(app.add_subcommand("gen", "generate datasets"));
  auto* train = add_common(app.add_subcommand("train", "train on source"));
  auto* eval = add_common(
      app.add_subcommand("eval", "evaluate a trained checkpoint"));
  eval->add_option("--split", cli.split, "source_val|target_val");
  auto* tta = add_common(
      app.add_subcommand("tta", "evaluate with per-image adaptation"));
  tta->add_option("--split", cli.split, "source_val|target_val");
  auto* run = add_common(
      app.add_subcommand("run", "train and evaluate end to end"));
  auto* sweep = add_common(app.add_subcommand("sweep", "grid sweep"));
  sweep->add_option("--grid", cli.grid, "grid name, or name=v1,v2,...")
      ->required();
  auto* report =
      add_common(app.add_subcommand("report", "summary tables and plots"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(cli);
    if (train->parsed()) return cmd_train(cli);
    if (eval->parsed()) return cmd_eval(cli);
    if (tta->parsed()) {
      if (cli.mode.empty()) cli.mode = "tta";
      return cmd_eval(cli);
    }
    if (run->parsed()) return cmd_run(cli);
    if (sweep->parsed()) return cmd_sweep(cli);
    if (report->parsed()) return cmd_report(cli);
  } catch (const harness::MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const model::CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const synth::CorruptFileError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const synth::VersionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const kpal::ValueError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
