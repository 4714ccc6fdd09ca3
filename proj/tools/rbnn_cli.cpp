// Command-line front end: synth, dataset, train, sweep, ood, plot, verify.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "rbnn/pipeline.hpp"

namespace fs = std::filesystem;
using rbnn::KeyValueConfig;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

/// Error with a machine-readable category for the final error line.
struct CliError : std::runtime_error {
  CliError(std::string kind, const std::string& msg) : std::runtime_error(msg), kind(std::move(kind)) {}
  std::string kind;
};

KeyValueConfig load_config(const Globals& g) {
  KeyValueConfig kv = g.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(g.config);
  if (g.seed) kv.set("seed", std::to_string(*g.seed));
  return kv;
}

void print_written(const std::vector<fs::path>& paths) {
  for (const auto& p : paths) std::cout << p.string() << '\n';
}

void cmd_synth(const Globals& g, std::size_t count, std::size_t size) {
  KeyValueConfig kv = load_config(g);
  kv.require_known({"count", "size", "seed"});
  count = kv.get_u64("count", count);
  size = kv.get_u64("size", size);
  if (count == 0 || size == 0) throw rbnn::ConfigError("count and size must be >= 1");
  print_written(rbnn::write_textures(rbnn::synth_textures(count, size, kv.get_u64("seed", 0)), g.out));
}

void cmd_dataset(const Globals& g, const std::string& source_dir) {
  KeyValueConfig kv = load_config(g);
  if (!source_dir.empty()) kv.set("source_dir", source_dir);
  const auto cfg = rbnn::DatasetConfig::from_config(kv);
  if (cfg.source_dir.empty()) throw rbnn::ConfigError("source_dir is required (config key or --sources)");
  const auto m = rbnn::build_dataset(cfg, g.out);
  for (const auto& w : m.warnings) std::cerr << "warning: " << w << '\n';
  for (auto s : {rbnn::Split::Train, rbnn::Split::Val, rbnn::Split::Test}) {
    std::cout << rbnn::split_name(s) << ' ' << m.count(s) << " patches\n";
  }
}

void cmd_train(const Globals& g, const std::string& mode_str, const std::string& dataset, const std::string& spec_path) {
  const auto mode = rbnn::parse_mode(mode_str);
  const auto cfg = rbnn::TrainConfig::from_config(load_config(g));
  const auto spec = spec_path.empty() ? rbnn::ModelSpec::desk_default() : rbnn::load_model_spec(spec_path);
  spec.validate();
  const auto outcome = rbnn::train_from_dataset(dataset, spec, mode, cfg, g.out, &std::cerr);
  std::cout << "checkpoint " << outcome.checkpoint.string() << "\nbest_iteration " << outcome.best_iteration
            << "\nbest_val_accuracy " << outcome.best_val_accuracy << '\n';
}

rbnn::SweepSpec sweep_spec(const Globals& g, const rbnn::SweepSpec& defaults) {
  return rbnn::SweepSpec::from_config(load_config(g), defaults);
}

fs::path resolve_dataset(const std::string& dataset, const fs::path& checkpoint) {
  if (!dataset.empty()) return dataset;
  if (auto d = rbnn::checkpoint_dataset(checkpoint)) return *d;
  throw CliError("usage", "no --dataset given and the checkpoint manifest records none");
}

std::optional<rbnn::TrainingRange> range_of(const fs::path& dataset) {
  return rbnn::training_range(rbnn::read_manifest(dataset).trained_scales());
}

void cmd_sweep(const Globals& g, const std::string& mode_str, const std::string& checkpoint, const std::string& dataset) {
  const auto mode = rbnn::parse_mode(mode_str);
  const rbnn::Model model = rbnn::load_checkpoint(checkpoint);
  if (model.mode() != mode) throw CliError("usage", "checkpoint is a " + std::string(rbnn::mode_name(model.mode())) + " model");
  const fs::path data = resolve_dataset(dataset, checkpoint);
  const auto sources = rbnn::SweepSources::from_manifest(rbnn::read_manifest(data));
  rbnn::SweepSpec defaults;
  if (mode == rbnn::ModelMode::Bayesian) {
    defaults.stop = 4.1;
    defaults.step = 0.05;
  }
  const auto spec = sweep_spec(g, defaults);
  const auto result = mode == rbnn::ModelMode::Baseline ? rbnn::run_baseline_sweep(model, sources, spec)
                                                        : rbnn::run_bnn_sweep(model, sources, spec);
  const auto kind = mode == rbnn::ModelMode::Baseline ? rbnn::ChartKind::Bars : rbnn::ChartKind::Band;
  print_written(rbnn::emit_plots({result}, kind, g.out, range_of(data)));
}

void cmd_ood(const Globals& g, const std::string& suite, const std::string& checkpoint, const std::string& dataset) {
  const rbnn::Model model = rbnn::load_checkpoint(checkpoint);
  const fs::path data = resolve_dataset(dataset, checkpoint);
  const auto sources = rbnn::SweepSources::from_manifest(rbnn::read_manifest(data));
  rbnn::SweepSpec defaults;
  defaults.stop = 4.1;
  defaults.step = 0.05;
  const auto base = sweep_spec(g, defaults);
  std::vector<std::string> suites;
  if (suite == "all") suites = rbnn::ood_suite_names();
  else suites = {suite};
  for (const auto& s : suites) rbnn::ood_spec(base, s);  // reject unknown names before any work
  std::vector<rbnn::SweepResult> results;
  for (const auto& s : suites) results.push_back(rbnn::run_ood_suite(model, sources, base, s));
  print_written(rbnn::emit_plots(results, rbnn::ChartKind::Band, g.out, range_of(data)));
}

void cmd_plot(const Globals& g, const std::string& sweep_dir, const std::vector<std::string>& names,
              const std::string& kind, const std::string& dataset, bool mixed, bool pooled_std) {
  if (kind != "bars" && kind != "band") throw CliError("usage", "--kind must be bars or band");
  std::vector<rbnn::SweepResult> results;
  for (const auto& n : names) results.push_back(rbnn::read_sweep(sweep_dir, n, mixed, pooled_std));
  const auto range = dataset.empty() ? std::nullopt : range_of(dataset);
  print_written(rbnn::emit_plots(results, kind == "bars" ? rbnn::ChartKind::Bars : rbnn::ChartKind::Band, g.out, range));
}

int cmd_verify(const Globals& g) {
  const KeyValueConfig kv = load_config(g);
  kv.require_known({"seed"});
  const auto checks = rbnn::run_verify(g.out, kv.get_u64("seed", 0), &std::cout);
  bool ok = true;
  for (const auto& c : checks) ok = ok && c.passed;
  std::cout << (ok ? "verify: all checks passed" : "verify: FAILED") << '\n';
  if (!ok) throw CliError("verify", "one or more verification checks failed");
  return 0;
}

void emit_error(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Tape buffers are large and short-lived; keep them on the heap instead of
  // mapping and unmapping pages every step.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
  CLI::App app{"Resampling detection with a Bayesian CNN and a matched baseline"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Key-value config file for the subcommand")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed override");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();

  std::size_t count = 50, size = 768;
  auto* synth = app.add_subcommand("synth", "Generate synthetic source textures");
  synth->add_option("--count", count, "Number of textures");
  synth->add_option("--size", size, "Side length in pixels");

  std::string sources;
  auto* dataset = app.add_subcommand("dataset", "Build the patch dataset and manifest");
  dataset->add_option("--sources", sources, "Directory of source images (overrides source_dir)");

  std::string mode, data_dir, spec_path;
  auto* train = app.add_subcommand("train", "Train a baseline or Bayesian model");
  train->add_option("mode", mode, "baseline or bnn")->required();
  train->add_option("--dataset", data_dir, "Dataset directory")->required();
  train->add_option("--spec", spec_path, "Model spec file (default: built-in desk spec)");

  std::string checkpoint;
  auto* sweep = app.add_subcommand("sweep", "Evaluate a checkpoint over a grid of rescaling factors");
  sweep->add_option("mode", mode, "baseline or bnn")->required();
  sweep->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  sweep->add_option("--dataset", data_dir, "Dataset directory (default: from the checkpoint manifest)");

  std::string suite;
  auto* ood = app.add_subcommand("ood", "BNN sweep with JPEG or kernel perturbations");
  ood->add_option("suite", suite, "jpeg85, jpeg50, nearest, areal or all")->required();
  ood->add_option("--checkpoint", checkpoint, "Bayesian checkpoint file")->required();
  ood->add_option("--dataset", data_dir, "Dataset directory (default: from the checkpoint manifest)");

  std::string sweep_dir, kind = "band";
  std::vector<std::string> names;
  bool mixed = false, pooled_std = false;
  auto* plot = app.add_subcommand("plot", "Render SVG charts from sweep CSVs");
  plot->add_option("--from", sweep_dir, "Directory holding <name>_patches.csv")->required();
  plot->add_option("--name", names, "Sweep names")->required();
  plot->add_option("--kind", kind, "bars or band");
  plot->add_option("--dataset", data_dir, "Dataset directory for training-range shading");
  plot->add_flag("--mixed", mixed, "Pool original patches into each factor's confidence");
  plot->add_flag("--pooled-std", pooled_std, "Band std over all draws of a factor instead of the per-patch mean");

  app.add_subcommand("verify", "Invariant checks and a twice-run determinism check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return 2;
  }

  try {
    if (*synth) cmd_synth(g, count, size);
    else if (*dataset) cmd_dataset(g, sources);
    else if (*train) cmd_train(g, mode, data_dir, spec_path);
    else if (*sweep) cmd_sweep(g, mode, checkpoint, data_dir);
    else if (*ood) cmd_ood(g, suite, checkpoint, data_dir);
    else if (*plot) cmd_plot(g, sweep_dir, names, kind, data_dir, mixed, pooled_std);
    else return cmd_verify(g);
  } catch (const CliError& e) {
    emit_error(e.kind, e.what());
    return e.kind == "usage" ? 2 : 1;
  } catch (const rbnn::ConfigError& e) {
    emit_error("config", e.what());
    return 2;
  } catch (const rbnn::SpecError& e) {
    emit_error("spec", e.what());
    return 2;
  } catch (const rbnn::IoError& e) {
    emit_error("io", e.what());
    return 1;
  } catch (const rbnn::NumericError& e) {
    emit_error("numeric", e.what());
    return 1;
  } catch (const std::exception& e) {
    emit_error("error", e.what());
    return 1;
  }
  return 0;
}
