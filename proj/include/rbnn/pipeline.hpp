#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <ostream>
#include <string>
#include <vector>

#include "rbnn/checkpoint.hpp"
#include "rbnn/dataset.hpp"
#include "rbnn/model.hpp"
#include "rbnn/plot.hpp"
#include "rbnn/sweep.hpp"
#include "rbnn/synth.hpp"
#include "rbnn/training.hpp"

namespace rbnn {

namespace fs = std::filesystem;

inline ModelSpec load_model_spec(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read model spec " + path.string());
  const std::string text{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  return ModelSpec::parse(text);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct TrainOutcome {
  fs::path checkpoint;
  fs::path log;
  std::size_t best_iteration = 0;
  double best_val_accuracy = 0.0;
};

/// Trains a model on a built dataset and writes <out>/<mode>.ckpt (with its
/// manifest) and <out>/<mode>_train_log.csv. Progress goes to `progress` at
/// every validation point when non-null.
inline TrainOutcome train_from_dataset(const fs::path& dataset_dir, const ModelSpec& spec, ModelMode mode,
                                       const TrainConfig& cfg, const fs::path& out_dir,
                                       std::ostream* progress = nullptr, bool log_wall_time = true) {
  const DatasetManifest m = read_manifest(dataset_dir);
  const LabeledSet train_set = load_split(m, Split::Train);
  const LabeledSet val_set = load_split(m, Split::Val);
  Model model = build(spec, mode, derive_seed(cfg.seed, 0));
  const auto result = train(std::move(model), train_set, val_set, cfg, [&](const StepInfo& s) {
    if (progress && s.record.val_accuracy) {
      *progress << mode_name(mode) << " iter " << s.iteration << " loss " << s.record.loss << " nll " << s.record.nll
                << " kl " << s.record.kl << " val_acc " << *s.record.val_accuracy << " val_nll "
                << s.record.val_nll.value_or(0.0) << std::endl;
    }
  });
  fs::create_directories(out_dir);
  TrainOutcome out;
  const std::string name(mode_name(mode));
  out.checkpoint = out_dir / (name + ".ckpt");
  out.log = out_dir / (name + "_train_log.csv");
  save_checkpoint(result.best, out.checkpoint,
                  {cfg.seed, result.best_iteration, result.best_val_accuracy, fs::absolute(dataset_dir).string()});
  write_train_log(out.log, result.log, log_wall_time);
  out.best_iteration = result.best_iteration;
  out.best_val_accuracy = result.best_val_accuracy;
  return out;
}

/// Dataset directory recorded in a checkpoint manifest, if any.
inline std::optional<fs::path> checkpoint_dataset(const fs::path& checkpoint) {
  const auto man = read_checkpoint_manifest(checkpoint);
  auto it = man.find("dataset");
  if (it == man.end() || it->second.empty()) return std::nullopt;
  return fs::path(it->second);
}

struct VerifyCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Determinism and invariant checks on a miniature pipeline: synthetic
/// sources, dataset build, 200 Bayesian training steps and one sweep, run
/// twice with the same seed into separate directories and compared byte for
/// byte.
inline std::vector<VerifyCheck> run_verify(const fs::path& work_dir, std::uint64_t seed, std::ostream* progress = nullptr) {
  std::vector<VerifyCheck> checks;
  auto check = [&](std::string name, bool ok, std::string detail = {}) {
    if (progress) *progress << (ok ? "ok   " : "FAIL ") << name << (detail.empty() ? "" : ": " + detail) << std::endl;
    checks.push_back({std::move(name), ok, std::move(detail)});
  };

  // Invariants of the image pipeline on a generated texture.
  const GrayImage tex = synth_texture(96, derive_seed(seed, 7));
  bool identity = true;
  for (Kernel k : {Kernel::Bilinear, Kernel::Nearest, Kernel::Areal}) identity = identity && resample(tex, 1.0, k) == tex;
  check("resample identity at s=1", identity);
  const GrayImage half = resample(tex, 0.5, Kernel::Areal);
  double mi = 0, mo = 0;
  for (double v : tex.pixels) mi += v;
  for (double v : half.pixels) mo += v;
  mi /= static_cast<double>(tex.pixels.size());
  mo /= static_cast<double>(half.pixels.size());
  check("areal mass preservation", std::abs(mi - mo) < 1e-9);
  const GrayImage once = jpeg_cycle(tex, 50);
  const GrayImage twice = jpeg_cycle(once, 50);
  double drift = 0;
  for (std::size_t i = 0; i < once.pixels.size(); ++i) drift = std::max(drift, std::abs(once.pixels[i] - twice.pixels[i]));
  check("jpeg cycle idempotence", drift <= 2.0, "max drift " + std::to_string(drift));

  const fs::path sources = work_dir / "sources";
  fs::create_directories(work_dir);
  write_textures(synth_textures(8, 256, seed), sources);

  const std::vector<std::string> artifacts = {"dataset/manifest.csv", "dataset/sources.csv", "train/bayesian_train_log.csv",
                                              "train/bayesian.ckpt", "sweep/verify_patches.csv",
                                              "sweep/verify_summary.csv"};
  for (const char* run : {"run_a", "run_b"}) {
    const fs::path dir = work_dir / run;
    fs::remove_all(dir);
    DatasetConfig dc;
    dc.source_dir = sources;
    dc.train_images = 4;
    dc.val_images = 2;
    dc.test_images = 2;
    dc.patches_per_image = 8;
    dc.patch_size = 64;
    dc.seed = seed;
    build_dataset(dc, dir / "dataset");

    TrainConfig tc;
    tc.max_iterations = 200;
    tc.validation_interval = 100;
    tc.batch_size = 32;
    tc.seed = seed;
    const auto outcome =
        train_from_dataset(dir / "dataset", ModelSpec::desk_default(), ModelMode::Bayesian, tc, dir / "train", nullptr, false);
    const Model model = load_checkpoint(outcome.checkpoint);

    const bool constrained = constraint_violation(model.constrained_kernel()) < 1e-12;
    check(std::string(run) + ": constrained layer satisfies its constraint", constrained);

    SweepSpec ss;
    ss.start = 0.8;
    ss.stop = 1.6;
    ss.step = 0.4;
    ss.patches = 8;
    ss.mc_draws = 5;
    ss.seed = seed;
    write_sweep(dir / "sweep",
                run_bnn_sweep(model, SweepSources::from_manifest(read_manifest(dir / "dataset")), ss, "verify"));
  }
  for (const auto& a : artifacts) {
    const bool same = read_file(work_dir / "run_a" / a) == read_file(work_dir / "run_b" / a);
    check("byte-identical " + a, same);
  }
  return checks;
}

}  // namespace rbnn
