#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "rbnn/dataset.hpp"
#include "rbnn/inference.hpp"
#include "rbnn/jpeg.hpp"
#include "rbnn/resample.hpp"

namespace rbnn {

/// Factors outside this interval are never evaluated.
inline constexpr double kGuardLow = 0.1;
inline constexpr double kGuardHigh = 4.1;

struct SweepSpec {
  double start = 0.1;
  double stop = 2.0;
  double step = 0.1;
  std::size_t patches = 32;  // M per grid point
  Kernel kernel = Kernel::Bilinear;
  int jpeg_quality = 0;  // 0: none
  std::size_t mc_draws = 50;
  std::uint64_t seed = 0;
  /// Confidence per factor over its rescaled patches pooled with the originals
  /// instead of over the rescaled patches alone.
  bool mixed = false;
  /// Band std from all draws of a cell pooled, instead of the mean per-patch std.
  bool pooled_std = false;

  void validate() const {
    if (!(step > 0.0) || !std::isfinite(step)) throw std::invalid_argument("sweep step must be positive");
    if (!(stop >= start)) throw std::invalid_argument("sweep stop must not be below start");
    if (patches < 2) throw std::invalid_argument("sweep needs at least 2 patches per factor");
    if (jpeg_quality < 0 || jpeg_quality > 100) throw std::invalid_argument("jpeg quality must be 0 (off) or 1..100");
  }

  /// Grid points inside the guard interval, rounded to 1e-9.
  std::vector<double> grid() const {
    validate();
    std::vector<double> out;
    const auto n = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9));
    for (std::size_t i = 0; i <= n; ++i) {
      const double s = std::round((start + static_cast<double>(i) * step) * 1e9) / 1e9;
      if (s >= kGuardLow - 1e-12 && s <= kGuardHigh + 1e-12) out.push_back(s);
    }
    if (out.empty()) throw std::invalid_argument("sweep grid has no factor inside [0.1, 4.1]");
    return out;
  }

  static SweepSpec from_config(const KeyValueConfig& kv, const SweepSpec& defaults) {
    kv.require_known(
        {"start", "stop", "step", "patches", "kernel", "jpeg_quality", "mc_draws", "seed", "mixed", "pooled_std"});
    SweepSpec s = defaults;
    s.start = kv.get_double("start", s.start);
    s.stop = kv.get_double("stop", s.stop);
    s.step = kv.get_double("step", s.step);
    s.patches = kv.get_u64("patches", s.patches);
    s.kernel = parse_kernel(kv.get_string("kernel", std::string(kernel_name(s.kernel))));
    s.jpeg_quality = static_cast<int>(kv.get_u64("jpeg_quality", static_cast<std::uint64_t>(s.jpeg_quality)));
    s.mc_draws = kv.get_u64("mc_draws", s.mc_draws);
    s.seed = kv.get_u64("seed", s.seed);
    s.mixed = kv.get_string("mixed", s.mixed ? "true" : "false") == "true";
    s.pooled_std = kv.get_string("pooled_std", s.pooled_std ? "true" : "false") == "true";
    s.validate();
    return s;
  }
  static SweepSpec from_config(const KeyValueConfig& kv) { return from_config(kv, SweepSpec{}); }
};

/// Held-out images the sweeps draw patches from.
struct SweepSources {
  std::vector<GrayImage> images;
  std::vector<std::size_t> ids;
  std::size_t patch_size = 64;

  /// Loads the test-split sources of a dataset manifest.
  static SweepSources from_manifest(const DatasetManifest& m) {
    SweepSources s;
    s.patch_size = m.patch_size();
    for (const auto& src : m.sources_in(Split::Test)) {
      s.images.push_back(read_gray(src.path));
      s.ids.push_back(src.source_id);
    }
    if (s.images.empty()) throw std::invalid_argument("dataset has no test-split source images");
    return s;
  }
};

/// One evaluated patch.
struct PatchRow {
  std::string patch_id;
  double scale = 1.0;
  Kernel kernel = Kernel::Bilinear;
  int jpeg_quality = 0;
  int label = kRescaled;
  double mean_p_rescaled = 0.0;
  double std_p_rescaled = 0.0;
  std::size_t n_draws = 1;
  bool correct = false;
};

/// Aggregate over the M patches of one (label, factor) cell.
struct SummaryRow {
  int label = kRescaled;
  double scale = 1.0;
  std::size_t count = 0;
  std::size_t n_draws = 1;
  double accuracy = 0.0;
  double confidence = 0.0;  // mean max-class probability
  double mean_p_rescaled = 0.0;
  double mean_std = 0.0;  // mean per-patch std of P(rescaled), or the pooled std
  double band_low = 0.0;   // mean_p_rescaled - 2 mean_std, clamped to [0, 1]
  double band_high = 0.0;  // mean_p_rescaled + 2 mean_std, clamped to [0, 1]

  double band_width() const { return 4.0 * mean_std; }
  bool operator==(const SummaryRow&) const = default;
};

struct SweepResult {
  std::string name;
  std::vector<PatchRow> patches;
  std::vector<SummaryRow> summary;

  /// Rescaled-label summary rows in grid order.
  std::vector<SummaryRow> rescaled_rows() const {
    std::vector<SummaryRow> out;
    for (const auto& r : summary) {
      if (r.label == kRescaled) out.push_back(r);
    }
    return out;
  }
  const SummaryRow* originals() const {
    for (const auto& r : summary) {
      if (r.label == kOriginal) return &r;
    }
    return nullptr;
  }
};

namespace detail {

inline SummaryRow summarize_cell(int label, double scale, const std::vector<const PatchRow*>& rows, bool pooled_std) {
  SummaryRow s;
  s.label = label;
  s.scale = scale;
  s.count = rows.size();
  s.n_draws = rows.front()->n_draws;
  std::size_t correct = 0;
  double second_moment = 0.0;
  for (const PatchRow* r : rows) {
    second_moment += r->std_p_rescaled * r->std_p_rescaled + r->mean_p_rescaled * r->mean_p_rescaled;
    s.confidence += std::max(r->mean_p_rescaled, 1.0 - r->mean_p_rescaled);
    s.mean_p_rescaled += r->mean_p_rescaled;
    s.mean_std += r->std_p_rescaled;
    correct += r->correct ? 1 : 0;
  }
  const double n = static_cast<double>(rows.size());
  s.accuracy = static_cast<double>(correct) / n;
  s.confidence /= n;
  s.mean_p_rescaled /= n;
  s.mean_std /= n;
  // Every patch has the same draw count, so the pooled variance is E[p^2] - E[p]^2.
  if (pooled_std) s.mean_std = std::sqrt(std::max(0.0, second_moment / n - s.mean_p_rescaled * s.mean_p_rescaled));
  s.band_low = std::clamp(s.mean_p_rescaled - 2.0 * s.mean_std, 0.0, 1.0);
  s.band_high = std::clamp(s.mean_p_rescaled + 2.0 * s.mean_std, 0.0, 1.0);
  return s;
}

}  // namespace detail

/// Summary rows from per-patch rows: one cell per (label, scale) in order of
/// first appearance. With `mixed`, each rescaled cell also includes every
/// original-label row. With `pooled_std`, band std comes from the pooled draws.
inline std::vector<SummaryRow> aggregate(const std::vector<PatchRow>& rows, bool mixed = false,
                                         bool pooled_std = false) {
  std::vector<std::pair<int, double>> keys;
  std::map<std::pair<int, double>, std::vector<const PatchRow*>> cells;
  std::vector<const PatchRow*> originals;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.label, r.scale);
    if (!cells.count(key)) keys.push_back(key);
    cells[key].push_back(&r);
    if (r.label == kOriginal) originals.push_back(&r);
  }
  std::vector<SummaryRow> out;
  for (const auto& key : keys) {
    auto members = cells.at(key);
    if (mixed && key.first == kRescaled) members.insert(members.end(), originals.begin(), originals.end());
    out.push_back(detail::summarize_cell(key.first, key.second, members, pooled_std));
  }
  return out;
}

/// M patches rescaled by `s` from the sweep sources. Patch j comes from source
/// j mod K at a uniformly drawn position of the virtual rescaled image.
inline std::vector<GrayImage> sweep_patches(const SweepSources& src, double s, Kernel kernel, int jpeg_quality,
                                            std::size_t m, Rng& rng) {
  const std::size_t p = src.patch_size;
  std::vector<GrayImage> out;
  out.reserve(m);
  for (std::size_t j = 0; j < m; ++j) {
    const GrayImage* img = nullptr;
    for (std::size_t t = 0; t < src.images.size() && !img; ++t) {
      const GrayImage& cand = src.images[(j + t) % src.images.size()];
      if (scaled_extent(cand.width, s) >= p && scaled_extent(cand.height, s) >= p) img = &cand;
    }
    if (!img) {
      throw std::invalid_argument("no test source image is large enough for a " + std::to_string(p) + " px patch at s=" +
                                  format_scale(s));
    }
    const std::size_t x = rng.uniform_index(0, scaled_extent(img->width, s) - p);
    const std::size_t y = rng.uniform_index(0, scaled_extent(img->height, s) - p);
    GrayImage patch = resample_region(*img, s, kernel, x, y, p, p);
    if (jpeg_quality) patch = jpeg_cycle(patch, jpeg_quality);
    out.push_back(std::move(patch));
  }
  return out;
}

namespace detail {

/// Shared sweep driver; `evaluate` maps a patch batch to (mean p, std, draws)
/// per patch given a seed.
template <class Evaluate>
SweepResult run_sweep(const std::string& name, const SweepSources& src, const SweepSpec& spec, Evaluate&& evaluate) {
  const auto grid = spec.grid();
  SweepResult res;
  res.name = name;
  char id[64];
  auto run_cell = [&](double s, int label, std::uint64_t stream) {
    Rng rng(derive_seed(spec.seed, stream));
    const auto patches = sweep_patches(src, s, spec.kernel, spec.jpeg_quality, spec.patches, rng);
    const auto stats = evaluate(patches_to_tensor(patches), derive_seed(spec.seed, stream + (1ULL << 32)));
    for (std::size_t j = 0; j < patches.size(); ++j) {
      PatchRow r;
      std::snprintf(id, sizeof id, "%s_%03zu", label == kOriginal ? "orig" : format_scale(s).c_str(), j);
      r.patch_id = id;
      r.scale = s;
      r.kernel = spec.kernel;
      r.jpeg_quality = spec.jpeg_quality;
      r.label = label;
      r.mean_p_rescaled = stats[j].mean_probs[kRescaled];
      r.std_p_rescaled = stats[j].std_rescaled;
      r.n_draws = stats[j].n_draws;
      const int pred = stats[j].mean_probs[kRescaled] > stats[j].mean_probs[kOriginal] ? kRescaled : kOriginal;
      r.correct = pred == label;
      res.patches.push_back(r);
    }
  };
  bool has_unit = false;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    // s = 1 reproduces the source exactly, so it is scored as an original.
    const bool unit = std::abs(grid[g] - 1.0) < 1e-12;
    has_unit = has_unit || unit;
    run_cell(grid[g], unit ? kOriginal : kRescaled, g);
  }
  if (!has_unit) run_cell(1.0, kOriginal, 1ULL << 20);
  res.summary = aggregate(res.patches, spec.mixed, spec.pooled_std);
  return res;
}

}  // namespace detail

/// Point-estimate sweep: accuracy and softmax confidence per factor.
inline SweepResult run_baseline_sweep(const Model& baseline, const SweepSources& src, const SweepSpec& spec,
                                      const std::string& name = "baseline") {
  if (baseline.bayesian()) throw std::invalid_argument("baseline sweep needs a baseline checkpoint");
  return detail::run_sweep(name, src, spec, [&](const Tensor& batch, std::uint64_t) {
    std::vector<PredictiveSummary> out;
    for (const Probs& p : probs_from_logits(forward_deterministic(baseline, batch))) {
      PredictiveSummary s;
      s.mean_probs = p;
      s.n_draws = 1;
      out.push_back(s);
    }
    return out;
  });
}

/// MC sweep: mean P(rescaled) and its per-patch std from spec.mc_draws passes.
inline SweepResult run_bnn_sweep(const Model& bnn, const SweepSources& src, const SweepSpec& spec,
                                 const std::string& name = "bnn") {
  if (!bnn.bayesian()) throw std::invalid_argument("BNN sweep needs a Bayesian checkpoint");
  return detail::run_sweep(name, src, spec, [&](const Tensor& batch, std::uint64_t seed) {
    return mc_predict_batch(bnn, batch, spec.mc_draws, seed);
  });
}

inline const std::vector<std::string>& ood_suite_names() {
  static const std::vector<std::string> names = {"jpeg85", "jpeg50", "nearest", "areal"};
  return names;
}

/// The BNN sweep with one perturbation injected.
inline SweepSpec ood_spec(const SweepSpec& base, const std::string& suite) {
  SweepSpec s = base;
  if (suite == "jpeg85") s.jpeg_quality = 85;
  else if (suite == "jpeg50") s.jpeg_quality = 50;
  else if (suite == "nearest") s.kernel = Kernel::Nearest;
  else if (suite == "areal") s.kernel = Kernel::Areal;
  else throw std::invalid_argument("unknown OOD suite '" + suite + "' (expected jpeg85, jpeg50, nearest or areal)");
  return s;
}

inline SweepResult run_ood_suite(const Model& bnn, const SweepSources& src, const SweepSpec& base,
                                 const std::string& suite) {
  return run_bnn_sweep(bnn, src, ood_spec(base, suite), suite);
}

/// Mean per-patch std of P(rescaled) over every rescaled-label row.
inline double mean_uncertainty(const SweepResult& r) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& p : r.patches) {
    if (p.label == kRescaled) {
      acc += p.std_p_rescaled;
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("sweep has no rescaled patches");
  return acc / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr const char* kPatchCsvHeader =
    "patch_id,scale,kernel,jpeg_q,label,mean_p_rescaled,std_p_rescaled,n_draws,correct";
inline constexpr const char* kSummaryCsvHeader =
    "label,scale,count,n_draws,accuracy,confidence,mean_p_rescaled,mean_std,band_low,band_high";

namespace detail {
inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
inline std::string_view label_name(int label) { return label == kRescaled ? "rescaled" : "original"; }
}  // namespace detail

inline void write_patch_csv(const std::filesystem::path& path, const std::vector<PatchRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << kPatchCsvHeader << '\n';
  for (const auto& r : rows) {
    os << r.patch_id << ',' << format_scale(r.scale) << ',' << kernel_name(r.kernel) << ','
       << (r.jpeg_quality ? std::to_string(r.jpeg_quality) : "none") << ',' << detail::label_name(r.label) << ','
       << detail::g17(r.mean_p_rescaled) << ',' << detail::g17(r.std_p_rescaled) << ',' << r.n_draws << ','
       << (r.correct ? 1 : 0) << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

inline std::vector<PatchRow> read_patch_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kPatchCsvHeader) throw IoError("unexpected header in " + path.string());
  std::vector<PatchRow> rows;
  while (std::getline(is, line)) {
    const auto f = detail::split_csv(line);
    if (f.size() != 9) throw IoError("malformed row in " + path.string() + ": " + line);
    PatchRow r;
    r.patch_id = f[0];
    r.scale = std::stod(f[1]);
    r.kernel = parse_kernel(f[2]);
    r.jpeg_quality = f[3] == "none" ? 0 : std::stoi(f[3]);
    r.label = f[4] == "rescaled" ? kRescaled : kOriginal;
    r.mean_p_rescaled = std::stod(f[5]);
    r.std_p_rescaled = std::stod(f[6]);
    r.n_draws = std::stoul(f[7]);
    r.correct = f[8] == "1";
    rows.push_back(r);
  }
  return rows;
}

inline void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << kSummaryCsvHeader << '\n';
  for (const auto& r : rows) {
    os << detail::label_name(r.label) << ',' << format_scale(r.scale) << ',' << r.count << ',' << r.n_draws << ','
       << detail::g17(r.accuracy) << ',' << detail::g17(r.confidence) << ',' << detail::g17(r.mean_p_rescaled) << ','
       << detail::g17(r.mean_std) << ',' << detail::g17(r.band_low) << ',' << detail::g17(r.band_high) << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

inline std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kSummaryCsvHeader) throw IoError("unexpected header in " + path.string());
  std::vector<SummaryRow> rows;
  while (std::getline(is, line)) {
    const auto f = detail::split_csv(line);
    if (f.size() != 10) throw IoError("malformed row in " + path.string() + ": " + line);
    SummaryRow r;
    r.label = f[0] == "rescaled" ? kRescaled : kOriginal;
    r.scale = std::stod(f[1]);
    r.count = std::stoul(f[2]);
    r.n_draws = std::stoul(f[3]);
    r.accuracy = std::stod(f[4]);
    r.confidence = std::stod(f[5]);
    r.mean_p_rescaled = std::stod(f[6]);
    r.mean_std = std::stod(f[7]);
    r.band_low = std::stod(f[8]);
    r.band_high = std::stod(f[9]);
    rows.push_back(r);
  }
  return rows;
}

/// Writes <dir>/<name>_patches.csv and <dir>/<name>_summary.csv.
inline void write_sweep(const std::filesystem::path& dir, const SweepResult& r) {
  std::filesystem::create_directories(dir);
  write_patch_csv(dir / (r.name + "_patches.csv"), r.patches);
  write_summary_csv(dir / (r.name + "_summary.csv"), r.summary);
}

inline SweepResult read_sweep(const std::filesystem::path& dir, const std::string& name, bool mixed = false,
                              bool pooled_std = false) {
  SweepResult r;
  r.name = name;
  r.patches = read_patch_csv(dir / (name + "_patches.csv"));
  r.summary = aggregate(r.patches, mixed, pooled_std);
  return r;
}

}  // namespace rbnn
