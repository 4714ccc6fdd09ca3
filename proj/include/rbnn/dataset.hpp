#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rbnn/config.hpp"
#include "rbnn/image.hpp"
#include "rbnn/jpeg.hpp"
#include "rbnn/resample.hpp"
#include "rbnn/rng.hpp"
#include "rbnn/training.hpp"

namespace rbnn {

namespace fs = std::filesystem;

/// Training rescale factors s = (90 + 5k) / 100 for k in 0..11 without k = 2.
inline std::vector<double> training_scale_grid() {
  std::vector<double> out;
  for (int k = 0; k <= 11; ++k) {
    if (k != 2) out.push_back(static_cast<double>(90 + 5 * k) / 100.0);
  }
  return out;
}

/// Network input scaling applied to 8-bit range pixels.
inline constexpr double kInputScale = 1.0 / 255.0;

enum class Split { Train, Val, Test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

struct DatasetConfig {
  fs::path source_dir;
  std::size_t train_images = 40;
  std::size_t val_images = 5;
  std::size_t test_images = 5;
  std::size_t patches_per_image = 8;
  std::size_t patch_size = 64;
  Kernel kernel = Kernel::Bilinear;
  int jpeg_quality = 0;  // 0: no compression
  std::size_t max_attempts = 10000;
  std::uint64_t seed = 0;

  static DatasetConfig from_config(const KeyValueConfig& kv) {
    kv.require_known({"source_dir", "train_images", "val_images", "test_images", "patches_per_image", "patch_size",
                      "kernel", "jpeg_quality", "max_attempts", "seed"});
    DatasetConfig c;
    c.source_dir = kv.get_string("source_dir", "");
    c.train_images = kv.get_u64("train_images", c.train_images);
    c.val_images = kv.get_u64("val_images", c.val_images);
    c.test_images = kv.get_u64("test_images", c.test_images);
    c.patches_per_image = kv.get_u64("patches_per_image", c.patches_per_image);
    c.patch_size = kv.get_u64("patch_size", c.patch_size);
    c.kernel = parse_kernel(kv.get_string("kernel", "bilinear"));
    c.jpeg_quality = static_cast<int>(kv.get_u64("jpeg_quality", 0));
    c.max_attempts = kv.get_u64("max_attempts", c.max_attempts);
    c.seed = kv.get_u64("seed", c.seed);
    c.validate();
    return c;
  }

  void validate() const {
    if (patch_size == 0 || patches_per_image == 0) throw ConfigError("patch_size and patches_per_image must be >= 1");
    if (train_images == 0) throw ConfigError("train_images must be >= 1");
    if (jpeg_quality < 0 || jpeg_quality > 100) throw ConfigError("jpeg_quality must be 0 (off) or 1..100");
    if (max_attempts == 0) throw ConfigError("max_attempts must be >= 1");
  }

  /// Echo written into the manifest header.
  std::map<std::string, std::string> echo() const {
    return {{"train_images", std::to_string(train_images)},
            {"val_images", std::to_string(val_images)},
            {"test_images", std::to_string(test_images)},
            {"patches_per_image", std::to_string(patches_per_image)},
            {"patch_size", std::to_string(patch_size)},
            {"kernel", std::string(kernel_name(kernel))},
            {"jpeg_quality", std::to_string(jpeg_quality)},
            {"max_attempts", std::to_string(max_attempts)},
            {"seed", std::to_string(seed)}};
  }
};

struct PatchRecord {
  std::string path;  // relative to the dataset directory
  std::size_t source_id = 0;
  Split split = Split::Train;
  int label = kOriginal;
  double scale = 1.0;
  Kernel kernel = Kernel::Bilinear;
  int jpeg_quality = 0;
  std::uint64_t seed = 0;
};

struct SourceRecord {
  std::size_t source_id = 0;
  Split split = Split::Train;
  std::string path;
  std::size_t width = 0;
  std::size_t height = 0;
};

struct DatasetManifest {
  fs::path root;
  std::map<std::string, std::string> config;
  std::vector<SourceRecord> sources;
  std::vector<PatchRecord> patches;
  std::vector<std::string> warnings;

  std::size_t patch_size() const { return std::stoul(config.at("patch_size")); }

  std::size_t count(Split split) const {
    return static_cast<std::size_t>(
        std::count_if(patches.begin(), patches.end(), [&](const PatchRecord& r) { return r.split == split; }));
  }

  /// Distinct rescale factors present among the training patches.
  std::vector<double> trained_scales() const {
    std::set<double> s;
    for (const auto& r : patches) {
      if (r.split == Split::Train && r.label == kRescaled) s.insert(r.scale);
    }
    return {s.begin(), s.end()};
  }

  std::vector<SourceRecord> sources_in(Split split) const {
    std::vector<SourceRecord> out;
    for (const auto& s : sources) {
      if (s.split == split) out.push_back(s);
    }
    return out;
  }
};

inline constexpr const char* kManifestHeader = "patch_path,source_id,split,label,scale,kernel,jpeg_q,seed";

/// Top-left corners of `n` pairwise disjoint p x p windows inside w x h, by
/// rejection sampling with at most `max_attempts` draws in total. A partial
/// placement that keeps rejecting is discarded and sampling restarts, since an
/// early window can leave no room for the rest. Returns nullopt when the
/// budget runs out.
inline std::optional<std::vector<std::array<std::size_t, 2>>> draw_disjoint_windows(std::size_t w, std::size_t h,
                                                                                  std::size_t p, std::size_t n,
                                                                                  std::size_t max_attempts, Rng& rng) {
  if (w < p || h < p) return std::nullopt;
  constexpr std::size_t kStall = 256;
  std::vector<std::array<std::size_t, 2>> out;
  std::size_t rejected = 0;
  for (std::size_t attempt = 0; attempt < max_attempts && out.size() < n; ++attempt) {
    const std::size_t x = rng.uniform_index(0, w - p);
    const std::size_t y = rng.uniform_index(0, h - p);
    const bool clash = std::any_of(out.begin(), out.end(), [&](const auto& o) {
      const std::size_t dx = x > o[0] ? x - o[0] : o[0] - x;
      const std::size_t dy = y > o[1] ? y - o[1] : o[1] - y;
      return dx < p && dy < p;
    });
    if (!clash) {
      out.push_back({x, y});
      rejected = 0;
    } else if (++rejected == kStall) {
      out.clear();
      rejected = 0;
    }
  }
  if (out.size() < n) return std::nullopt;
  return out;
}

inline std::string format_scale(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", s);
  return buf;
}

inline std::vector<fs::path> list_source_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("source directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline void write_manifest(const DatasetManifest& m) {
  {
    std::ofstream os(m.root / "manifest.csv", std::ios::trunc);
    if (!os) throw IoError("cannot write manifest in " + m.root.string());
    for (const auto& [k, v] : m.config) os << "# " << k << '=' << v << '\n';
    os << kManifestHeader << '\n';
    for (const auto& r : m.patches) {
      os << r.path << ',' << r.source_id << ',' << split_name(r.split) << ','
         << (r.label == kRescaled ? "rescaled" : "original") << ',' << format_scale(r.scale) << ','
         << kernel_name(r.kernel) << ',' << (r.jpeg_quality ? std::to_string(r.jpeg_quality) : "none") << ',' << r.seed
         << '\n';
    }
  }
  std::ofstream os(m.root / "sources.csv", std::ios::trunc);
  if (!os) throw IoError("cannot write sources.csv in " + m.root.string());
  os << "source_id,split,path,width,height\n";
  for (const auto& s : m.sources) {
    os << s.source_id << ',' << split_name(s.split) << ',' << s.path << ',' << s.width << ',' << s.height << '\n';
  }
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

inline DatasetManifest read_manifest(const fs::path& dir) {
  DatasetManifest m;
  m.root = dir;
  std::ifstream is(dir / "manifest.csv");
  if (!is) throw IoError("missing manifest.csv in " + dir.string());
  std::string line;
  bool header = false;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) m.config[line.substr(2, eq - 2)] = line.substr(eq + 1);
      continue;
    }
    if (!header) {
      if (line != kManifestHeader) throw IoError("unexpected manifest header: " + line);
      header = true;
      continue;
    }
    const auto f = detail::split_csv(line);
    if (f.size() != 8) throw IoError("manifest line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields");
    PatchRecord r;
    r.path = f[0];
    r.source_id = std::stoul(f[1]);
    r.split = parse_split(f[2]);
    if (f[3] != "original" && f[3] != "rescaled") throw IoError("bad label on manifest line " + std::to_string(lineno));
    r.label = f[3] == "rescaled" ? kRescaled : kOriginal;
    r.scale = std::stod(f[4]);
    r.kernel = parse_kernel(f[5]);
    r.jpeg_quality = f[6] == "none" ? 0 : std::stoi(f[6]);
    r.seed = std::stoull(f[7]);
    m.patches.push_back(r);
  }
  if (!m.config.count("patch_size")) throw IoError("manifest lacks the patch_size entry");

  std::ifstream ss(dir / "sources.csv");
  if (!ss) throw IoError("missing sources.csv in " + dir.string());
  std::getline(ss, line);
  while (std::getline(ss, line)) {
    const auto f = detail::split_csv(line);
    if (f.size() != 5) throw IoError("malformed sources.csv line: " + line);
    m.sources.push_back({std::stoul(f[0]), parse_split(f[1]), f[2], std::stoul(f[3]), std::stoul(f[4])});
  }
  return m;
}

/// Builds the patch dataset from the images in cfg.source_dir into `out_dir`:
/// manifest.csv, sources.csv and patches/<split>/*.f64.
inline DatasetManifest build_dataset(const DatasetConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  const auto files = list_source_images(cfg.source_dir);
  const std::size_t needed = cfg.train_images + cfg.val_images + cfg.test_images;
  if (files.size() < needed) {
    throw IoError("need " + std::to_string(needed) + " source images, found " + std::to_string(files.size()) + " in " +
                  cfg.source_dir.string());
  }
  // Seeded assignment of source images to splits.
  std::vector<std::size_t> order(files.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng(derive_seed(cfg.seed, 1ULL << 40));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[split_rng.uniform_index(0, i - 1)]);

  DatasetManifest m;
  m.root = out_dir;
  m.config = cfg.echo();
  for (auto s : {Split::Train, Split::Val, Split::Test}) fs::create_directories(out_dir / "patches" / split_name(s));

  const auto grid = training_scale_grid();
  const std::size_t p = cfg.patch_size;
  char name[64];
  for (std::size_t pos = 0; pos < needed; ++pos) {
    const std::size_t id = order[pos];
    const Split split = pos < cfg.train_images ? Split::Train
                        : pos < cfg.train_images + cfg.val_images ? Split::Val
                                                                  : Split::Test;
    const GrayImage original = read_gray(files[id]);
    m.sources.push_back({id, split, files[id].string(), original.width, original.height});

    const std::uint64_t seed = derive_seed(cfg.seed, id);
    Rng rng(seed);
    const double s = grid[rng.uniform_index(0, grid.size() - 1)];
    const GrayImage rescaled = resample(original, s, cfg.kernel);

    struct Copy {
      const GrayImage* img;
      int label;
      double scale;
      std::optional<std::vector<std::array<std::size_t, 2>>> windows;
    };
    std::array<Copy, 2> copies{Copy{&original, kOriginal, 1.0, {}}, Copy{&rescaled, kRescaled, s, {}}};
    bool ok = true;
    for (auto& c : copies) {
      c.windows = draw_disjoint_windows(c.img->width, c.img->height, p, cfg.patches_per_image, cfg.max_attempts, rng);
      ok = ok && c.windows.has_value();
    }
    if (!ok) {
      m.warnings.push_back("skipped " + files[id].string() + ": cannot place " + std::to_string(cfg.patches_per_image) +
                           " disjoint " + std::to_string(p) + "x" + std::to_string(p) + " patches");
      continue;
    }
    for (const auto& c : copies) {
      for (std::size_t j = 0; j < c.windows->size(); ++j) {
        const auto [x, y] = (*c.windows)[j];
        GrayImage patch = c.img->crop(x, y, p, p);
        if (cfg.jpeg_quality) patch = jpeg_cycle(patch, cfg.jpeg_quality);
        std::snprintf(name, sizeof name, "s%04zu_%c_%03zu.f64", id, c.label == kRescaled ? 'r' : 'o', j);
        const std::string rel = (fs::path("patches") / split_name(split) / name).generic_string();
        write_patch(out_dir / rel, patch);
        m.patches.push_back({rel, id, split, c.label, c.scale, cfg.kernel, cfg.jpeg_quality, seed});
      }
    }
  }
  write_manifest(m);
  return m;
}

/// Converts patches to a network input batch [N, 1, P, P] scaled by kInputScale.
inline Tensor patches_to_tensor(std::span<const GrayImage> patches) {
  if (patches.empty()) throw std::invalid_argument("no patches");
  const std::size_t p = patches.front().width;
  Tensor t({patches.size(), 1, p, p});
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i].width != p || patches[i].height != p) throw ShapeError("patches differ in size");
    for (std::size_t k = 0; k < p * p; ++k) t[i * p * p + k] = patches[i].pixels[k] * kInputScale;
  }
  return t;
}

/// All patches of one split as a labeled set, in manifest order.
inline LabeledSet load_split(const DatasetManifest& m, Split split) {
  const std::size_t p = m.patch_size();
  std::vector<GrayImage> patches;
  std::vector<int> labels;
  for (const auto& r : m.patches) {
    if (r.split != split) continue;
    patches.push_back(read_patch(m.root / r.path, p));
    labels.push_back(r.label);
  }
  if (patches.empty()) throw IoError("manifest has no " + std::string(split_name(split)) + " patches");
  return {patches_to_tensor(patches), std::move(labels)};
}

}  // namespace rbnn
