#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "rbnn/image.hpp"
#include "rbnn/rng.hpp"

namespace rbnn {

namespace detail {

/// One running-sum box blur pass of radius r along rows or columns, with
/// clamped borders.
inline void box_blur_pass(std::vector<double>& img, std::size_t w, std::size_t h, std::size_t r, bool horizontal) {
  const std::size_t n = horizontal ? w : h;
  const std::size_t lines = horizontal ? h : w;
  const std::size_t step = horizontal ? 1 : w;
  const std::size_t line_step = horizontal ? w : 1;
  std::vector<double> line(n), prefix(n + 1);
  for (std::size_t l = 0; l < lines; ++l) {
    double* base = img.data() + l * line_step;
    for (std::size_t i = 0; i < n; ++i) line[i] = base[i * step];
    prefix[0] = 0.0;
    for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + line[i];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t lo = i >= r ? i - r : 0;
      const std::size_t hi = std::min(n, i + r + 1);
      base[i * step] = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
    }
  }
}

/// Unit-variance smooth field: white noise through three box blurs per axis.
inline std::vector<double> smooth_field(std::size_t w, std::size_t h, std::size_t radius, Rng& rng) {
  std::vector<double> f(w * h);
  for (auto& v : f) v = rng.normal();
  if (radius > 0) {
    for (int pass = 0; pass < 3; ++pass) {
      box_blur_pass(f, w, h, radius, true);
      box_blur_pass(f, w, h, radius, false);
    }
  }
  double mean = 0.0, sq = 0.0;
  for (double v : f) mean += v;
  mean /= static_cast<double>(f.size());
  for (double v : f) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(f.size()));
  for (auto& v : f) v = sd > 0 ? (v - mean) / sd : 0.0;
  return f;
}

}  // namespace detail

/// One synthetic source texture: a sum of smooth random fields with a random
/// power-law weighting across scales, a linear gradient, two sinusoidal
/// gratings and sensor-like white noise, quantized to 8 bit.
inline GrayImage synth_texture(std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t w = size, h = size;
  std::vector<double> acc(w * h, 0.0);

  const double slope = rng.uniform(0.5, 1.5);
  double contrast = rng.uniform(18.0, 40.0);
  for (std::size_t radius : {32u, 16u, 8u, 4u, 2u, 1u}) {
    const double weight = contrast * std::pow(static_cast<double>(radius) / 32.0, slope) * rng.uniform(0.5, 1.5);
    const auto field = detail::smooth_field(w, h, radius, rng);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weight * field[i];
  }
  contrast = rng.uniform(0.0, 40.0);
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double gx = std::cos(angle) * contrast / static_cast<double>(size);
  const double gy = std::sin(angle) * contrast / static_cast<double>(size);
  for (int g = 0; g < 2; ++g) {
    const double amp = rng.uniform(0.0, 8.0);
    const double period = rng.uniform(6.0, 60.0);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double kx = std::cos(theta) * 2.0 * std::numbers::pi / period;
    const double ky = std::sin(theta) * 2.0 * std::numbers::pi / period;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) acc[y * w + x] += amp * std::sin(kx * x + ky * y + phase);
  }
  const double noise = rng.uniform(1.0, 4.0);
  const double center = rng.uniform(90.0, 165.0);

  GrayImage img(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double cx = static_cast<double>(x) - static_cast<double>(w) / 2.0;
      const double cy = static_cast<double>(y) - static_cast<double>(h) / 2.0;
      const double v = center + acc[y * w + x] + gx * cx + gy * cy + noise * rng.normal();
      img.at(x, y) = std::clamp(std::nearbyint(v), 0.0, 255.0);
    }
  return img;
}

/// `count` textures seeded from derive_seed(seed, i).
inline std::vector<GrayImage> synth_textures(std::size_t count, std::size_t size, std::uint64_t seed) {
  std::vector<GrayImage> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(synth_texture(size, derive_seed(seed, i)));
  return out;
}

/// Writes textures as tex_NNNN.pgm into `dir`; returns the paths.
inline std::vector<std::filesystem::path> write_textures(const std::vector<GrayImage>& images,
                                                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  char name[32];
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::snprintf(name, sizeof name, "tex_%04zu.pgm", i);
    paths.push_back(dir / name);
    write_pgm(paths.back(), images[i]);
  }
  return paths;
}

}  // namespace rbnn
