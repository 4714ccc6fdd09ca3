#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rbnn/image.hpp"

namespace rbnn {

enum class Kernel { Bilinear, Nearest, Areal };

inline std::string_view kernel_name(Kernel k) {
  switch (k) {
    case Kernel::Bilinear: return "bilinear";
    case Kernel::Nearest: return "nearest";
    case Kernel::Areal: return "areal";
  }
  return "?";
}

inline Kernel parse_kernel(std::string_view s) {
  if (s == "bilinear") return Kernel::Bilinear;
  if (s == "nearest") return Kernel::Nearest;
  if (s == "areal") return Kernel::Areal;
  throw std::invalid_argument("unknown interpolation kernel '" + std::string(s) + "'");
}

/// Output extent of a rescale by `s`.
inline std::size_t scaled_extent(std::size_t n, double s) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n) * s));
}

namespace detail {

struct Tap {
  std::size_t index;
  double weight;
};

/// Source taps of output sample `o` along one axis of length `n`. Output pixel
/// centres map to source positions through (o + 0.5) / s - 0.5.
inline std::vector<Tap> axis_taps(std::size_t o, std::size_t n, double s, Kernel kernel) {
  const double last = static_cast<double>(n - 1);
  switch (kernel) {
    case Kernel::Bilinear: {
      const double src = std::clamp((static_cast<double>(o) + 0.5) / s - 0.5, 0.0, last);
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const double f = src - static_cast<double>(i0);
      if (i0 + 1 >= n) return {{i0, 1.0}};
      return {{i0, 1.0 - f}, {i0 + 1, f}};
    }
    case Kernel::Nearest: {
      const auto i = static_cast<std::size_t>(std::floor((static_cast<double>(o) + 0.5) / s));
      return {{std::min(i, n - 1), 1.0}};
    }
    case Kernel::Areal: {
      // Output pixel o covers [o/s, (o+1)/s) in source pixel-edge coordinates.
      const double lo = std::clamp(static_cast<double>(o) / s, 0.0, static_cast<double>(n));
      const double hi = std::clamp(static_cast<double>(o + 1) / s, 0.0, static_cast<double>(n));
      std::vector<Tap> taps;
      double total = 0.0;
      for (auto i = static_cast<std::size_t>(std::floor(lo)); i < n && static_cast<double>(i) < hi; ++i) {
        const double cover = std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i));
        if (cover > 0.0) {
          taps.push_back({i, cover});
          total += cover;
        }
      }
      if (taps.empty()) return {{std::min(static_cast<std::size_t>(lo), n - 1), 1.0}};
      for (auto& t : taps) t.weight /= total;
      return taps;
    }
  }
  return {};
}

}  // namespace detail

/// The w x h window at (x0, y0) of the image that resample(img, s, kernel)
/// would produce, computed without materializing the full output.
inline GrayImage resample_region(const GrayImage& img, double s, Kernel kernel, std::size_t x0, std::size_t y0,
                                 std::size_t w, std::size_t h) {
  if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("scale factor must be positive");
  if (img.width == 0 || img.height == 0) throw std::invalid_argument("cannot resample an empty image");
  const std::size_t out_w = scaled_extent(img.width, s);
  const std::size_t out_h = scaled_extent(img.height, s);
  if (out_w < 1 || out_h < 1) throw std::invalid_argument("rescaled image would be smaller than one pixel");
  if (x0 + w > out_w || y0 + h > out_h) {
    throw std::out_of_range("window " + std::to_string(w) + "x" + std::to_string(h) + " at (" + std::to_string(x0) +
                            "," + std::to_string(y0) + ") exceeds rescaled size " + std::to_string(out_w) + "x" +
                            std::to_string(out_h));
  }
  std::vector<std::vector<detail::Tap>> xt(w), yt(h);
  for (std::size_t x = 0; x < w; ++x) xt[x] = detail::axis_taps(x0 + x, img.width, s, kernel);
  for (std::size_t y = 0; y < h; ++y) yt[y] = detail::axis_taps(y0 + y, img.height, s, kernel);

  // Horizontal pass over the source rows the window touches, then vertical.
  std::size_t row_lo = img.height, row_hi = 0;
  for (const auto& taps : yt) {
    for (const auto& t : taps) {
      row_lo = std::min(row_lo, t.index);
      row_hi = std::max(row_hi, t.index + 1);
    }
  }
  std::vector<double> rows((row_hi - row_lo) * w);
  for (std::size_t r = row_lo; r < row_hi; ++r) {
    const double* src = img.pixels.data() + r * img.width;
    double* dst = rows.data() + (r - row_lo) * w;
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (const auto& t : xt[x]) acc += t.weight * src[t.index];
      dst[x] = acc;
    }
  }
  GrayImage out(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    double* dst = out.pixels.data() + y * w;
    for (const auto& t : yt[y]) {
      const double* src = rows.data() + (t.index - row_lo) * w;
      for (std::size_t x = 0; x < w; ++x) dst[x] += t.weight * src[x];
    }
  }
  return out;
}

/// Rescales to round(w*s) x round(h*s) with the given interpolation kernel.
inline GrayImage resample(const GrayImage& img, double s, Kernel kernel) {
  if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("scale factor must be positive");
  return resample_region(img, s, kernel, 0, 0, scaled_extent(img.width, s), scaled_extent(img.height, s));
}

}  // namespace rbnn
