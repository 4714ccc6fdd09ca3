#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "rbnn/image.hpp"

namespace rbnn {

using Block8 = std::array<double, 64>;

/// Standard JPEG luminance quantization table (quality 50), row-major.
inline constexpr std::array<int, 64> kLuminanceBase = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

/// IJG percentage scaling: 5000/q below 50, 200 - 2q from 50 up.
inline int ijg_scale(int quality) {
  if (quality < 1 || quality > 100) throw std::invalid_argument("JPEG quality must be in 1..100, got " + std::to_string(quality));
  return quality < 50 ? 5000 / quality : 200 - 2 * quality;
}

/// Baseline table for `quality`: floor((base * scale + 50) / 100) clamped to [1, 255].
inline std::array<int, 64> quantization_table(int quality) {
  const int scale = ijg_scale(quality);
  std::array<int, 64> q{};
  for (std::size_t i = 0; i < 64; ++i) q[i] = std::clamp((kLuminanceBase[i] * scale + 50) / 100, 1, 255);
  return q;
}

namespace detail {

struct DctBasis {
  std::array<double, 64> c{};  // c[u*8 + x] = a(u) cos((2x+1) u pi / 16)
  DctBasis() {
    for (int u = 0; u < 8; ++u) {
      const double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x) c[u * 8 + x] = a * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
    }
  }
};

inline const DctBasis& dct_basis() {
  static const DctBasis basis;
  return basis;
}

}  // namespace detail

/// Orthonormal 2-D DCT-II of an 8x8 block.
inline Block8 dct8x8(const Block8& in) {
  const auto& c = detail::dct_basis().c;
  Block8 tmp{}, out{};
  for (int y = 0; y < 8; ++y)
    for (int u = 0; u < 8; ++u) {
      double acc = 0.0;
      for (int x = 0; x < 8; ++x) acc += c[u * 8 + x] * in[y * 8 + x];
      tmp[y * 8 + u] = acc;
    }
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u) {
      double acc = 0.0;
      for (int y = 0; y < 8; ++y) acc += c[v * 8 + y] * tmp[y * 8 + u];
      out[v * 8 + u] = acc;
    }
  return out;
}

/// Inverse of dct8x8 (DCT-III).
inline Block8 idct8x8(const Block8& in) {
  const auto& c = detail::dct_basis().c;
  Block8 tmp{}, out{};
  for (int v = 0; v < 8; ++v)
    for (int x = 0; x < 8; ++x) {
      double acc = 0.0;
      for (int u = 0; u < 8; ++u) acc += c[u * 8 + x] * in[v * 8 + u];
      tmp[v * 8 + x] = acc;
    }
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      double acc = 0.0;
      for (int v = 0; v < 8; ++v) acc += c[v * 8 + y] * tmp[v * 8 + x];
      out[y * 8 + x] = acc;
    }
  return out;
}

namespace detail {

/// Mirror index into [0, n) with edge repetition (... 1 0 | 0 1 ... n-1 | n-1 n-2 ...).
inline std::size_t reflect_index(std::size_t i, std::size_t n) {
  const std::size_t period = 2 * n;
  i %= period;
  return i < n ? i : period - 1 - i;
}

}  // namespace detail

/// Lossy JPEG round trip of the luminance plane without entropy coding:
/// level shift, DCT, quantize/dequantize, inverse DCT, clamp to [0, 255].
/// Sizes that are not multiples of 8 are reflect-padded and cropped back.
inline GrayImage jpeg_cycle(const GrayImage& img, int quality) {
  const auto q = quantization_table(quality);
  if (img.width == 0 || img.height == 0) throw std::invalid_argument("cannot compress an empty image");
  const std::size_t pw = (img.width + 7) / 8 * 8;
  const std::size_t ph = (img.height + 7) / 8 * 8;
  GrayImage out(img.width, img.height);
  Block8 block{};
  for (std::size_t by = 0; by < ph; by += 8) {
    for (std::size_t bx = 0; bx < pw; bx += 8) {
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          const std::size_t sx = detail::reflect_index(bx + x, img.width);
          const std::size_t sy = detail::reflect_index(by + y, img.height);
          block[y * 8 + x] = img.at(sx, sy) - 128.0;
        }
      Block8 coef = dct8x8(block);
      for (std::size_t i = 0; i < 64; ++i) coef[i] = std::nearbyint(coef[i] / q[i]) * q[i];
      const Block8 rec = idct8x8(coef);
      for (std::size_t y = 0; y < 8 && by + y < img.height; ++y)
        for (std::size_t x = 0; x < 8 && bx + x < img.width; ++x) {
          out.at(bx + x, by + y) = std::clamp(rec[y * 8 + x] + 128.0, 0.0, 255.0);
        }
    }
  }
  return out;
}

}  // namespace rbnn
