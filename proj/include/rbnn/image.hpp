#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rbnn/checkpoint.hpp"
#include "rbnn/tensor.hpp"

namespace rbnn {

/// Single-channel image, row-major, values nominally in [0, 255].
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), pixels(w * h, fill) {}

  double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  bool all_finite() const {
    return std::all_of(pixels.begin(), pixels.end(), [](double v) { return std::isfinite(v); });
  }

  /// Copy of the w x h window with top-left corner (x0, y0).
  GrayImage crop(std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) const {
    if (x0 + w > width || y0 + h > height) throw std::out_of_range("crop window outside image");
    GrayImage out(w, h);
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(pixels.data() + (y0 + y) * width + x0, w, out.pixels.data() + y * w);
    }
    return out;
  }

  bool operator==(const GrayImage&) const = default;
};

/// Interleaved multi-channel image as read from disk.
struct ColorImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<double> data;
};

/// L = 0.299 R + 0.587 G + 0.114 B, kept in floating point.
inline GrayImage luma(const ColorImage& rgb) {
  if (rgb.channels != 3) throw std::invalid_argument("luma needs a 3-channel image, got " + std::to_string(rgb.channels));
  GrayImage g(rgb.width, rgb.height);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) {
    const double* p = rgb.data.data() + 3 * i;
    g.pixels[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  }
  return g;
}

namespace detail {

inline std::string lower_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

inline ColorImage read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  ColorImage out{img.width, img.height, color ? 3u : 1u, {}};
  out.data.assign(buf.begin(), buf.end());
  return out;
}

inline std::string pnm_token(std::istream& is) {
  std::string tok;
  while (is) {
    const int c = is.get();
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
    } else if (std::isspace(c)) {
      if (!tok.empty()) return tok;
    } else if (c != EOF) {
      tok.push_back(static_cast<char>(c));
    }
  }
  return tok;
}

/// Binary PGM (P5) or PPM (P6) with maxval <= 255.
inline ColorImage read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const std::string magic = pnm_token(is);
  if (magic != "P5" && magic != "P6") throw IoError(path.string() + ": only binary P5/P6 files are supported");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(pnm_token(is));
    h = std::stoul(pnm_token(is));
    maxval = std::stoul(pnm_token(is));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw IoError(path.string() + ": unsupported dimensions or maxval");
  ColorImage out{w, h, magic == "P6" ? 3u : 1u, {}};
  std::vector<unsigned char> buf(w * h * out.channels);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw IoError(path.string() + ": truncated pixel data");
  }
  out.data.resize(buf.size());
  const double k = 255.0 / static_cast<double>(maxval);
  for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = maxval == 255 ? buf[i] : buf[i] * k;
  return out;
}

}  // namespace detail

inline bool is_image_file(const std::filesystem::path& p) {
  const std::string ext = detail::lower_extension(p);
  return ext == ".png" || ext == ".ppm" || ext == ".pgm";
}

inline ColorImage read_image(const std::filesystem::path& path) {
  const std::string ext = detail::lower_extension(path);
  if (ext == ".png") return detail::read_png(path);
  if (ext == ".ppm" || ext == ".pgm") return detail::read_pnm(path);
  throw IoError("unsupported image format: " + path.string());
}

/// Reads PNG/PPM/PGM; color files go through luma().
inline GrayImage read_gray(const std::filesystem::path& path) {
  ColorImage c = read_image(path);
  if (c.channels == 3) return luma(c);
  GrayImage g(c.width, c.height);
  g.pixels = std::move(c.data);
  return g;
}

/// 8-bit binary PGM; values are rounded and clamped.
inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<unsigned char>(std::clamp(std::nearbyint(img.pixels[i]), 0.0, 255.0));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

/// Raw little-endian float64 blob, row-major.
inline void write_patch(const std::filesystem::path& path, const GrayImage& patch) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write patch " + path.string());
  os.write(reinterpret_cast<const char*>(patch.pixels.data()),
           static_cast<std::streamsize>(patch.pixels.size() * sizeof(double)));
  if (!os) throw IoError("failed writing patch " + path.string());
}

inline GrayImage read_patch(const std::filesystem::path& path, std::size_t size) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw IoError("cannot open patch " + path.string());
  const auto bytes = static_cast<std::size_t>(is.tellg());
  if (bytes != size * size * sizeof(double)) {
    throw IoError("patch " + path.string() + " has " + std::to_string(bytes) + " bytes, expected " +
                  std::to_string(size * size * sizeof(double)));
  }
  is.seekg(0);
  GrayImage p(size, size);
  is.read(reinterpret_cast<char*>(p.pixels.data()), static_cast<std::streamsize>(bytes));
  if (!p.all_finite()) throw NumericError("non-finite pixel in patch " + path.string());
  return p;
}

}  // namespace rbnn
