#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rbnn/sweep.hpp"

namespace rbnn {

/// Fixed SVG layout shared by both chart kinds. Data space: x in [x_min,
/// x_max], y in [0, 1].
struct PlotGeometry {
  double width = 820.0;
  double height = 420.0;
  double left = 64.0;
  double right = 24.0;
  double top = 36.0;
  double bottom = 56.0;
  double x_min = 0.0;
  double x_max = 1.0;

  double plot_width() const { return width - left - right; }
  double plot_height() const { return height - top - bottom; }
  double px(double x) const { return left + (x - x_min) / (x_max - x_min) * plot_width(); }
  double py(double y) const { return top + (1.0 - y) * plot_height(); }
  double data_x(double px_) const { return x_min + (px_ - left) / plot_width() * (x_max - x_min); }
  double data_y(double py_) const { return 1.0 - (py_ - top) / plot_height(); }
};

/// Closed interval of trained factors to shade.
struct TrainingRange {
  double low = 0.0;
  double high = 0.0;
};

inline std::optional<TrainingRange> training_range(const std::vector<double>& trained_scales) {
  if (trained_scales.empty()) return std::nullopt;
  const auto [lo, hi] = std::minmax_element(trained_scales.begin(), trained_scales.end());
  return TrainingRange{*lo, *hi};
}

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

class SvgWriter {
 public:
  explicit SvgWriter(const PlotGeometry& g) : g_(g) {
    os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(g.width) << "\" height=\"" << fmt(g.height)
        << "\" viewBox=\"0 0 " << fmt(g.width) << ' ' << fmt(g.height) << "\">\n"
        << "<rect x=\"0\" y=\"0\" width=\"" << fmt(g.width) << "\" height=\"" << fmt(g.height) << "\" fill=\"white\"/>\n";
  }

  void title(const std::string& text) {
    os_ << "<text x=\"" << fmt(g_.width / 2) << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        << "font-size=\"15\">" << escape(text) << "</text>\n";
  }

  void shade(const TrainingRange& r, double pad) {
    const double x0 = std::max(g_.x_min, r.low - pad), x1 = std::min(g_.x_max, r.high + pad);
    if (x1 <= x0) return;
    os_ << "<rect class=\"training-range\" x=\"" << fmt(g_.px(x0)) << "\" y=\"" << fmt(g_.py(1.0)) << "\" width=\""
        << fmt(g_.px(x1) - g_.px(x0)) << "\" height=\"" << fmt(g_.plot_height()) << "\" fill=\"#dddddd\"/>\n";
  }

  void axes(const std::string& x_label, const std::string& y_label, const std::vector<double>& x_ticks) {
    os_ << "<g font-family=\"sans-serif\" font-size=\"11\" stroke-width=\"1\">\n";
    for (int i = 0; i <= 5; ++i) {
      const double y = i / 5.0;
      os_ << "<line x1=\"" << fmt(g_.left - 4) << "\" y1=\"" << fmt(g_.py(y)) << "\" x2=\"" << fmt(g_.left + g_.plot_width())
          << "\" y2=\"" << fmt(g_.py(y)) << "\" stroke=\"#eeeeee\"/>\n"
          << "<text x=\"" << fmt(g_.left - 8) << "\" y=\"" << fmt(g_.py(y) + 4) << "\" text-anchor=\"end\">"
          << fmt(y).substr(0, 3) << "</text>\n";
    }
    for (double x : x_ticks) {
      char lab[16];
      std::snprintf(lab, sizeof lab, "%g", x);
      os_ << "<text x=\"" << fmt(g_.px(x)) << "\" y=\"" << fmt(g_.py(0.0) + 16) << "\" text-anchor=\"middle\">" << lab
          << "</text>\n";
    }
    os_ << "<line x1=\"" << fmt(g_.left) << "\" y1=\"" << fmt(g_.py(0)) << "\" x2=\"" << fmt(g_.left + g_.plot_width())
        << "\" y2=\"" << fmt(g_.py(0)) << "\" stroke=\"black\"/>\n"
        << "<line x1=\"" << fmt(g_.left) << "\" y1=\"" << fmt(g_.py(0)) << "\" x2=\"" << fmt(g_.left) << "\" y2=\""
        << fmt(g_.py(1)) << "\" stroke=\"black\"/>\n"
        << "<text x=\"" << fmt(g_.left + g_.plot_width() / 2) << "\" y=\"" << fmt(g_.height - 12)
        << "\" text-anchor=\"middle\">" << escape(x_label) << "</text>\n"
        << "<text transform=\"translate(16," << fmt(g_.top + g_.plot_height() / 2) << ") rotate(-90)\" "
        << "text-anchor=\"middle\">" << escape(y_label) << "</text>\n</g>\n";
  }

  void legend(const std::vector<std::pair<std::string, std::string>>& entries) {
    double x = g_.left + 8;
    for (const auto& [label, color] : entries) {
      os_ << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(g_.top + 4) << "\" width=\"10\" height=\"10\" fill=\"" << color
          << "\"/>\n<text x=\"" << fmt(x + 14) << "\" y=\"" << fmt(g_.top + 13)
          << "\" font-family=\"sans-serif\" font-size=\"11\">" << escape(label) << "</text>\n";
      x += 24 + 7.0 * static_cast<double>(label.size());
    }
  }

  std::ostream& raw() { return os_; }
  std::string finish() {
    os_ << "</svg>\n";
    return os_.str();
  }

 private:
  static std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
      if (c == '<') out += "&lt;";
      else if (c == '>') out += "&gt;";
      else if (c == '&') out += "&amp;";
      else out += c;
    }
    return out;
  }

  const PlotGeometry& g_;
  std::ostringstream os_;
};

inline double grid_spacing(const std::vector<SummaryRow>& rows) {
  double d = 1.0;
  for (std::size_t i = 1; i < rows.size(); ++i) d = std::min(d, std::abs(rows[i].scale - rows[i - 1].scale));
  return rows.size() > 1 ? d : 0.1;
}

inline std::vector<double> ticks(double lo, double hi) {
  const double span = hi - lo;
  const double step = span > 3.0 ? 0.5 : span > 1.0 ? 0.2 : 0.1;
  std::vector<double> out;
  for (double t = std::ceil(lo / step - 1e-9) * step; t <= hi + 1e-9; t += step) out.push_back(std::round(t * 1e6) / 1e6);
  return out;
}

}  // namespace detail

/// Geometry whose x range covers the rescaled rows with half a grid step of margin.
inline PlotGeometry geometry_for(const std::vector<SummaryRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("cannot plot an empty sweep");
  PlotGeometry g;
  const double d = detail::grid_spacing(rows);
  g.x_min = rows.front().scale - d / 2;
  g.x_max = rows.back().scale + d / 2;
  return g;
}

/// Grouped bars per factor: accuracy (class "bar-accuracy") beside mean
/// confidence (class "bar-confidence"). Bar tops encode the values.
inline std::string bar_chart_svg(const SweepResult& r, std::optional<TrainingRange> range, const std::string& title) {
  const auto rows = r.rescaled_rows();
  const PlotGeometry g = geometry_for(rows);
  const double d = detail::grid_spacing(rows);
  detail::SvgWriter svg(g);
  svg.title(title);
  if (range) svg.shade(*range, d / 2);
  svg.axes("rescaling factor", "accuracy / confidence", detail::ticks(rows.front().scale, rows.back().scale));
  const double bar = (g.px(d) - g.px(0)) * 0.38;
  for (const auto& row : rows) {
    const double cx = g.px(row.scale);
    for (const auto& [cls, value, color, x] : {std::tuple{"bar-accuracy", row.accuracy, "#d62728", cx - bar},
                                                 std::tuple{"bar-confidence", row.confidence, "#1f77b4", cx}}) {
      svg.raw() << "<rect class=\"" << cls << "\" data-scale=\"" << format_scale(row.scale) << "\" x=\""
                << detail::fmt(x) << "\" y=\"" << detail::fmt(g.py(value)) << "\" width=\"" << detail::fmt(bar)
                << "\" height=\"" << detail::fmt(g.py(0) - g.py(value)) << "\" fill=\"" << color << "\"/>\n";
    }
  }
  svg.legend({{"accuracy", "#d62728"}, {"confidence", "#1f77b4"}});
  return svg.finish();
}

/// Mean P(rescaled) polyline (class "mean") with the clamped +/- 2 std ribbon
/// (class "band": upper edge left to right, then lower edge right to left).
inline std::string band_chart_svg(const SweepResult& r, std::optional<TrainingRange> range, const std::string& title) {
  const auto rows = r.rescaled_rows();
  const PlotGeometry g = geometry_for(rows);
  detail::SvgWriter svg(g);
  svg.title(title);
  if (range) svg.shade(*range, detail::grid_spacing(rows) / 2);
  svg.axes("rescaling factor", "P(rescaled)", detail::ticks(rows.front().scale, rows.back().scale));
  auto& os = svg.raw();
  os << "<polygon class=\"band\" fill=\"#1f77b4\" fill-opacity=\"0.3\" stroke=\"none\" points=\"";
  for (const auto& row : rows) os << detail::fmt(g.px(row.scale)) << ',' << detail::fmt(g.py(row.band_high)) << ' ';
  for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
    os << detail::fmt(g.px(it->scale)) << ',' << detail::fmt(g.py(it->band_low)) << ' ';
  }
  os << "\"/>\n<polyline class=\"mean\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
  for (const auto& row : rows) os << detail::fmt(g.px(row.scale)) << ',' << detail::fmt(g.py(row.mean_p_rescaled)) << ' ';
  os << "\"/>\n";
  for (const auto& row : rows) {
    os << "<circle class=\"point\" cx=\"" << detail::fmt(g.px(row.scale)) << "\" cy=\""
       << detail::fmt(g.py(row.mean_p_rescaled)) << "\" r=\"2.5\" fill=\"#1f77b4\"/>\n";
  }
  svg.legend({{"mean P(rescaled)", "#1f77b4"}});
  return svg.finish();
}

enum class ChartKind { Bars, Band };

/// Writes <name>_patches.csv, <name>_summary.csv and <name>.svg for every
/// result. Nothing is written if any result is empty.
inline std::vector<std::filesystem::path> emit_plots(const std::vector<SweepResult>& results, ChartKind kind,
                                                     const std::filesystem::path& out_dir,
                                                     std::optional<TrainingRange> range = std::nullopt) {
  if (results.empty()) throw std::invalid_argument("no sweep results to plot");
  std::vector<std::string> svgs;
  for (const auto& r : results) {
    if (r.rescaled_rows().empty()) throw std::invalid_argument("sweep '" + r.name + "' has an empty grid");
    svgs.push_back(kind == ChartKind::Bars ? bar_chart_svg(r, range, r.name) : band_chart_svg(r, range, r.name));
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  for (std::size_t i = 0; i < results.size(); ++i) {
    write_sweep(out_dir, results[i]);
    const auto svg_path = out_dir / (results[i].name + ".svg");
    std::ofstream os(svg_path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + svg_path.string());
    os << svgs[i];
    written.push_back(out_dir / (results[i].name + "_patches.csv"));
    written.push_back(out_dir / (results[i].name + "_summary.csv"));
    written.push_back(svg_path);
  }
  return written;
}

}  // namespace rbnn
