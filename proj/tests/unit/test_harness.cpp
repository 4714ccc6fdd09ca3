#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "rbnn/plot.hpp"
#include "rbnn/synth.hpp"

using namespace rbnn;
namespace fs = std::filesystem;

namespace {

ModelSpec tiny_spec() {
  return ModelSpec::parse(
      "input 16\nchannels 1\nclasses 2\n"
      "layer constrained_conv filters=2 kernel=3\nlayer conv filters=4 kernel=3 stride=2\nlayer relu\n"
      "layer flatten\nlayer dense units=2\n");
}

SweepSources tiny_sources() {
  SweepSources s;
  s.patch_size = 16;
  s.images = synth_textures(3, 48, 5);
  s.ids = {0, 1, 2};
  return s;
}

SweepSpec tiny_sweep() {
  SweepSpec s;
  s.start = 0.5;
  s.stop = 1.5;
  s.step = 0.25;
  s.patches = 4;
  s.mc_draws = 5;
  s.seed = 17;
  return s;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("rbnn_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PatchRow row(int label, double scale, double p, double sd, bool correct) {
  PatchRow r;
  r.patch_id = "x";
  r.label = label;
  r.scale = scale;
  r.mean_p_rescaled = p;
  r.std_p_rescaled = sd;
  r.n_draws = 10;
  r.correct = correct;
  return r;
}

SweepResult synthetic_result(std::size_t points) {
  SweepResult r;
  r.name = "synthetic";
  Rng rng(3);
  for (std::size_t g = 0; g < points; ++g) {
    const double s = (2.0 + static_cast<double>(g)) / 10.0;
    for (int j = 0; j < 4; ++j) {
      r.patches.push_back(row(kRescaled, s, rng.uniform(), rng.uniform(0.0, 0.2), rng.uniform() < 0.7));
    }
  }
  for (int j = 0; j < 4; ++j) r.patches.push_back(row(kOriginal, 1.0, rng.uniform(), 0.01, true));
  r.summary = aggregate(r.patches);
  return r;
}

std::vector<double> attr_values(const std::string& svg, const std::string& element_regex, const std::string& attr) {
  std::vector<double> out;
  const std::regex el(element_regex);
  const std::regex at(attr + "=\"([-0-9.]+)\"");
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), el); it != std::sregex_iterator(); ++it) {
    const std::string tag = it->str();
    std::smatch m;
    if (std::regex_search(tag, m, at)) out.push_back(std::stod(m[1]));
  }
  return out;
}

std::vector<std::pair<double, double>> points_of(const std::string& svg, const std::string& cls) {
  std::smatch m;
  const std::regex re("class=\"" + cls + "\"[^>]*points=\"([^\"]*)\"");
  if (!std::regex_search(svg, m, re)) return {};
  std::vector<std::pair<double, double>> out;
  std::istringstream is(m[1].str());
  std::string tok;
  while (is >> tok) {
    const auto comma = tok.find(',');
    out.emplace_back(std::stod(tok.substr(0, comma)), std::stod(tok.substr(comma + 1)));
  }
  return out;
}

}  // namespace

TEST(SweepSpec, GridOutsideGuardIsRejected) {
  SweepSpec s;
  s.start = 4.5;
  s.stop = 6.0;
  EXPECT_THROW(s.grid(), std::invalid_argument);
  s.start = 0.01;
  s.stop = 0.05;
  s.step = 0.01;
  EXPECT_THROW(s.grid(), std::invalid_argument);
  s = SweepSpec{};
  s.patches = 1;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = SweepSpec{};
  s.step = 0.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(SweepSpec, GridClipsToGuardAndRoundsCleanly) {
  SweepSpec s;
  s.start = 0.0;
  s.stop = 5.0;
  s.step = 0.05;
  const auto g = s.grid();
  EXPECT_DOUBLE_EQ(g.front(), 0.1);
  EXPECT_DOUBLE_EQ(g.back(), 4.1);
  EXPECT_EQ(g.size(), 81u);
  EXPECT_EQ(SweepSpec{}.grid().size(), 20u);
}

TEST(SweepSpec, FromConfig) {
  const auto kv = KeyValueConfig::parse("start = 0.2\nstop = 1.0\nkernel = areal\njpeg_quality = 50\nmixed = true\n");
  const SweepSpec s = SweepSpec::from_config(kv);
  EXPECT_EQ(s.kernel, Kernel::Areal);
  EXPECT_EQ(s.jpeg_quality, 50);
  EXPECT_TRUE(s.mixed);
  EXPECT_THROW(SweepSpec::from_config(KeyValueConfig::parse("stepp = 1\n")), std::invalid_argument);
}

TEST(Aggregate, IdenticalPatchesGiveThatPatchsConfidence) {
  std::vector<PatchRow> rows(8, row(kRescaled, 0.5, 0.83, 0.05, true));
  const auto s = aggregate(rows);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_DOUBLE_EQ(s[0].confidence, 0.83);
  EXPECT_DOUBLE_EQ(s[0].accuracy, 1.0);
  EXPECT_EQ(s[0].count, 8u);
  EXPECT_NEAR(s[0].band_high, 0.93, 1e-12);
  EXPECT_NEAR(s[0].band_low, 0.73, 1e-12);
}

TEST(Aggregate, CellsFollowFirstAppearanceAndMixedPoolsOriginals) {
  const std::vector<PatchRow> rows = {row(kRescaled, 0.5, 0.9, 0, true), row(kRescaled, 0.5, 0.7, 0, true),
                                      row(kOriginal, 1.0, 0.2, 0, true), row(kRescaled, 2.0, 0.4, 0, false)};
  const auto plain = aggregate(rows);
  ASSERT_EQ(plain.size(), 3u);
  EXPECT_EQ(plain[0].scale, 0.5);
  EXPECT_EQ(plain[1].label, kOriginal);
  EXPECT_EQ(plain[2].scale, 2.0);
  EXPECT_DOUBLE_EQ(plain[0].confidence, 0.8);

  const auto mixed = aggregate(rows, true);
  EXPECT_EQ(mixed[0].count, 3u);
  EXPECT_DOUBLE_EQ(mixed[0].confidence, (0.9 + 0.7 + 0.8) / 3.0);
  EXPECT_EQ(mixed[1], plain[1]);
  EXPECT_EQ(mixed[2].count, 2u);
  EXPECT_DOUBLE_EQ(mixed[2].accuracy, 0.5);
}

TEST(Aggregate, PooledStdCoversSpreadBetweenPatches) {
  // Draws {0.1, 0.3} and {0.3, 0.9}: pooled mean 0.4, pooled std 0.3.
  const std::vector<PatchRow> rows = {row(kRescaled, 0.5, 0.2, 0.1, false), row(kRescaled, 0.5, 0.6, 0.3, true)};
  EXPECT_NEAR(aggregate(rows)[0].mean_std, 0.2, 1e-15);
  const SummaryRow pooled = aggregate(rows, false, true)[0];
  EXPECT_NEAR(pooled.mean_std, 0.3, 1e-12);
  EXPECT_NEAR(pooled.band_low, 0.0, 1e-12);
  EXPECT_NEAR(pooled.band_high, 1.0, 1e-12);
  // Identical patches: pooling changes nothing.
  const std::vector<PatchRow> same(5, row(kRescaled, 0.5, 0.7, 0.05, true));
  EXPECT_NEAR(aggregate(same, false, true)[0].mean_std, 0.05, 1e-12);
}

TEST(SweepCsv, SummaryRecomputesFromPatchRows) {
  const SweepResult r = synthetic_result(6);
  const fs::path dir = scratch("csv");
  write_sweep(dir, r);
  const SweepResult back = read_sweep(dir, r.name);
  ASSERT_EQ(back.patches.size(), r.patches.size());
  EXPECT_EQ(back.summary, r.summary);
  EXPECT_EQ(read_summary_csv(dir / "synthetic_summary.csv"), r.summary);
  std::ofstream(dir / "bad_patches.csv") << "wrong,header\n";
  EXPECT_THROW(read_patch_csv(dir / "bad_patches.csv"), IoError);
}

TEST(Sweep, BaselineCoversGridPlusOriginals) {
  const Model m = build(tiny_spec(), ModelMode::Baseline, 1);
  const SweepResult r = run_baseline_sweep(m, tiny_sources(), tiny_sweep());
  // 0.5, 0.75, 1.25, 1.5 rescaled; the 1.0 grid point is the originals cell.
  EXPECT_EQ(r.rescaled_rows().size(), 4u);
  EXPECT_EQ(r.summary.size(), 5u);
  EXPECT_EQ(r.patches.size(), 5u * 4u);
  for (const auto& s : r.summary) {
    EXPECT_EQ(s.count, 4u);
    EXPECT_GE(s.confidence, 0.5);
    EXPECT_EQ(s.mean_std, 0.0);
  }
  EXPECT_THROW(run_bnn_sweep(m, tiny_sources(), tiny_sweep()), std::invalid_argument);
}

TEST(Sweep, BnnIsDeterministicUnderSeed) {
  VariationalInit init;
  init.rho = -2.0;
  const Model m = build(tiny_spec(), ModelMode::Bayesian, 2, init);
  const auto src = tiny_sources();
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  write_sweep(a, run_bnn_sweep(m, src, tiny_sweep()));
  write_sweep(b, run_bnn_sweep(m, src, tiny_sweep()));
  EXPECT_EQ(slurp(a / "bnn_patches.csv"), slurp(b / "bnn_patches.csv"));
  EXPECT_EQ(slurp(a / "bnn_summary.csv"), slurp(b / "bnn_summary.csv"));
  SweepSpec other = tiny_sweep();
  other.seed = 18;
  EXPECT_NE(run_bnn_sweep(m, src, other).summary, run_bnn_sweep(m, src, tiny_sweep()).summary);
}

TEST(Sweep, CollapsedPosteriorHasZeroWidthBands) {
  VariationalInit init;
  init.rho = -40.0;
  const Model m = build(tiny_spec(), ModelMode::Bayesian, 3, init);
  const SweepResult r = run_bnn_sweep(m, tiny_sources(), tiny_sweep());
  for (const auto& s : r.summary) {
    EXPECT_LT(s.band_width(), 1e-8);
    EXPECT_NEAR(s.band_high, s.band_low, 1e-8);
  }
}

TEST(Sweep, OodSuiteIsBnnSweepWithPerturbation) {
  const SweepSpec base = tiny_sweep();
  EXPECT_EQ(ood_spec(base, "jpeg85").jpeg_quality, 85);
  EXPECT_EQ(ood_spec(base, "jpeg50").jpeg_quality, 50);
  EXPECT_EQ(ood_spec(base, "nearest").kernel, Kernel::Nearest);
  EXPECT_EQ(ood_spec(base, "areal").kernel, Kernel::Areal);
  EXPECT_THROW(ood_spec(base, "gaussian"), std::invalid_argument);

  VariationalInit init;
  init.rho = -2.0;
  const Model m = build(tiny_spec(), ModelMode::Bayesian, 4, init);
  const auto src = tiny_sources();
  SweepSpec injected = base;
  injected.jpeg_quality = 85;
  EXPECT_EQ(run_ood_suite(m, src, base, "jpeg85").summary, run_bnn_sweep(m, src, injected).summary);
}

TEST(Sweep, SourcesTooSmallAreReported) {
  SweepSources src;
  src.patch_size = 16;
  src.images = {GrayImage(20, 20)};
  src.ids = {0};
  Rng rng(1);
  EXPECT_THROW(sweep_patches(src, 0.5, Kernel::Bilinear, 0, 2, rng), std::invalid_argument);
  EXPECT_EQ(sweep_patches(src, 1.0, Kernel::Bilinear, 0, 2, rng).size(), 2u);
}

TEST(Plot, BarHeightsParseBackWithinHalfPercent) {
  const SweepResult r = synthetic_result(12);
  const std::string svg = bar_chart_svg(r, training_range({0.5, 0.9}), "bars");
  const auto rows = r.rescaled_rows();
  const PlotGeometry g = geometry_for(rows);
  const auto acc = attr_values(svg, "<rect class=\"bar-accuracy\"[^>]*>", "y");
  const auto conf = attr_values(svg, "<rect class=\"bar-confidence\"[^>]*>", "y");
  ASSERT_EQ(acc.size(), rows.size());
  ASSERT_EQ(conf.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_NEAR(g.data_y(acc[i]), rows[i].accuracy, 0.005);
    EXPECT_NEAR(g.data_y(conf[i]), rows[i].confidence, 0.005);
  }
  EXPECT_NE(svg.find("class=\"training-range\""), std::string::npos);
}

TEST(Plot, BandParseBackWithinHalfPercent) {
  const SweepResult r = synthetic_result(12);
  const std::string svg = band_chart_svg(r, std::nullopt, "band");
  const auto rows = r.rescaled_rows();
  const PlotGeometry g = geometry_for(rows);
  const auto mean = points_of(svg, "mean");
  const auto band = points_of(svg, "band");
  ASSERT_EQ(mean.size(), rows.size());
  ASSERT_EQ(band.size(), 2 * rows.size());
  const double span = rows.back().scale - rows.front().scale;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_NEAR(g.data_x(mean[i].first), rows[i].scale, 0.005 * span);
    EXPECT_NEAR(g.data_y(mean[i].second), rows[i].mean_p_rescaled, 0.005);
    EXPECT_NEAR(g.data_y(band[i].second), rows[i].band_high, 0.005);
    EXPECT_NEAR(g.data_y(band[2 * rows.size() - 1 - i].second), rows[i].band_low, 0.005);
  }
  EXPECT_EQ(svg.find("training-range"), std::string::npos);
}

TEST(Plot, SinglePointGridGivesOneBarAndOnePoint) {
  const SweepResult r = synthetic_result(1);
  const std::string bars = bar_chart_svg(r, std::nullopt, "one");
  const std::string band = band_chart_svg(r, std::nullopt, "one");
  EXPECT_EQ(attr_values(bars, "<rect class=\"bar-accuracy\"[^>]*>", "y").size(), 1u);
  EXPECT_EQ(attr_values(band, "<circle class=\"point\"[^>]*>", "cy").size(), 1u);
  EXPECT_EQ(band.rfind("</svg>"), band.size() - 7);
}

TEST(Plot, EmptyGridWritesNothing) {
  SweepResult empty;
  empty.name = "empty";
  const fs::path dir = scratch("empty");
  EXPECT_THROW(emit_plots({synthetic_result(3), empty}, ChartKind::Band, dir), std::invalid_argument);
  EXPECT_FALSE(fs::exists(dir));
  EXPECT_THROW(emit_plots({}, ChartKind::Bars, dir), std::invalid_argument);
}

TEST(Plot, EmitWritesCsvAndSvgPerSweep) {
  const fs::path dir = scratch("emit");
  SweepResult a = synthetic_result(4), b = synthetic_result(5);
  b.name = "other";
  const auto files = emit_plots({a, b}, ChartKind::Bars, dir, training_range({0.3, 0.5}));
  EXPECT_EQ(files.size(), 6u);
  for (const auto& f : files) EXPECT_TRUE(fs::exists(f)) << f;
  EXPECT_EQ(read_sweep(dir, "other").summary, b.summary);
}

TEST(Plot, UnwritableDirectoryIsAnIoError) {
  const fs::path file = scratch("blocker");
  std::ofstream(file) << "x";
  EXPECT_THROW(emit_plots({synthetic_result(2)}, ChartKind::Band, file / "sub"), IoError);
}

TEST(Plot, TrainingRangeComesFromScales) {
  EXPECT_FALSE(training_range({}).has_value());
  const auto r = training_range({0.9, 0.5, 1.7});
  EXPECT_EQ(r->low, 0.5);
  EXPECT_EQ(r->high, 1.7);
}
