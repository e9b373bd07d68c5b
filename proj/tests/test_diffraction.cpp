#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "xdc/diffraction.hpp"
#include "xdc/elements.hpp"
#include "xdc/error.hpp"

using namespace xdc;

namespace {

CrystalStructure cubic_p1(const std::string& el = "Cu", double a = 4.0) {
  CrystalStructure s;
  s.id = "cubic_" + el;
  s.lattice = {a, a, a, 90, 90, 90};
  s.symmetry_ops = {identity_op()};
  s.sites = {{el, {0, 0, 0}, 1.0}};
  s.space_group_number = 1;
  return s;
}

CrystalStructure body_centred(const std::string& el) {
  auto s = cubic_p1(el);
  s.sites.push_back({el, {0.5, 0.5, 0.5}, 1.0});
  return s;
}

SimConfig clean_config() {
  SimConfig cfg;
  cfg.background_amplitude = 0;
  cfg.noise_ratio = 0;
  cfg.zero_shift = 0;
  return cfg;
}

// half-maximum crossings by linear interpolation
double measured_fwhm(const std::vector<double>& y, double step) {
  std::size_t m = 0;
  for (std::size_t i = 1; i < y.size(); ++i)
    if (y[i] > y[m]) m = i;
  const double half = 0.5 * y[m];
  std::size_t l = m, r = m;
  while (l > 0 && y[l] > half) --l;
  while (r + 1 < y.size() && y[r] > half) ++r;
  const double xl = l + (half - y[l]) / (y[l + 1] - y[l]);
  const double xr = r - 1 + (y[r - 1] - half) / (y[r - 1] - y[r]);
  return (xr - xl) * step;
}

}  // namespace

TEST(FormFactor, ForwardValueNearZ) {
  for (const auto& e : element_table()) {
    const double f0 = form_factor(e.symbol, 0.0);
    EXPECT_NEAR(f0, e.z, 0.02 * e.z) << e.symbol;
    double prev = f0;
    for (double q = 0.1; q <= 8.0; q += 0.1) {
      const double f = form_factor(e.symbol, q);
      EXPECT_LE(f, prev + 1e-12) << e.symbol;
      EXPECT_GT(f, 0.0) << e.symbol;
      prev = f;
    }
  }
  EXPECT_THROW(form_factor("Xx", 1.0), Error);
}

TEST(StructureFactor, PhaseSums) {
  const double q = 2.0;
  const double f = form_factor("Fe", q);
  auto one = cubic_p1("Fe");
  auto f1 = structure_factor(one, {1, 2, 3}, q);
  EXPECT_NEAR(f1.real(), f, 1e-12);
  EXPECT_NEAR(f1.imag(), 0.0, 1e-12);
  auto bc = body_centred("Fe");
  EXPECT_LT(std::abs(structure_factor(bc, {1, 0, 0}, q)), 1e-12);
  EXPECT_NEAR(std::abs(structure_factor(bc, {1, 1, 0}, q)), 2 * f, 1e-12);
}

TEST(Factors, HandValues) {
  EXPECT_NEAR(lp_factor(45.0), 2.8284271247461903, 1e-12);
  EXPECT_THROW(lp_factor(0.0), Error);
  EXPECT_THROW(lp_factor(90.0), Error);
  EXPECT_DOUBLE_EQ(debye_waller(30, 1.5406, 0.0), 1.0);
  EXPECT_NEAR(debye_waller(30, 1.5406, 0.2), 0.9587424612442393, 1e-12);
  EXPECT_GT(debye_waller(20, 1.5406, 0.1), debye_waller(21, 1.5406, 0.1));
  EXPECT_NEAR(scherrer_fwhm(50, 1.5406, 20), 0.16908271570681782, 1e-12);
  EXPECT_GT(scherrer_fwhm(20, 1.5406, 20), scherrer_fwhm(50, 1.5406, 20));
  EXPECT_GT(scherrer_fwhm(50, 1.5406, 30), scherrer_fwhm(50, 1.5406, 20));
}

TEST(Factors, DebyeFunction) {
  EXPECT_NEAR(debye_function(1.0), 0.7775046341122482, 1e-9);
  EXPECT_NEAR(debye_function(1e-6), 1.0, 1e-6);
  EXPECT_NEAR(debye_function(343.0 / 298.0), 0.7485719498175352, 1e-9);
  // copper at room temperature
  EXPECT_NEAR(debye_temperature_M(298, 343, 63.546, 30, 1.5406), 0.049994975082663824, 1e-9);
  EXPECT_GE(debye_temperature_M(10, 400, 12.0, 5, 1.5406), 0.0);
  EXPECT_THROW(debye_temperature_M(0, 300, 1, 10, 1.5), Error);
}

TEST(Profile, NormalizationAndWidth) {
  Grid g = Grid::canonical();
  for (auto shape : {ProfileShape::PseudoVoigt, ProfileShape::ExactVoigt}) {
    for (double fwhm : {0.1, 0.2, 0.35}) {
      const double center = 40.013;
      auto p = voigt_profile(center, fwhm, g, shape);
      double area = 0;
      std::size_t arg = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        area += p[i] * g.step;
        if (p[i] > p[arg]) arg = i;
      }
      EXPECT_NEAR(area, 1.0, 1e-3);
      EXPECT_EQ(arg, static_cast<std::size_t>(std::lround((center - g.min) / g.step)));
      if (fwhm >= 5 * g.step) {
        EXPECT_NEAR(measured_fwhm(p, g.step), fwhm, g.step);
      }
    }
  }
  EXPECT_THROW(voigt_profile(40, 0.0, g), Error);
}

TEST(Profile, ShapesAgree) {
  Grid g = Grid::canonical();
  auto a = voigt_profile(45.0, 0.3, g, ProfileShape::PseudoVoigt);
  auto b = voigt_profile(45.0, 0.3, g, ProfileShape::ExactVoigt);
  double peak = 0, diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    peak = std::max(peak, b[i]);
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  EXPECT_LT(diff / peak, 0.02);
}

TEST(Render, BraggPeakPosition) {
  auto s = cubic_p1("Na");
  auto res = render_pattern(s, clean_config());
  const auto& y = res.pattern.intensities;
  // local maxima near the {111} line
  double best = 1e9;
  for (std::size_t i = 1; i + 1 < y.size(); ++i)
    if (y[i] > y[i - 1] && y[i] >= y[i + 1] && y[i] > 0.01 * res.pattern.max()) {
      const double x = res.pattern.grid.at(i);
      if (std::abs(x - 38.97) < std::abs(best - 38.97)) best = x;
    }
  EXPECT_LE(std::abs(best - 38.97), 0.02);
  for (double v : y) EXPECT_GE(v, 0.0);
  const double lam = 1.5406;
  auto g = reciprocal_metric(s.lattice);
  for (const auto& p : res.peaks) {
    const double d = d_spacing(g, p.hkl);
    EXPECT_LT(std::abs(2 * d * std::sin(p.two_theta / 2 * M_PI / 180) - lam) / lam, 1e-9);
    EXPECT_GT(p.fwhm, 0);
    EXPECT_GE(p.intensity, 0);
  }
}

TEST(Render, ZeroFarFromPeaks) {
  auto s = cubic_p1("Na", 3.0);
  auto cfg = clean_config();
  cfg.smoothing_sigma = 0;
  cfg.geometry_kappa = 0;
  auto res = render_pattern(s, cfg);
  for (std::size_t i = 0; i < res.pattern.size(); ++i) {
    const double x = res.pattern.grid.at(i);
    bool far = true;
    for (const auto& p : res.peaks) far = far && std::abs(x - p.two_theta) > 10 * p.fwhm;
    if (far) {
      EXPECT_EQ(res.pattern.intensities[i], 0.0) << x;
    }
  }
}

TEST(Render, Deterministic) {
  auto s = body_centred("Fe");
  SimConfig cfg;
  cfg.seed = 99;
  cfg.zero_shift = 0.05;
  auto a = render_pattern(s, cfg);
  auto b = render_pattern(s, cfg);
  EXPECT_EQ(a.pattern.intensities, b.pattern.intensities);
  cfg.seed = 100;
  auto c = render_pattern(s, cfg);
  EXPECT_NE(a.pattern.intensities, c.pattern.intensities);
  for (double v : a.pattern.intensities) EXPECT_GE(v, 0.0);
}

TEST(Render, ZeroShiftMovesPeak) {
  auto s = cubic_p1("Na");
  auto cfg = clean_config();
  auto base = render_pattern(s, cfg).pattern;
  cfg.zero_shift = 0.1;
  auto moved = render_pattern(s, cfg).pattern;
  for (std::size_t i = 5; i < base.size(); ++i) EXPECT_NEAR(moved.intensities[i], base.intensities[i - 5], 1e-9 * base.max());
}

TEST(Render, NoReflections) {
  auto cfg = clean_config();
  cfg.wavelength = 50.0;
  EXPECT_THROW(render_pattern(cubic_p1("Na"), cfg), Error);
}

TEST(Render, DebyeModelDampsHighAngles) {
  auto s = cubic_p1("Cu");
  auto cfg = clean_config();
  auto iso = render_pattern(s, cfg);
  cfg.thermal_model = ThermalModel::DebyeTemperature;
  auto deb = render_pattern(s, cfg);
  ASSERT_EQ(iso.peaks.size(), deb.peaks.size());
  const double r0 = deb.peaks.front().intensity / iso.peaks.front().intensity;
  const double r1 = deb.peaks.back().intensity / iso.peaks.back().intensity;
  EXPECT_LT(r1, r0);
}

TEST(Render, MarchDollaseUnitAtR1) {
  auto s = cubic_p1("Cu");
  auto refl = enumerate_reflections(s, 1.5406, {10, 80});
  for (const auto& r : refl) EXPECT_NEAR(march_dollase(s, r, {0, 0, 1}, 1.0), 1.0, 1e-12);
}

TEST(Kernel, GeometryOneSided) {
  SimConfig cfg;
  auto k = geometry_kernel(cfg);
  double sum = 0;
  for (double v : k) sum += v;
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_NEAR(geometry_kernel_width(cfg), std::atan(0.02 * 7.0 / 450.0) * 180 / M_PI, 1e-15);
  // delta at index 10 spreads only to lower indices
  std::vector<double> delta(30, 0.0);
  delta[10] = 1.0;
  auto out = convolve(delta, k, -static_cast<int>(k.size()) + 1);
  for (std::size_t i = 11; i < out.size(); ++i) EXPECT_EQ(out[i], 0.0);
}

TEST(Superpose, Linear) {
  Grid g{10, 0.5, 40};
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<DiffractionPattern> ps;
  for (int k = 0; k < 3; ++k) {
    DiffractionPattern p(g);
    for (double& v : p.intensities) v = u(rng);
    ps.push_back(p);
  }
  std::vector<double> w{0.2, 0.3, 0.5};
  auto mix = superpose(ps, w);
  for (std::size_t i = 0; i < g.length; ++i)
    EXPECT_NEAR(mix.intensities[i], 0.2 * ps[0].intensities[i] + 0.3 * ps[1].intensities[i] + 0.5 * ps[2].intensities[i],
                1e-15);
  std::vector<DiffractionPattern> two{ps[0], ps[0]};
  std::vector<double> half{0.5, 0.5};
  EXPECT_EQ(superpose(two, half).intensities, ps[0].intensities);
  std::vector<double> w3{0.6, 0.9, 1.5};
  auto scaled = superpose(ps, w3);
  for (std::size_t i = 0; i < g.length; ++i) EXPECT_NEAR(scaled.intensities[i], 3 * mix.intensities[i], 1e-14);

  DiffractionPattern other(Grid{10, 0.25, 40});
  std::vector<DiffractionPattern> bad{ps[0], other};
  std::vector<double> w2{0.5, 0.5};
  try {
    superpose(bad, w2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::GridMismatch);
  }
}

TEST(Config, Validation) {
  SimConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.grid().length, 3500u);
  cfg.crystallite_size = 5;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = SimConfig{};
  cfg.step = 0.03;
  EXPECT_THROW(cfg.validate(), Error);
}
