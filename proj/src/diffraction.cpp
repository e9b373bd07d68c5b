#include "xdc/diffraction.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>

#include "xdc/elements.hpp"
#include "xdc/error.hpp"

namespace xdc {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kDeg = kPi / 180.0;
constexpr double kLn2 = std::numbers::ln2;

constexpr double kPlanck = 6.62607015e-34;     // J s
constexpr double kBoltzmann = 1.380649e-23;    // J/K
constexpr double kAmu = 1.66053906660e-27;     // kg

void check_range(double v, double lo, double hi, const char* name) {
  if (!(v >= lo && v <= hi))
    fail(Errc::InvalidConfig, std::string(name) + " = " + std::to_string(v) + " outside [" + std::to_string(lo) +
                                  ", " + std::to_string(hi) + "]");
}

// Width ratio (total FWHM / component FWHM) when the Gaussian and Lorentzian
// components have equal FWHM.
double tch_equal_width_ratio() {
  static const double r = std::pow(1.0 + 2.69269 + 2.42843 + 4.47163 + 0.07842 + 1.0, 0.2);
  return r;
}

double tch_eta() {
  const double q = 1.0 / tch_equal_width_ratio();
  return 1.36603 * q - 0.47719 * q * q + 0.11116 * q * q * q;
}

// Olivero-Longbothum: f_V = 0.5346 f_L + sqrt(0.2166 f_L^2 + f_G^2) with f_L = f_G.
constexpr double kOliveroEqualWidthRatio = 1.6376;

double gaussian(double x, double fwhm) {
  const double c = 4.0 * kLn2 / (fwhm * fwhm);
  return std::sqrt(c / kPi) * std::exp(-c * x * x);
}

double lorentzian(double x, double fwhm) {
  const double g = 0.5 * fwhm;
  return g / (kPi * (x * x + g * g));
}

double pseudo_voigt(double x, double fwhm) {
  static const double eta = tch_eta();
  return eta * lorentzian(x, fwhm) + (1.0 - eta) * gaussian(x, fwhm);
}

double exact_voigt(double x, double fwhm) {
  const double comp = fwhm / kOliveroEqualWidthRatio;
  const double sigma = comp / (2.0 * std::sqrt(2.0 * kLn2));
  constexpr int n = 400;  // even, Simpson
  const double lo = -7.0 * sigma, hi = 7.0 * sigma;
  const double h = (hi - lo) / n;
  double acc = 0;
  for (int i = 0; i <= n; ++i) {
    const double t = lo + i * h;
    const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    acc += w * gaussian(t, comp) * lorentzian(x - t, comp);
  }
  return acc * h / 3.0;
}

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double fa, double fm, double fb,
                        double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  return adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::string_view key) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char ch : key) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(seed) ^ h);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ (b * 0x9e3779b97f4a7c15ULL + 1));
}

void SimConfig::validate() const {
  if (!(wavelength > 0)) fail(Errc::InvalidConfig, "wavelength must be positive");
  if (!(two_theta_min > 0 && two_theta_min < two_theta_max && two_theta_max < 180))
    fail(Errc::InvalidConfig, "need 0 < two_theta_min < two_theta_max < 180");
  grid();
  check_range(crystallite_size, 10, 120, "crystallite_size");
  check_range(thermal_B, 0.0, 0.2, "thermal_B");
  check_range(zero_shift, 0, 0.2, "zero_shift");
  check_range(detector_distance, 300, 600, "detector_distance");
  check_range(slit_half_height, 3, 8, "slit_half_height");
  check_range(sample_half_height, 1, 4, "sample_half_height");
  check_range(background_order, 0, 12, "background_order");
  check_range(background_amplitude, 0, 10, "background_amplitude");
  check_range(noise_ratio, 0, 1, "noise_ratio");
  if (!(scale > 0)) fail(Errc::InvalidConfig, "scale must be positive");
  if (preferred_orientation_enabled && !(preferred_orientation > 0))
    fail(Errc::InvalidConfig, "March-Dollase r must be positive");
  if (!(geometry_kappa >= 0) || !(smoothing_sigma >= 0)) fail(Errc::InvalidConfig, "kernel widths must be >= 0");
  if (thermal_model == ThermalModel::DebyeTemperature && !(temperature > 0 && debye_temperature > 0))
    fail(Errc::InvalidConfig, "Debye model needs positive temperatures");
}

double form_factor(std::string_view symbol, double q_mag) {
  const ElementData& e = element(symbol);
  const double s = q_mag / (4.0 * kPi);
  const double s2 = s * s;
  double f = e.c;
  for (int i = 0; i < 4; ++i) f += e.a[i] * std::exp(-e.b[i] * s2);
  return f;
}

std::complex<double> structure_factor(const CrystalStructure& structure, const Miller& hkl, double q_mag,
                                      std::span<const double> atom_damping) {
  std::complex<double> sum = 0;
  // form factors per distinct element
  std::vector<std::pair<std::string_view, double>> cache;
  for (std::size_t j = 0; j < structure.sites.size(); ++j) {
    const AtomSite& site = structure.sites[j];
    double f = 0;
    auto it = std::find_if(cache.begin(), cache.end(), [&](const auto& p) { return p.first == site.element; });
    if (it != cache.end()) {
      f = it->second;
    } else {
      f = form_factor(site.element, q_mag);
      cache.emplace_back(site.element, f);
    }
    const double phase = 2.0 * kPi * (hkl[0] * site.frac[0] + hkl[1] * site.frac[1] + hkl[2] * site.frac[2]);
    double amp = site.occupancy * f;
    if (!atom_damping.empty()) amp *= atom_damping[j];
    sum += amp * std::complex<double>(std::cos(phase), std::sin(phase));
  }
  return sum;
}

double lp_factor(double theta_deg) {
  if (!(theta_deg > 0 && theta_deg < 90)) fail(Errc::ThetaOutOfRange, "theta must lie in (0, 90) degrees");
  const double t = theta_deg * kDeg;
  const double c2 = std::cos(2 * t);
  const double s = std::sin(t);
  return (1 + c2 * c2) / (s * s * std::cos(t));
}

double debye_waller(double theta_deg, double wavelength, double thermal_B) {
  const double s = std::sin(theta_deg * kDeg);
  return std::exp(-2.0 * thermal_B * s * s / (wavelength * wavelength));
}

double debye_function(double x) {
  if (!(x > 0)) fail(Errc::NonPositiveInput, "Debye function argument must be positive");
  if (x < 1e-8) return 1.0 - x / 4.0;
  auto f = [](double t) { return t < 1e-12 ? 1.0 - 0.5 * t : t / std::expm1(t); };
  const double fa = f(0), fb = f(x), fm = f(0.5 * x);
  const double whole = x / 6.0 * (fa + 4 * fm + fb);
  // integrand lies in (0, 1], so the integral is at least x * f(x)
  const double tol = 1e-10 * std::max(x * fb, 1e-300);
  return adaptive_simpson(f, 0.0, x, fa, fm, fb, whole, tol, 50) / x;
}

double debye_temperature_M(double temperature, double debye_temperature, double mass_amu, double theta_deg,
                           double wavelength) {
  if (!(temperature > 0 && debye_temperature > 0 && mass_amu > 0 && wavelength > 0))
    fail(Errc::NonPositiveInput, "temperature, Debye temperature, mass and wavelength must be positive");
  const double m = mass_amu * kAmu;
  const double x = debye_temperature / temperature;
  const double pref = 6.0 * kPlanck * kPlanck * temperature / (m * kBoltzmann * debye_temperature * debye_temperature);
  const double s = std::sin(theta_deg * kDeg);
  const double lambda_m = wavelength * 1e-10;
  return pref * (debye_function(x) + x / 4.0) * s * s / (lambda_m * lambda_m);
}

double scherrer_fwhm(double size_nm, double wavelength, double theta_deg) {
  const double lambda_nm = wavelength * 0.1;
  return kScherrerK * lambda_nm / (size_nm * std::cos(theta_deg * kDeg)) / kDeg;
}

void add_profile(std::span<double> out, const Grid& grid, double center, double fwhm, double area,
                 ProfileShape shape) {
  if (!(fwhm > 0)) fail(Errc::NonPositiveFwhm, "profile FWHM must be positive");
  const double half = kProfileWindow * fwhm;
  const long lo = static_cast<long>(std::floor((center - half - grid.min) / grid.step));
  const long hi = static_cast<long>(std::ceil((center + half - grid.min) / grid.step));
  std::vector<double> vals;
  vals.reserve(static_cast<std::size_t>(hi - lo + 1));
  double norm = 0;
  for (long i = lo; i <= hi; ++i) {
    const double x = grid.min + static_cast<double>(i) * grid.step - center;
    double v = 0;
    if (std::abs(x) <= half) v = shape == ProfileShape::PseudoVoigt ? pseudo_voigt(x, fwhm) : exact_voigt(x, fwhm);
    vals.push_back(v);
    norm += v;
  }
  const long n = static_cast<long>(out.size());
  if (norm <= 0) {
    // narrower than the grid: deposit at the nearest point
    const long i = std::lround((center - grid.min) / grid.step);
    if (i >= 0 && i < n) out[static_cast<std::size_t>(i)] += area / grid.step;
    return;
  }
  const double k = area / (norm * grid.step);
  for (long i = std::max(lo, 0L); i <= std::min(hi, n - 1); ++i) out[static_cast<std::size_t>(i)] += k * vals[static_cast<std::size_t>(i - lo)];
}

std::vector<double> voigt_profile(double center, double fwhm, const Grid& grid, ProfileShape shape) {
  std::vector<double> out(grid.length, 0.0);
  add_profile(out, grid, center, fwhm, 1.0, shape);
  return out;
}

double geometry_kernel_width(const SimConfig& cfg) {
  return std::atan(cfg.geometry_kappa * (cfg.slit_half_height + cfg.sample_half_height) / cfg.detector_distance) /
         kDeg;
}

std::vector<double> geometry_kernel(const SimConfig& cfg) {
  const double w = geometry_kernel_width(cfg);
  if (!(w > 0)) return {1.0};
  const int taps = static_cast<int>(std::ceil(w / cfg.step));
  // index 0 is offset -taps, last index is offset 0
  std::vector<double> k(static_cast<std::size_t>(taps) + 1);
  double sum = 0;
  for (int j = 0; j <= taps; ++j) {
    const double dist = (taps - j) * cfg.step;
    k[static_cast<std::size_t>(j)] = std::max(0.0, 1.0 - dist / w);
    sum += k[static_cast<std::size_t>(j)];
  }
  for (double& v : k) v /= sum;
  return k;
}

std::vector<double> convolve(std::span<const double> signal, std::span<const double> kernel, int first_offset) {
  const long n = static_cast<long>(signal.size());
  std::vector<double> out(signal.size(), 0.0);
  for (long i = 0; i < n; ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < kernel.size(); ++j) {
      const long src = i - (first_offset + static_cast<long>(j));
      if (src >= 0 && src < n) acc += kernel[j] * signal[static_cast<std::size_t>(src)];
    }
    out[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

double march_dollase(const CrystalStructure& structure, const Reflection& refl, const Miller& axis, double r) {
  const Mat3 g = reciprocal_metric(structure.lattice);
  auto dot = [&](const Miller& u, const Miller& v) {
    double acc = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) acc += u[i] * g[i][j] * v[j];
    return acc;
  };
  const double axis_norm = std::sqrt(dot(axis, axis));
  const auto images = miller_orbit(laue_rotations(structure.symmetry_ops), refl.hkl);
  double acc = 0;
  for (const auto& h : images) {
    const double c = dot(h, axis) / (std::sqrt(dot(h, h)) * axis_norm);
    const double c2 = std::min(1.0, c * c);
    acc += std::pow(r * r * c2 + (1.0 - c2) / r, -1.5);
  }
  return acc / static_cast<double>(images.size());
}

RenderResult render_pattern(const CrystalStructure& structure, const SimConfig& cfg) {
  cfg.validate();
  const Grid grid = cfg.grid();
  const auto reflections =
      enumerate_reflections(structure, cfg.wavelength, {cfg.two_theta_min, cfg.two_theta_max});
  if (reflections.empty()) fail(Errc::NoReflectionsInRange, "no reflections for " + structure.id + " in scan range");

  std::mt19937_64 rng(derive_seed(cfg.seed, structure.id));

  std::vector<double> masses;
  if (cfg.thermal_model == ThermalModel::DebyeTemperature)
    for (const auto& site : structure.sites) masses.push_back(element(site.element).mass_amu);

  RenderResult res;
  std::vector<double> signal(grid.length, 0.0);
  std::vector<double> damping;
  for (const auto& refl : reflections) {
    const double theta = 0.5 * refl.two_theta;
    const double q = 4.0 * kPi * std::sin(theta * kDeg) / cfg.wavelength;
    double dw = 1.0;
    std::complex<double> f;
    if (cfg.thermal_model == ThermalModel::DebyeTemperature) {
      damping.resize(masses.size());
      for (std::size_t j = 0; j < masses.size(); ++j)
        damping[j] = std::exp(-debye_temperature_M(cfg.temperature, cfg.debye_temperature, masses[j], theta,
                                                   cfg.wavelength));
      f = structure_factor(structure, refl.hkl, q, damping);
    } else {
      f = structure_factor(structure, refl.hkl, q);
      dw = debye_waller(theta, cfg.wavelength, cfg.thermal_B);
    }
    double po = 1.0;
    if (cfg.preferred_orientation_enabled)
      po = march_dollase(structure, refl, cfg.orientation_axis, cfg.preferred_orientation);
    const double intensity = cfg.scale * std::norm(f) * lp_factor(theta) * refl.multiplicity * po * dw;
    const double fwhm = scherrer_fwhm(cfg.crystallite_size, cfg.wavelength, theta);
    add_profile(signal, grid, refl.two_theta, fwhm, intensity, cfg.profile);
    res.peaks.push_back({refl.two_theta, intensity, fwhm, refl.hkl});
  }

  const auto gk = geometry_kernel(cfg);
  signal = convolve(signal, gk, -static_cast<int>(gk.size()) + 1);
  if (cfg.smoothing_sigma > 0) {
    const int half = static_cast<int>(std::ceil(3.0 * cfg.smoothing_sigma / cfg.step));
    std::vector<double> k(static_cast<std::size_t>(2 * half + 1));
    double sum = 0;
    for (int j = -half; j <= half; ++j) {
      const double x = j * cfg.step / cfg.smoothing_sigma;
      sum += k[static_cast<std::size_t>(j + half)] = std::exp(-0.5 * x * x);
    }
    for (double& v : k) v /= sum;
    signal = convolve(signal, k, -half);
  }

  // polynomial background on u in [-1, 1]
  const double peak_max = *std::max_element(signal.begin(), signal.end());
  std::uniform_real_distribution<double> coef(-1.0, 1.0);
  std::vector<double> coeffs(static_cast<std::size_t>(cfg.background_order) + 1);
  for (double& c : coeffs) c = coef(rng);
  if (cfg.background_amplitude > 0 && peak_max > 0) {
    std::vector<double> bg(grid.length);
    const double mid = 0.5 * (grid.at(0) + grid.at(grid.length - 1));
    const double halfw = 0.5 * (grid.at(grid.length - 1) - grid.at(0));
    for (std::size_t i = 0; i < grid.length; ++i) {
      const double u = (grid.at(i) - mid) / halfw;
      double acc = 0;
      for (std::size_t k = coeffs.size(); k-- > 0;) acc = acc * u + coeffs[k];
      bg[i] = acc;
    }
    const double lo = *std::min_element(bg.begin(), bg.end());
    for (double& v : bg) v -= lo;
    const double hi = *std::max_element(bg.begin(), bg.end());
    if (hi > 0)
      for (std::size_t i = 0; i < grid.length; ++i) signal[i] += bg[i] / hi * cfg.background_amplitude * peak_max;
  }

  if (cfg.zero_shift != 0) {
    std::vector<double> shifted(grid.length, 0.0);
    for (std::size_t i = 0; i < grid.length; ++i) {
      const double pos = static_cast<double>(i) - cfg.zero_shift / cfg.step;
      const double fl = std::floor(pos);
      const long i0 = static_cast<long>(fl);
      const double frac = pos - fl;
      auto at = [&](long j) {
        return (j >= 0 && j < static_cast<long>(grid.length)) ? signal[static_cast<std::size_t>(j)] : 0.0;
      };
      shifted[i] = (1.0 - frac) * at(i0) + frac * at(i0 + 1);
    }
    signal.swap(shifted);
  }

  const double m = *std::max_element(signal.begin(), signal.end());
  if (cfg.noise_ratio > 0 && m > 0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_ratio * m);
    for (double& v : signal) v += noise(rng);
  }
  for (double& v : signal) v = std::max(v, 0.0);

  res.pattern = DiffractionPattern(grid, std::move(signal));
  return res;
}

DiffractionPattern superpose(std::span<const DiffractionPattern> patterns, std::span<const double> weights) {
  if (patterns.empty()) fail(Errc::LengthMismatch, "no patterns to superpose");
  if (patterns.size() != weights.size()) fail(Errc::LengthMismatch, "one weight per pattern required");
  DiffractionPattern out(patterns[0].grid);
  for (std::size_t k = 0; k < patterns.size(); ++k) {
    const auto& p = patterns[k];
    if (!p.grid.same_as(out.grid)) fail(Errc::GridMismatch, "patterns are on different grids");
    if (p.size() != out.size()) fail(Errc::LengthMismatch, "pattern length differs from its grid");
    if (!(weights[k] >= 0)) fail(Errc::InvalidConfig, "superposition weights must be non-negative");
    for (std::size_t i = 0; i < out.size(); ++i) out.intensities[i] += weights[k] * p.intensities[i];
  }
  return out;
}

}  // namespace xdc
