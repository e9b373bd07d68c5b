// Single-phase powder pattern simulation: intensity factors per reflection,
// line profiles, instrument kernels, background, zero shift and noise.

#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xdc/crystal.hpp"
#include "xdc/pattern.hpp"

namespace xdc {

enum class ProfileShape { PseudoVoigt, ExactVoigt };
enum class ThermalModel { IsotropicB, DebyeTemperature };

struct SimConfig {
  double wavelength = 1.5406;  // Cu K-alpha, Angstrom
  double two_theta_min = 10.0;
  double two_theta_max = 80.0;
  double step = 0.02;
  double crystallite_size = 50.0;  // nm, [10, 120]
  double thermal_B = 0.05;         // Angstrom^2, [0.01, 0.2]
  double zero_shift = 0.0;         // degrees, [0, 0.2]
  double detector_distance = 450.0;  // mm, [300, 600]
  double slit_half_height = 5.0;     // mm, [3, 8]
  double sample_half_height = 2.0;   // mm, [1, 4]
  int background_order = 6;
  double background_amplitude = 0.05;  // fraction of the peak maximum
  double noise_ratio = 0.02;
  bool preferred_orientation_enabled = false;
  double preferred_orientation = 0.15;  // March-Dollase r
  Miller orientation_axis{0, 0, 1};
  double scale = 1.0;
  std::uint64_t seed = 0;

  ProfileShape profile = ProfileShape::PseudoVoigt;
  // Angular width of the axial smearing kernel is atan(kappa (H+S) / distance).
  double geometry_kappa = 0.02;
  double smoothing_sigma = 0.01;  // degrees, Gaussian noise-smoothing kernel
  ThermalModel thermal_model = ThermalModel::IsotropicB;
  double temperature = 298.0;        // K, DebyeTemperature model only
  double debye_temperature = 300.0;  // K, DebyeTemperature model only
  double lattice_extinction = 0.0;   // accepted, no effect
  double lattice_torsion = 0.0;      // accepted, no effect

  Grid grid() const { return Grid::from_range(two_theta_min, two_theta_max, step); }
  /// Checks the documented ranges; throws Errc::InvalidConfig.
  void validate() const;
};

struct Peak {
  double two_theta = 0;
  double intensity = 0;  // integrated
  double fwhm = 0;
  Miller hkl{};
};
using PeakList = std::vector<Peak>;

/// Analytic form factor at |Q| (1/Angstrom); s = |Q| / 4pi.
double form_factor(std::string_view element, double q_mag);

/// F = sum_j occ_j f_j(Q) exp(2 pi i h.r_j) over the expanded sites.
/// `atom_damping`, when given, multiplies each atom's term (per-site Debye-Waller amplitude).
std::complex<double> structure_factor(const CrystalStructure& structure, const Miller& hkl, double q_mag,
                                      std::span<const double> atom_damping = {});

/// (1 + cos^2 2theta) / (sin^2 theta cos theta), theta in degrees, 0 < theta < 90.
double lp_factor(double theta_deg);

/// exp(-2 B sin^2 theta / lambda^2).
double debye_waller(double theta_deg, double wavelength, double thermal_B);

/// phi(x) = (1/x) int_0^x t / (e^t - 1) dt by adaptive Simpson (1e-8 relative).
double debye_function(double x);

/// Debye-model exponent M (D = exp(-2M)) with SI constants:
///   M = 6 h^2 T / (m k Theta^2) * (phi(Theta/T) + Theta/(4T)) * sin^2 theta / lambda^2
/// T, Theta in K, mass in amu, theta in degrees, wavelength in Angstrom.
double debye_temperature_M(double temperature, double debye_temperature, double mass_amu, double theta_deg,
                           double wavelength);

/// Scherrer FWHM in degrees 2theta with K = 0.9. Size in nm, wavelength in Angstrom.
double scherrer_fwhm(double crystallite_size_nm, double wavelength, double theta_deg);

inline constexpr double kScherrerK = 0.9;
inline constexpr double kProfileWindow = 8.0;  // half-width of the rendered profile in FWHM units

/// Unit-area line profile of total FWHM `fwhm` sampled on the grid. The
/// Gaussian and Lorentzian components share one width.
std::vector<double> voigt_profile(double center, double fwhm, const Grid& grid,
                                  ProfileShape shape = ProfileShape::PseudoVoigt);

/// Adds area * profile into `out` (same grid).
void add_profile(std::span<double> out, const Grid& grid, double center, double fwhm, double area,
                 ProfileShape shape = ProfileShape::PseudoVoigt);

/// One-sided (low-angle) triangular kernel of angular width w, offsets -J..0.
std::vector<double> geometry_kernel(const SimConfig& cfg);
double geometry_kernel_width(const SimConfig& cfg);
/// Convolves with kernel taps at offsets [first_offset, first_offset + k.size()), zero outside.
std::vector<double> convolve(std::span<const double> signal, std::span<const double> kernel, int first_offset);

/// March-Dollase factor averaged over the family images.
double march_dollase(const CrystalStructure& structure, const Reflection& refl, const Miller& axis, double r);

struct RenderResult {
  DiffractionPattern pattern;
  PeakList peaks;
};

/// Full simulation chain. Deterministic in (structure, cfg) including cfg.seed.
RenderResult render_pattern(const CrystalStructure& structure, const SimConfig& cfg);

/// Pointwise sum of w_i * x_i. Grids must agree.
DiffractionPattern superpose(std::span<const DiffractionPattern> patterns, std::span<const double> weights);

/// Stable 64-bit mix of a seed and a string key.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view key);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace xdc
