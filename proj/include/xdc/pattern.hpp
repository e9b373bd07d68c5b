// Diffraction patterns on a uniform 2theta grid, plus their file formats.

#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace xdc {

/// Uniform 2theta grid: point i sits at min + i * step, i = 0..length-1.
struct Grid {
  double min = 10.0;
  double step = 0.02;
  std::size_t length = 3500;

  double at(std::size_t i) const { return min + static_cast<double>(i) * step; }
  /// Exclusive upper end (min + length * step).
  double end() const { return min + static_cast<double>(length) * step; }
  bool same_as(const Grid& o) const;

  /// Grid covering [min, max) with the given step. The width must be an
  /// integer number of steps (1e-9 relative), else Errc::InvalidConfig.
  static Grid from_range(double min, double max, double step);
  /// 10..80 degrees, 0.02 step, 3500 points.
  static Grid canonical() { return {}; }
};

struct DiffractionPattern {
  Grid grid;
  std::vector<double> intensities;

  DiffractionPattern() = default;
  DiffractionPattern(Grid g, std::vector<double> v);
  explicit DiffractionPattern(Grid g) : grid(g), intensities(g.length, 0.0) {}

  std::size_t size() const { return intensities.size(); }
  double max() const;
  /// Divides by the maximum (no-op on an all-zero pattern).
  void normalize_max();
};

// Two-column text: "two_theta intensity" per line, '#' comments.
void write_pattern_text(const std::string& path, const DiffractionPattern& p);
std::vector<std::pair<double, double>> read_two_column(const std::string& path);

// Binary: "XDCP" magic, u32 version, f64 grid_min, f64 step, u64 L, L x f64.
inline constexpr unsigned kPatternFormatVersion = 1;
void write_pattern_binary(const std::string& path, const DiffractionPattern& p);
DiffractionPattern read_pattern_binary(const std::string& path);

/// Reads either format (binary detected by magic). Text input must already be
/// on a uniform grid; use resample_to_grid for irregular data.
DiffractionPattern load_pattern(const std::string& path);

}  // namespace xdc
