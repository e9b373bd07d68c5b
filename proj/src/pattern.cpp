#include "xdc/pattern.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "xdc/error.hpp"

namespace xdc {

bool Grid::same_as(const Grid& o) const {
  return length == o.length && std::abs(min - o.min) < 1e-9 && std::abs(step - o.step) < 1e-12;
}

Grid Grid::from_range(double min, double max, double step) {
  if (!(step > 0) || !(max > min)) fail(Errc::InvalidConfig, "grid needs step > 0 and max > min");
  const double n = (max - min) / step;
  const double rounded = std::round(n);
  if (std::abs(n - rounded) > 1e-9 * std::max(1.0, rounded))
    fail(Errc::InvalidConfig, "grid width is not an integer number of steps");
  return {min, step, static_cast<std::size_t>(rounded)};
}

DiffractionPattern::DiffractionPattern(Grid g, std::vector<double> v) : grid(g), intensities(std::move(v)) {
  if (intensities.size() != grid.length) fail(Errc::LengthMismatch, "intensity vector does not match grid length");
}

double DiffractionPattern::max() const {
  return intensities.empty() ? 0.0 : *std::max_element(intensities.begin(), intensities.end());
}

void DiffractionPattern::normalize_max() {
  const double m = max();
  if (m > 0)
    for (double& v : intensities) v /= m;
}

void write_pattern_text(const std::string& path, const DiffractionPattern& p) {
  std::ofstream out(path);
  if (!out) fail(Errc::Io, "cannot write " + path);
  out << "# two_theta intensity\n";
  char buf[64];
  for (std::size_t i = 0; i < p.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.6f %.17g\n", p.grid.at(i), p.intensities[i]);
    out << buf;
  }
  if (!out) fail(Errc::Io, "write failed for " + path);
}

std::vector<std::pair<double, double>> read_two_column(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::Io, "cannot open " + path);
  std::vector<std::pair<double, double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    for (char& ch : line)
      if (ch == ',' || ch == ';') ch = ' ';
    std::istringstream ls(line);
    double a = 0, b = 0;
    if (!(ls >> a >> b)) fail(Errc::Io, "unreadable row in " + path + ": " + line);
    rows.emplace_back(a, b);
  }
  return rows;
}

namespace {

constexpr char kMagic[4] = {'X', 'D', 'C', 'P'};

template <typename T>
void put(std::ostream& o, T v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) fail(Errc::Io, "truncated pattern file " + path);
  return v;
}

bool has_binary_magic(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  char m[4] = {};
  in.read(m, 4);
  return in && std::memcmp(m, kMagic, 4) == 0;
}

}  // namespace

void write_pattern_binary(const std::string& path, const DiffractionPattern& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::Io, "cannot write " + path);
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kPatternFormatVersion);
  put<double>(out, p.grid.min);
  put<double>(out, p.grid.step);
  put<std::uint64_t>(out, p.grid.length);
  out.write(reinterpret_cast<const char*>(p.intensities.data()),
            static_cast<std::streamsize>(p.intensities.size() * sizeof(double)));
  if (!out) fail(Errc::Io, "write failed for " + path);
}

DiffractionPattern read_pattern_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::Io, "cannot open " + path);
  char m[4] = {};
  in.read(m, 4);
  if (!in || std::memcmp(m, kMagic, 4) != 0) fail(Errc::Io, path + " is not a binary pattern file");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kPatternFormatVersion) fail(Errc::Io, path + ": unsupported pattern version " + std::to_string(version));
  Grid g;
  g.min = get<double>(in, path);
  g.step = get<double>(in, path);
  const auto n = get<std::uint64_t>(in, path);
  if (n > (1u << 26) || !(g.step > 0)) fail(Errc::Io, path + ": implausible grid header");
  g.length = static_cast<std::size_t>(n);
  std::vector<double> v(g.length);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!in) fail(Errc::Io, "truncated pattern file " + path);
  for (double x : v)
    if (!std::isfinite(x)) fail(Errc::Io, path + ": non-finite intensity");
  return {g, std::move(v)};
}

DiffractionPattern load_pattern(const std::string& path) {
  if (has_binary_magic(path)) return read_pattern_binary(path);
  const auto rows = read_two_column(path);
  if (rows.size() < 2) fail(Errc::EmptyInput, path + " has fewer than two rows");
  const double step = rows[1].first - rows[0].first;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (std::abs(rows[i].first - rows[i - 1].first - step) > 1e-6)
      fail(Errc::GridMismatch, path + " is not on a uniform grid; resample it first");
  Grid g{rows[0].first, step, rows.size()};
  std::vector<double> v;
  v.reserve(rows.size());
  for (const auto& r : rows) v.push_back(r.second);
  return {g, std::move(v)};
}

}  // namespace xdc
