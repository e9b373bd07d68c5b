#include "xdc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "xdc/error.hpp"

namespace xdc {

namespace fs = std::filesystem;

std::vector<std::vector<double>> MixtureSample::weighted_targets() const {
  std::vector<std::vector<double>> out;
  for (std::size_t k = 0; k < components.size(); ++k) {
    std::vector<double> t(components[k].intensities);
    const double w = k < weights.size() ? weights[k] : 0.0;
    for (double& v : t) v *= w;
    out.push_back(std::move(t));
  }
  return out;
}

const std::vector<std::string>& SplitManifest::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  fail(Errc::InvalidConfig, "unknown split '" + name + "' (train, val, test)");
}

const DiffractionPattern& ReferenceLibrary::at(const std::string& id) const {
  auto it = entries.find(id);
  if (it == entries.end()) fail(Errc::UnknownAnchor, "id '" + id + "' not in library");
  return it->second;
}

std::vector<std::string> ReferenceLibrary::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, p] : entries) out.push_back(id);
  return out;
}

std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do r = rng();
  while (r >= limit);
  return r % n;
}

void shuffle_ids(std::vector<std::string>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

int sample_cardinality(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

std::vector<double> sample_weights(int n, double alpha, double floor, std::mt19937_64& rng) {
  if (n < 1) fail(Errc::InvalidConfig, "need at least one weight");
  if (!(alpha > 0)) fail(Errc::InvalidConfig, "Dirichlet alpha must be positive");
  if (n * floor >= 1.0) fail(Errc::InfeasibleFloor, std::to_string(n) + " x " + std::to_string(floor) + " >= 1");
  std::exponential_distribution<double> expo(1.0);
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int attempt = 0; attempt < 10000; ++attempt) {
    double sum = 0;
    for (double& v : w) sum += v = alpha == 1.0 ? expo(rng) : gamma(rng);
    if (!(sum > 0)) continue;
    for (double& v : w) v /= sum;
    // renormalized sum can be off by an ulp; fold the residue into the largest weight
    const double resid = 1.0 - std::accumulate(w.begin(), w.end(), 0.0);
    *std::max_element(w.begin(), w.end()) += resid;
    if (*std::min_element(w.begin(), w.end()) >= floor) return w;
  }
  fail(Errc::RejectionCapExceeded, "no weight vector above the floor after 10000 draws");
}

MixtureSample make_mixture(const ReferenceLibrary& library, std::span<const std::string> pool,
                           const std::string& anchor_id, std::mt19937_64& rng, const MixtureConfig& cfg) {
  if (std::find(pool.begin(), pool.end(), anchor_id) == pool.end() || !library.entries.count(anchor_id))
    fail(Errc::UnknownAnchor, "anchor '" + anchor_id + "' not in split");
  if (static_cast<int>(pool.size()) < cfg.k_max)
    fail(Errc::InsufficientLibrary,
         "split holds " + std::to_string(pool.size()) + " patterns, need " + std::to_string(cfg.k_max));
  if (cfg.max_components > cfg.k_max || cfg.min_components < 1 || cfg.min_components > cfg.max_components)
    fail(Errc::InvalidConfig, "component count range must lie in [1, k_max]");

  MixtureSample s;
  s.active_count = sample_cardinality(rng, cfg.min_components, cfg.max_components);
  s.component_ids.push_back(anchor_id);
  std::vector<std::string> others;
  for (const auto& id : pool)
    if (id != anchor_id) others.push_back(id);
  // partial Fisher-Yates: first N-1 entries
  for (int i = 0; i < s.active_count - 1; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + uniform_index(rng, others.size() - static_cast<std::size_t>(i));
    std::swap(others[static_cast<std::size_t>(i)], others[j]);
    s.component_ids.push_back(others[static_cast<std::size_t>(i)]);
  }
  s.weights = sample_weights(s.active_count, cfg.alpha, cfg.weight_floor, rng);

  const Grid grid = library.grid;
  std::vector<const DiffractionPattern*> comps;
  for (const auto& id : s.component_ids) {
    comps.push_back(&library.at(id));
    if (!comps.back()->grid.same_as(grid)) fail(Errc::GridMismatch, "library entry " + id + " off the library grid");
  }
  std::vector<double> mix(grid.length, 0.0);
  for (std::size_t k = 0; k < comps.size(); ++k)
    for (std::size_t i = 0; i < grid.length; ++i) mix[i] += s.weights[k] * comps[k]->intensities[i];
  s.noise_sigma = cfg.noise_sigma;
  if (cfg.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (double& v : mix) v = std::max(0.0, v + noise(rng));
  }
  double c = *std::max_element(mix.begin(), mix.end());
  for (const auto* p : comps) c = std::max(c, p->max());
  if (!(c > 0)) c = 1.0;
  for (double& v : mix) v /= c;
  s.mixed = DiffractionPattern(grid, std::move(mix));
  for (int k = 0; k < cfg.k_max; ++k) {
    DiffractionPattern p(grid);
    if (k < s.active_count)
      for (std::size_t i = 0; i < grid.length; ++i) p.intensities[i] = comps[static_cast<std::size_t>(k)]->intensities[i] / c;
    s.components.push_back(std::move(p));
  }
  return s;
}

MixtureSample mixture_at(const ReferenceLibrary& library, std::span<const std::string> pool, std::uint64_t epoch,
                         std::uint64_t index, std::uint64_t seed, const MixtureConfig& cfg) {
  if (pool.empty()) fail(Errc::InsufficientLibrary, "empty split");
  const std::uint64_t stream = derive_seed(seed, epoch, index);
  std::mt19937_64 rng(stream);
  auto s = make_mixture(library, pool, pool[index % pool.size()], rng, cfg);
  s.seed = stream;
  return s;
}

SplitManifest split_by_crystal(const std::vector<std::string>& ids, std::array<double, 3> ratios,
                               std::uint64_t seed) {
  std::set<std::string> seen(ids.begin(), ids.end());
  if (seen.size() != ids.size()) fail(Errc::DuplicateIds, "crystal ids must be unique");
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (ratios[0] <= 0 || ratios[1] <= 0 || ratios[2] <= 0 || std::abs(total - 1.0) > 1e-9)
    fail(Errc::InvalidConfig, "split ratios must be positive and sum to 1");
  SplitManifest m;
  m.ratios = ratios;
  m.seed = seed;
  // sort first so the manifest does not depend on input order
  std::vector<std::string> order(ids);
  std::sort(order.begin(), order.end());
  std::mt19937_64 rng(derive_seed(seed, "split"));
  shuffle_ids(order, rng);
  const std::size_t n = order.size();
  const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n))));
  m.train.assign(order.begin(), order.begin() + static_cast<long>(n_train));
  m.val.assign(order.begin() + static_cast<long>(n_train), order.begin() + static_cast<long>(n_train + n_val));
  m.test.assign(order.begin() + static_cast<long>(n_train + n_val), order.end());
  return m;
}

SimConfig perturbed_config(const SimConfig& base, std::mt19937_64& rng) {
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  SimConfig c = base;
  c.crystallite_size = u(10, 120);
  c.thermal_B = u(0.01, 0.2);
  c.zero_shift = u(0, 0.2);
  c.detector_distance = u(300, 600);
  c.slit_half_height = u(3, 8);
  c.sample_half_height = u(1, 4);
  c.seed = rng();
  return c;
}

int selected_candidate(const std::string& id, std::uint64_t seed, int renders_per_crystal) {
  if (renders_per_crystal < 1) fail(Errc::InvalidConfig, "renders_per_crystal must be >= 1");
  return static_cast<int>(derive_seed(seed, id) % static_cast<std::uint64_t>(renders_per_crystal));
}

DiffractionPattern render_candidate(const CrystalStructure& s, const SimConfig& base, std::uint64_t seed, int r) {
  std::mt19937_64 rng(derive_seed(derive_seed(seed, s.id), static_cast<std::uint64_t>(r)));
  auto p = render_pattern(s, perturbed_config(base, rng)).pattern;
  p.normalize_max();
  return p;
}

ReferenceLibrary build_library(const std::vector<CrystalStructure>& structures, const SimConfig& base,
                               std::uint64_t seed, int renders_per_crystal, int threads) {
  std::vector<DiffractionPattern> out(structures.size());
  auto work = [&](std::size_t i) {
    const auto& s = structures[i];
    out[i] = render_candidate(s, base, seed, selected_candidate(s.id, seed, renders_per_crystal));
  };
  const std::size_t nt = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), structures.size()));
  if (nt == 1) {
    for (std::size_t i = 0; i < structures.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(nt);
    for (std::size_t t = 0; t < nt; ++t)
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < structures.size(); i += nt) work(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  ReferenceLibrary lib;
  lib.grid = base.grid();
  for (std::size_t i = 0; i < structures.size(); ++i) {
    if (!lib.entries.emplace(structures[i].id, std::move(out[i])).second)
      fail(Errc::DuplicateIds, "duplicate structure id " + structures[i].id);
  }
  return lib;
}

std::vector<double> snip_background(std::span<const double> pattern, const SnipOptions& opt) {
  if (opt.iterations < 1) fail(Errc::InvalidConfig, "SNIP needs at least one iteration");
  const std::size_t n = pattern.size();
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (pattern[i] < 0) fail(Errc::NegativeInput, "SNIP input must be non-negative");
    v[i] = std::log(std::log(std::sqrt(pattern[i] + 1.0) + 1.0) + 1.0);
  }
  std::vector<double> next(n);
  const long last = static_cast<long>(n) - 1;
  for (int it = 0; it < opt.iterations; ++it) {
    const long m = opt.decreasing ? opt.iterations - it : it + 1;
    for (long i = 0; i <= last; ++i) {
      const double a = v[static_cast<std::size_t>(std::max(0L, i - m))];
      const double b = v[static_cast<std::size_t>(std::min(last, i + m))];
      next[static_cast<std::size_t>(i)] = std::min(v[static_cast<std::size_t>(i)], 0.5 * (a + b));
    }
    v.swap(next);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double e = std::exp(std::exp(v[i]) - 1.0) - 1.0;
    v[i] = std::min(pattern[i], e * e - 1.0);
  }
  return v;
}

DiffractionPattern resample_to_grid(std::span<const std::pair<double, double>> raw, const Grid& grid) {
  if (raw.size() < 2) fail(Errc::EmptyInput, "need at least two raw points");
  for (std::size_t i = 1; i < raw.size(); ++i)
    if (!(raw[i].first > raw[i - 1].first)) fail(Errc::NonMonotonicAngles, "raw angles must increase strictly");
  DiffractionPattern out(grid);
  std::size_t j = 0;
  for (std::size_t i = 0; i < grid.length; ++i) {
    const double x = grid.at(i);
    if (x < raw.front().first || x > raw.back().first) continue;
    while (j + 2 < raw.size() && raw[j + 1].first < x) ++j;
    const auto& [x0, y0] = raw[j];
    const auto& [x1, y1] = raw[j + 1];
    const double t = (x - x0) / (x1 - x0);
    out.intensities[i] = std::max(0.0, y0 + t * (y1 - y0));
  }
  out.normalize_max();
  return out;
}

// ---- persistence -------------------------------------------------------------

void write_manifest(const std::string& path, const SplitManifest& m) {
  std::ofstream out(path);
  if (!out) fail(Errc::Io, "cannot write " + path);
  out << "# xdc-manifest v1\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "ratios=%.17g %.17g %.17g\n", m.ratios[0], m.ratios[1], m.ratios[2]);
  out << buf << "seed=" << m.seed << "\n";
  for (const auto& [name, ids] : {std::pair{"train", &m.train}, {"val", &m.val}, {"test", &m.test}})
    for (const auto& id : *ids) out << name << ' ' << id << '\n';
  if (!out) fail(Errc::Io, "write failed for " + path);
}

SplitManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::Io, "cannot open " + path);
  SplitManifest m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("ratios=", 0) == 0) {
      std::istringstream ls(line.substr(7));
      ls >> m.ratios[0] >> m.ratios[1] >> m.ratios[2];
    } else if (line.rfind("seed=", 0) == 0) {
      m.seed = std::stoull(line.substr(5));
    } else {
      std::istringstream ls(line);
      std::string name, id;
      if (!(ls >> name >> id)) fail(Errc::Io, "bad manifest line: " + line);
      if (name == "train") m.train.push_back(id);
      else if (name == "val") m.val.push_back(id);
      else if (name == "test") m.test.push_back(id);
      else fail(Errc::Io, "unknown split in manifest: " + name);
    }
  }
  return m;
}

void write_library(const std::string& dir, const ReferenceLibrary& lib) {
  fs::create_directories(dir);
  std::ofstream idx(fs::path(dir) / "index.txt");
  if (!idx) fail(Errc::Io, "cannot write library index in " + dir);
  char buf[128];
  std::snprintf(buf, sizeof buf, "grid=%.17g %.17g %zu\n", lib.grid.min, lib.grid.step, lib.grid.length);
  idx << "# xdc-library v1\n" << buf;
  std::size_t n = 0;
  for (const auto& [id, p] : lib.entries) {
    const std::string file = "p" + std::to_string(n++) + ".xdcp";
    write_pattern_binary((fs::path(dir) / file).string(), p);
    idx << file << ' ' << id << '\n';
  }
}

ReferenceLibrary read_library(const std::string& dir) {
  std::ifstream idx(fs::path(dir) / "index.txt");
  if (!idx) fail(Errc::Io, "no library index in " + dir);
  ReferenceLibrary lib;
  std::string line;
  bool have_grid = false;
  while (std::getline(idx, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    if (line.rfind("grid=", 0) == 0) {
      ls.ignore(5);
      ls >> lib.grid.min >> lib.grid.step >> lib.grid.length;
      have_grid = true;
      continue;
    }
    std::string file, id;
    if (!(ls >> file >> id)) fail(Errc::Io, "bad library index line: " + line);
    auto p = read_pattern_binary((fs::path(dir) / file).string());
    if (!have_grid || !p.grid.same_as(lib.grid)) fail(Errc::GridMismatch, "library entry " + id + " off grid");
    lib.entries.emplace(id, std::move(p));
  }
  return lib;
}

void write_mixture(const std::string& dir, const MixtureSample& s) {
  fs::create_directories(dir);
  write_pattern_text((fs::path(dir) / "mixed.txt").string(), s.mixed);
  for (std::size_t k = 0; k < s.components.size(); ++k)
    write_pattern_text((fs::path(dir) / ("component_" + std::to_string(k) + ".txt")).string(), s.components[k]);
  std::ofstream meta(fs::path(dir) / "meta.txt");
  char g[128];
  std::snprintf(g, sizeof g, "grid=%.17g %.17g %zu\n", s.mixed.grid.min, s.mixed.grid.step, s.mixed.grid.length);
  meta << g << "active_count=" << s.active_count << "\nnoise_sigma=" << s.noise_sigma << "\nseed=" << s.seed << '\n';
  char buf[64];
  for (std::size_t k = 0; k < s.weights.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g", s.weights[k]);
    meta << "component=" << s.component_ids[k] << ' ' << buf << '\n';
  }
  if (!meta) fail(Errc::Io, "write failed in " + dir);
}

MixtureSample read_mixture(const std::string& dir) {
  std::ifstream meta(fs::path(dir) / "meta.txt");
  if (!meta) fail(Errc::Io, "no mixture metadata in " + dir);
  MixtureSample s;
  bool have_grid = false;
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(Errc::Io, "bad mixture metadata line: " + line);
    const std::string k = line.substr(0, eq);
    std::istringstream v(line.substr(eq + 1));
    if (k == "grid") {
      v >> s.mixed.grid.min >> s.mixed.grid.step >> s.mixed.grid.length;
      have_grid = true;
    } else if (k == "active_count") {
      v >> s.active_count;
    } else if (k == "noise_sigma") {
      v >> s.noise_sigma;
    } else if (k == "seed") {
      v >> s.seed;
    } else if (k == "component") {
      std::string id;
      double w = 0;
      v >> id >> w;
      s.component_ids.push_back(id);
      s.weights.push_back(w);
    }
    if (v.fail()) fail(Errc::Io, "bad mixture metadata line: " + line);
  }
  if (!have_grid || s.active_count < 1 || s.weights.size() != static_cast<std::size_t>(s.active_count))
    fail(Errc::Io, "incomplete mixture metadata in " + dir);
  const Grid grid = s.mixed.grid;
  auto load = [&](const std::string& name) {
    const auto rows = read_two_column((fs::path(dir) / name).string());
    if (rows.size() != grid.length) fail(Errc::GridMismatch, name + " in " + dir + " is off grid");
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.second);
    return DiffractionPattern(grid, std::move(v));
  };
  s.mixed = load("mixed.txt");
  for (std::size_t k = 0;; ++k) {
    const auto name = "component_" + std::to_string(k) + ".txt";
    if (!fs::exists(fs::path(dir) / name)) break;
    s.components.push_back(load(name));
  }
  if (s.components.size() < static_cast<std::size_t>(s.active_count))
    fail(Errc::Io, "missing component files in " + dir);
  return s;
}

}  // namespace xdc
