// Mixture synthesis, crystal-level splits, reference libraries and
// preprocessing of measured patterns.

#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "xdc/crystal.hpp"
#include "xdc/diffraction.hpp"
#include "xdc/pattern.hpp"

namespace xdc {

struct MixtureConfig {
  int k_max = 4;
  int min_components = 2;
  int max_components = 4;
  double alpha = 1.0;         // symmetric Dirichlet concentration
  double weight_floor = 0.15;
  double noise_sigma = 0.01;  // absolute, library entries have max 1
};

struct MixtureSample {
  DiffractionPattern mixed;
  std::vector<DiffractionPattern> components;  // k_max entries, x_i / c, zero padded
  std::vector<double> weights;                 // active_count entries
  int active_count = 0;
  std::vector<std::string> component_ids;
  double noise_sigma = 0;
  std::uint64_t seed = 0;

  /// w_i * component_i for active slots, zero for padding.
  std::vector<std::vector<double>> weighted_targets() const;
};

struct SplitManifest {
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
  std::vector<std::string> train, val, test;

  const std::vector<std::string>& split(const std::string& name) const;
};

struct ReferenceLibrary {
  Grid grid;
  std::map<std::string, DiffractionPattern> entries;

  const DiffractionPattern& at(const std::string& id) const;
  std::vector<std::string> ids() const;
};

/// Uniform integer in [0, n) by rejection on 64-bit draws (platform independent).
std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n);
void shuffle_ids(std::vector<std::string>& v, std::mt19937_64& rng);

int sample_cardinality(std::mt19937_64& rng, int lo = 2, int hi = 4);

/// Symmetric Dirichlet(alpha) with rejection until every weight >= floor.
/// Throws InfeasibleFloor when n * floor >= 1 and RejectionCapExceeded after 1e4 tries.
std::vector<double> sample_weights(int n, double alpha, double floor, std::mt19937_64& rng);

/// Anchor-driven online mixture drawn from `pool` (the ids of one split).
MixtureSample make_mixture(const ReferenceLibrary& library, std::span<const std::string> pool,
                           const std::string& anchor_id, std::mt19937_64& rng, const MixtureConfig& cfg);

/// Sample `index` of `epoch`: anchor pool[index % |pool|], private RNG stream.
MixtureSample mixture_at(const ReferenceLibrary& library, std::span<const std::string> pool, std::uint64_t epoch,
                         std::uint64_t index, std::uint64_t seed, const MixtureConfig& cfg);

SplitManifest split_by_crystal(const std::vector<std::string>& ids, std::array<double, 3> ratios,
                               std::uint64_t seed);

/// Simulation conditions for render `index` of a crystal: perturbed
/// parameters drawn uniformly from their ranges.
SimConfig perturbed_config(const SimConfig& base, std::mt19937_64& rng);

/// Index of the candidate render kept for crystal `id`.
int selected_candidate(const std::string& id, std::uint64_t seed, int renders_per_crystal);
/// Candidate render `r` of a crystal, normalized to max 1.
DiffractionPattern render_candidate(const CrystalStructure& s, const SimConfig& base, std::uint64_t seed, int r);

/// One render per crystal, picked from `renders_per_crystal` candidate
/// conditions with the split seed; normalized to max 1.
ReferenceLibrary build_library(const std::vector<CrystalStructure>& structures, const SimConfig& base,
                               std::uint64_t seed, int renders_per_crystal = 20, int threads = 1);

struct SnipOptions {
  int iterations = 24;
  bool decreasing = false;
};

/// LLS-transformed SNIP clipping; result is <= pattern pointwise.
std::vector<double> snip_background(std::span<const double> pattern, const SnipOptions& opt = {});

/// Linear interpolation onto `grid`, zero outside the raw span, then max normalization.
DiffractionPattern resample_to_grid(std::span<const std::pair<double, double>> raw, const Grid& grid);

// persistence
void write_manifest(const std::string& path, const SplitManifest& m);
SplitManifest read_manifest(const std::string& path);
void write_library(const std::string& dir, const ReferenceLibrary& lib);
ReferenceLibrary read_library(const std::string& dir);
void write_mixture(const std::string& dir, const MixtureSample& s);
MixtureSample read_mixture(const std::string& dir);

}  // namespace xdc
