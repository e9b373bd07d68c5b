// Run configuration: one key=value file with sections sim, data, mix, model,
// pretrain, train, loss and eval. Unknown keys are rejected.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "xdc/dataset.hpp"
#include "xdc/diffraction.hpp"
#include "xdc/evaluation.hpp"
#include "xdc/model.hpp"
#include "xdc/training.hpp"

namespace xdc {

struct DataConfig {
  std::string cif_dir;                   // empty: generate random_structures
  std::size_t random_structures = 0;
  int renders_per_crystal = 20;
  std::array<double, 3> split{0.8, 0.1, 0.1};
  std::size_t val_mixtures = 16;
  std::size_t test_mixtures = 32;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  bool verbose = false;
  std::string out = "run";

  SimConfig sim;
  DataConfig data;
  MixtureConfig mix;
  ModelConfig model;
  TrainConfig pretrain;
  TrainConfig train;
  LossWeights loss;
  EvalOptions eval;

  RunConfig();

  /// Sets "section.key" from text. Throws InvalidConfig on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  /// Reads `key = value` lines; '#' starts a comment.
  void apply_text(const std::string& text);
  void apply_file(const std::string& path);
  /// Every key with its resolved value, in a fixed order.
  std::string to_text() const;
  static std::vector<std::string> keys();
  void validate() const;

  /// Seeds of the individual stages, derived from `seed`.
  std::uint64_t stage_seed(const std::string& stage) const;

  /// Small end-to-end configuration on a 512-point grid.
  static RunConfig smoke();
};

}  // namespace xdc
