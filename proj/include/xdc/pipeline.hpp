// Commands behind the xdecomp tool. Each one reads and writes inside a run
// directory (RunConfig::out) unless a path is given explicitly.

#pragma once

#include <string>
#include <vector>

#include "xdc/config.hpp"

namespace xdc {

// Layout of a run directory.
namespace run_paths {
std::string library(const std::string& out);      // selected render per crystal
std::string patterns(const std::string& out);     // every candidate render
std::string manifest(const std::string& out);
std::string failures(const std::string& out);
std::string index(const std::string& out);
std::string mixtures(const std::string& out, const std::string& split);
std::string pretrain_checkpoint(const std::string& out);
std::string train_checkpoint(const std::string& out);
std::string eval_dir(const std::string& out);
}  // namespace run_paths

/// Writes config.resolved.txt and appends a provenance line to run.txt.
void write_run_snapshot(const RunConfig& cfg, const std::string& command);

struct SimulateSummary {
  std::size_t parsed = 0, failed = 0, patterns = 0;
};

/// Parses every *.cif in cif_dir (or generates data.random_structures), renders
/// data.renders_per_crystal candidates each, writes patterns, library, index,
/// split manifest and failure list. Throws EmptyInput when nothing parses.
SimulateSummary cmd_simulate(const RunConfig& cfg, const std::string& cif_dir, const LogSink& log = {});

/// Fixed validation and test mixtures from the matching split pools.
std::size_t cmd_mix(const RunConfig& cfg, const std::string& library_dir, const LogSink& log = {});

/// Resamples raw two-column patterns to the sim grid, subtracts the SNIP
/// background and normalizes. Returns the written paths.
std::vector<std::string> cmd_prep(const RunConfig& cfg, const std::vector<std::string>& inputs,
                                  int snip_iterations = 24, const LogSink& log = {});

TrainReport cmd_pretrain(const RunConfig& cfg, const LogSink& log = {});
/// `init` may be empty: the run directory's pretraining checkpoint is used when present.
TrainReport cmd_train(const RunConfig& cfg, const std::string& init, const LogSink& log = {});

struct DecomposeSummary {
  std::string input;
  std::vector<double> activities;
  std::vector<std::size_t> active;
};

/// One forward pass per input (EMA weights unless `raw_weights`). Inputs are
/// files or directories of pattern files.
std::vector<DecomposeSummary> cmd_decompose(const RunConfig& cfg, const std::string& checkpoint,
                                            const std::vector<std::string>& inputs, double tau, bool raw_weights,
                                            const LogSink& log = {});

/// Builds the retrieval index file from a library directory.
std::size_t cmd_index(const RunConfig& cfg, const std::string& library_dir, const LogSink& log = {});

EvalReport cmd_evaluate(const RunConfig& cfg, const std::string& checkpoint, const std::string& mixtures_dir,
                        const std::string& index_path, const LogSink& log = {});

/// Names of parameters that differ between two checkpoints within `group`.
std::vector<std::string> changed_parameters(const std::string& checkpoint_a, const std::string& checkpoint_b,
                                            const std::vector<ParamGroup>& groups);

/// simulate -> mix -> pretrain -> train -> decompose -> evaluate. Errors are
/// rethrown with the failing stage named.
EvalReport cmd_smoke(const RunConfig& cfg, const LogSink& log = {});

}  // namespace xdc
