// Pattern-level metrics, peak metrology, retrieval and run reports.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xdc/dataset.hpp"
#include "xdc/model.hpp"
#include "xdc/pattern.hpp"
#include "xdc/training.hpp"

namespace xdc {

/// Centered correlation. nullopt when exactly one input is constant; throws
/// DegenerateInput when both are, LengthMismatch on unequal or short input.
std::optional<double> pearson(std::span<const double> a, std::span<const double> b);

struct PeakMeasurement {
  double position = 0;  // degrees, parabola-refined
  double height = 0;
  double fwhm = 0;      // degrees, half-max crossings
  std::size_t index = 0;
};

struct PeakOptions {
  double min_height = 0.05;      // fraction of the pattern maximum
  double min_separation = 0.2;   // degrees
};

/// Sorted by position. Empty for an all-zero pattern.
std::vector<PeakMeasurement> detect_peaks(std::span<const double> pattern, const Grid& grid,
                                          const PeakOptions& opt = {});

struct PeakPair {
  PeakMeasurement pred, truth;
};

struct PeakMatch {
  std::vector<PeakPair> pairs;
  std::size_t unmatched_pred = 0, unmatched_truth = 0;
};

/// Greedy nearest matching within `tol`, strongest true peaks first.
PeakMatch match_peaks(std::span<const PeakMeasurement> pred, std::span<const PeakMeasurement> truth,
                      double tol = 0.5);

struct PeakMetrics {
  double shift = 0;       // mean |delta 2theta|
  double fwhm_error = 0;  // mean |delta FWHM|
};

/// nullopt without pairs.
std::optional<PeakMetrics> peak_metrics(std::span<const PeakPair> pairs);

class RetrievalIndex {
 public:
  RetrievalIndex(const Grid& grid, std::vector<std::string> ids, std::vector<std::vector<double>> patterns);
  static RetrievalIndex from_library(const ReferenceLibrary& lib);
  /// Vectors already L2-normalized (as stored in index files).
  static RetrievalIndex from_unit_vectors(const Grid& grid, std::vector<std::string> ids,
                                          std::vector<std::vector<double>> units);

  const Grid& grid() const { return grid_; }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::vector<double>& unit(std::size_t i) const { return unit_[i]; }

 private:
  RetrievalIndex() = default;

  Grid grid_;
  std::vector<std::string> ids_;
  std::vector<std::vector<double>> unit_;  // L2-normalized
};

struct RetrievalHit {
  std::string id;
  double cosine = 0;
  double rerank = 0;
};

// Binary: "XDCI" magic, u32 version, grid, u64 count, then per entry the id
// and the unit vector.
inline constexpr unsigned kIndexFormatVersion = 1;
void write_index(const std::string& path, const RetrievalIndex& index);
RetrievalIndex read_index(const std::string& path);

/// Cosine recall of `candidates` entries, then rerank by the best Pearson over
/// integer shifts within +-`window` degrees. Returns the top `k`.
std::vector<RetrievalHit> retrieve_topk(std::span<const double> query, const RetrievalIndex& index,
                                        std::size_t candidates = 64, std::size_t k = 10, double window = 0.1);

/// Best Pearson of `query` against `ref` shifted by up to `max_shift` points
/// (overlap only). -1 when no shift gives a defined value.
double shifted_pearson(std::span<const double> query, std::span<const double> ref, std::size_t max_shift);

// ---- run evaluation ------------------------------------------------------------------

struct EvalInput {
  Grid grid;
  std::vector<double> mixture;
  std::vector<std::vector<double>> truths;       // active components, weighted
  std::vector<std::string> truth_ids;
  std::vector<std::vector<double>> predictions;  // every slot
  std::vector<double> reconstruction;
};

EvalInput make_eval_input(const MixtureSample& sample, const DecompositionResult& d);

struct MetricMean {
  double sum = 0;
  std::size_t count = 0, undefined = 0;

  void add(std::optional<double> v);
  /// nullopt when nothing was defined.
  std::optional<double> mean() const;
};

struct EvalRow {
  std::size_t samples = 0, pairs = 0;
  MetricMean pearson, peak_shift, fwhm_error, mixture_l1;
  std::size_t matched_peaks = 0, unmatched_pred_peaks = 0, unmatched_true_peaks = 0;
  std::size_t queries = 0, top1_hits = 0, top10_hits = 0;

  double top1() const;   // percent
  double top10() const;  // percent
};

struct PairEval {
  std::size_t target = 0, slot = 0;
  std::optional<double> pearson, peak_shift, fwhm_error;
  std::optional<bool> top1, top10;
};

struct SampleEval {
  std::size_t index = 0, k = 0;
  double mixture_l1 = 0;
  std::vector<PairEval> pairs;
};

struct EvalReport {
  EvalRow overall;
  std::map<std::size_t, EvalRow> by_k;
  std::vector<SampleEval> samples;

  /// Aligned table, one row per K plus overall.
  std::string table() const;
  /// key=value lines; the machine-readable summary.
  std::string summary() const;
  /// summary() followed by one key=value line per sample pair.
  std::string to_text() const;
};

struct EvalOptions {
  LossWeights loss;
  PeakOptions peaks;
  double match_tol = 0.5;
  std::size_t candidates = 64;
  double rerank_window = 0.1;
  int threads = 1;
};

/// PIT-aligns predictions to truths, scores matched pairs, aggregates overall and per K.
EvalReport evaluate_run(std::span<const EvalInput> inputs, const RetrievalIndex* index, const EvalOptions& opt = {});

/// Runs the model over test mixtures and evaluates them.
EvalReport evaluate_model(const Model& model, std::span<const MixtureSample> samples, const RetrievalIndex* index,
                          const EvalOptions& opt = {});

/// Two-column overlay files for one sample: truth_k.txt, pred_k.txt (matched
/// slot of target k), mixture.txt, reconstruction.txt.
void write_plot_data(const std::string& dir, const EvalInput& in, const SampleEval& ev);

}  // namespace xdc
