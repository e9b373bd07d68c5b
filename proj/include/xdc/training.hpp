// Losses, permutation-invariant matching and the two training stages.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xdc/dataset.hpp"
#include "xdc/model.hpp"

namespace xdc {

struct LossWeights {
  double alpha_amp = 2.0;
  double lambda_shape = 0.1;
  double beta_geo = 0.5;
  double lambda_geo = 1.0;
  double lambda_act = 0.5;
  double lambda_mix = 1.0;
  double lambda_shape_pre = 0.1;
  double lambda_geo_pre = 1.0;

  void validate() const;
};

inline constexpr double kSdrEps = 1e-8;
inline constexpr double kSdrRatioCap = 1e8;

// Per-pattern terms; pred and target are [1, L] (or any equal shape).
Tensor amplitude_loss(const Tensor& pred, const Tensor& target, double alpha);
/// SI-SDR in dB with eps-stabilized norms and the ratio capped at 1e8.
Tensor si_sdr(const Tensor& pred, const Tensor& target);
Tensor geometry_loss(const Tensor& pred, const Tensor& target, double beta);
Tensor separation_loss(const Tensor& pred, const Tensor& target, const LossWeights& w);

// The same quantities on plain vectors, used for matching costs and reports.
double si_sdr_value(std::span<const double> pred, std::span<const double> target);
double separation_cost(std::span<const double> pred, std::span<const double> target, const LossWeights& w);

struct PitResult {
  std::vector<std::size_t> slot_of_target;  // target k -> slot
  double cost = 0;
  std::vector<double> labels;  // per slot, 1 if matched
};

/// Exhaustive search over injective maps of K targets into K_max slots.
/// cost[k][s] is the cost of explaining target k with slot s. Ties resolve to
/// the lexicographically smallest slot sequence.
PitResult pit_match(const std::vector<std::vector<double>>& cost, std::size_t k_max);
PitResult pit_match(const std::vector<std::vector<double>>& preds, const std::vector<std::vector<double>>& targets,
                    const LossWeights& w);

struct LossTerms {
  double total = 0, separation = 0, activity = 0, mixture = 0;
};

/// L_sep over matched pairs + lambda_act * BCE + lambda_mix * mean|x_hat - x|.
Tensor total_loss(const ForwardResult& out, const Tensor& x, const std::vector<std::vector<double>>& targets,
                  const LossWeights& w, LossTerms* terms = nullptr, PitResult* match = nullptr);

/// Reconstruction loss over the patch-covered prefix (or masked patches only).
Tensor pretrain_loss(const PretrainResult& r, const Tensor& x, const LossWeights& w, std::size_t patch_size,
                     std::size_t patch_stride, bool masked_only = false);

// ---- optimization ------------------------------------------------------------------

struct TrainConfig {
  double lr = 2e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 10;
  std::size_t warmup_epochs = 1;
  double min_lr_ratio = 0.0;
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double ema_decay = 0.999;
  bool freeze_global = true;
  bool freeze_input_projection = true;
  bool masked_only = false;
  std::uint64_t seed = 0;
  int threads = 1;
  std::size_t samples_per_epoch = 64;
  std::size_t val_samples = 0;
  /// Stop early once this returns true (called after each epoch).
  std::function<bool(std::size_t epoch)> stop_when;

  void validate() const;
};

/// Linear warmup then cosine decay to min_lr_ratio * lr.
double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t steps_per_epoch);

class AdamW {
 public:
  AdamW(const TrainConfig& cfg, std::size_t n_params) : cfg_(cfg), m_(n_params), v_(n_params) {}
  /// Updates params[i] where trainable[i]; grads are the batch-mean gradients.
  void step(std::vector<Parameter>& params, const std::vector<std::vector<double>>& grads,
            const std::vector<bool>& trainable, double lr);
  std::size_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0, step = 0;
  double loss = 0, separation = 0, activity = 0, mixture = 0;
  std::optional<double> val_loss;
  double lr = 0;
  double seconds = 0;
};

struct TrainReport {
  std::vector<EpochLog> epochs;
  std::vector<Tensor> ema;  // shadow weights, parameter order
  std::size_t trainable_params = 0, total_params = 0;
  std::optional<double> best_val;
};

using MixtureSource = std::function<MixtureSample(std::uint64_t epoch, std::uint64_t index)>;
using PatternSource = std::function<std::vector<double>(std::uint64_t epoch, std::uint64_t index)>;
using LogSink = std::function<void(const std::string& line)>;

/// Which parameter groups a stage updates.
std::vector<bool> trainable_mask(const Model& model, int stage, const TrainConfig& cfg);

/// Masked-patch pretraining of the patch embedding, G and the auxiliary decoder.
/// `checkpoint_path` (optional) receives the best-validation weights.
TrainReport run_stage1(Model& model, const PatternSource& train, const PatternSource* val, const TrainConfig& cfg,
                       const LossWeights& w, const std::string& checkpoint_path = "", const LogSink& log = {});

/// PIT decomposition training with G frozen per cfg; EMA maintained.
TrainReport run_stage2(Model& model, const MixtureSource& train, const MixtureSource* val, const TrainConfig& cfg,
                       const LossWeights& w, const std::string& checkpoint_path = "", const LogSink& log = {});

/// Formats an EpochLog as a key=value line.
std::string format_log(const std::string& stage, const EpochLog& e);

}  // namespace xdc
