// The decomposition network: conv analyzer E, transformer encoder G, slot
// queries with FiLM modulation and spatial competition, mask decoder with
// skip fusion, and the masked-patch pretraining head.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "xdc/tensor.hpp"

namespace xdc {

struct ModelConfig {
  std::size_t length = 512;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t ffn_mult = 4;
  std::vector<std::size_t> conv_channels{8, 16, 32, 64};
  std::vector<std::size_t> conv_kernels{15, 8, 8, 8};
  std::vector<std::size_t> conv_strides{1, 2, 2, 4};
  std::size_t decoder_kernel = 5;
  std::size_t k_max = 4;
  std::size_t patch_size = 50;
  std::size_t patch_stride = 25;
  double mask_ratio = 0.70;
  double tau = 0.5;
  bool skip_fusion = true;
  std::uint64_t init_seed = 1;

  /// Full scale: L 3500, d 768, 12 heads, 4 layers.
  static ModelConfig large();
  /// Toy scale used by the acceptance runs.
  static ModelConfig toy() { return {}; }

  std::size_t latent_length() const;
  std::size_t patch_count() const;
  /// Throws InvalidConfig / PatchConfigInvalid.
  void validate() const;
  /// key=value lines, one per field.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  bool same_architecture(const ModelConfig& o) const;
};

enum class ParamGroup { Analyzer, LatentProj, GlobalInput, Global, Slots, Decoder, Pretrain };

struct Parameter {
  std::string name;
  Tensor value;
  ParamGroup group;
  bool decay;  // weight decay applies (matrices and kernels)
};

struct SlotOutputs {
  Tensor summaries;  // [K, D]
  Tensor logits;     // [K, 1]
  Tensor probs;      // [K, 1]
  Tensor gammas;     // [K, D]
  Tensor betas;      // [K, D]
};

struct ForwardResult {
  Tensor masks;       // [K, L]
  Tensor components;  // [K, L]
  Tensor recon;       // [1, L]
  SlotOutputs slots;
  Tensor competition;  // [K, T]
};

struct DecompositionResult {
  std::vector<std::vector<double>> masks;
  std::vector<std::vector<double>> components;
  std::vector<double> activities;
  std::vector<double> reconstruction;
  std::vector<std::size_t> active;
};

struct PretrainResult {
  Tensor recon;                      // [1, covered length]
  std::vector<std::size_t> masked;   // sorted patch indices
  std::size_t covered = 0;           // samples covered by patches
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  const Parameter* find(const std::string& name) const;
  std::size_t parameter_count() const;

  /// Deep copy with fresh leaf tensors (per-thread replicas).
  Model clone() const;
  void copy_values_from(const Model& other);

  // stages of the forward pass; x is [1, L]
  std::pair<Tensor, std::vector<Tensor>> encode_local(const Tensor& x) const;
  /// Projects [C, T] analyzer features to [T, D] tokens with positions.
  Tensor latent_tokens(const Tensor& h) const;
  Tensor encode_global(const Tensor& tokens) const;
  SlotOutputs slot_attend(const Tensor& z) const;
  static Tensor spatial_competition(const Tensor& z, const Tensor& gammas);
  static Tensor film_modulate(const Tensor& z, const Tensor& w, const Tensor& p, const Tensor& gammas,
                              const Tensor& betas);
  Tensor decode_masks(const Tensor& zmod, const std::vector<Tensor>& skips, const Tensor& x) const;
  static Tensor reconstruct_components(const Tensor& masks, const Tensor& x);

  ForwardResult forward(const Tensor& x) const;
  DecompositionResult decompose(const std::vector<double>& x) const;

  PretrainResult pretrain_forward(const Tensor& x, std::mt19937_64& rng) const;
  PretrainResult pretrain_forward(const Tensor& x, const std::vector<std::size_t>& masked) const;
  std::vector<std::size_t> sample_patch_mask(std::mt19937_64& rng) const;

 private:
  struct Linear {
    std::size_t w = 0, b = 0;
  };
  struct Norm {
    std::size_t g = 0, b = 0;
  };
  struct Block {
    Norm ln1, ln2;
    Linear q, k, v, o, ff1, ff2;
  };

  std::size_t add_param(const std::string& name, Tensor t, ParamGroup g, bool decay);
  Linear make_linear(const std::string& name, std::size_t in, std::size_t out, ParamGroup g, std::mt19937_64& rng);
  Norm make_norm(const std::string& name, std::size_t d, ParamGroup g);
  Block make_block(const std::string& name, ParamGroup g, std::mt19937_64& rng);

  const Tensor& P(std::size_t i) const { return params_[i].value; }
  Tensor linear(const Tensor& x, const Linear& l) const;
  Tensor norm(const Tensor& x, const Norm& n) const;
  Tensor block(const Tensor& x, const Block& b) const;
  Tensor positions(std::size_t n) const;

  ModelConfig cfg_;
  std::vector<Parameter> params_;

  std::vector<std::size_t> enc_w_, enc_b_;
  Linear latent_proj_;
  Linear g_in_;
  std::vector<Block> g_blocks_;
  Norm g_norm_;
  std::size_t queries_ = 0;
  Linear s_q_, s_k_, s_v_, s_o_, act_head_, film_head_;
  std::vector<std::size_t> dec_w_, dec_b_;
  std::size_t out_w_ = 0, out_b_ = 0;
  Linear patch_embed_;
  std::size_t mask_token_ = 0;
  Block mae_block_;
  Norm mae_norm_;
  Linear mae_head_;
};

/// Sinusoidal positional encoding [n, d].
std::vector<double> sinusoidal_positions(std::size_t n, std::size_t d);

// ---- checkpoints ---------------------------------------------------------------

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, Tensor>> ema;  // empty when absent
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes to path + ".tmp" then renames.
void save_checkpoint(const std::string& path, const Model& model, const std::map<std::string, std::string>& meta,
                     const std::vector<Tensor>* ema = nullptr);
Checkpoint read_checkpoint(const std::string& path);
/// Loads raw (or EMA when `use_ema` and present) weights into `model`.
/// Throws IncompatibleCheckpoint on architecture or parameter-table mismatch.
void load_into(const Checkpoint& ck, Model& model, bool use_ema);

}  // namespace xdc
