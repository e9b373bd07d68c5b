#include "xdc/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "xdc/error.hpp"

namespace xdc {

using namespace ops;

// ---- config ----------------------------------------------------------------------

ModelConfig ModelConfig::large() {
  ModelConfig c;
  c.length = 3500;
  c.d_model = 768;
  c.n_heads = 12;
  c.n_layers = 4;
  c.conv_channels = {48, 96, 192, 384};
  c.conv_kernels = {15, 8, 8, 10};
  c.conv_strides = {1, 2, 2, 5};
  return c;
}

std::size_t ModelConfig::latent_length() const {
  std::size_t s = 1;
  for (auto v : conv_strides) s *= v;
  return length / s;
}

std::size_t ModelConfig::patch_count() const {
  if (length < patch_size) return 0;
  return (length - patch_size) / patch_stride + 1;
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { fail(Errc::InvalidConfig, m); };
  if (conv_channels.empty() || conv_channels.size() != conv_kernels.size() ||
      conv_channels.size() != conv_strides.size())
    bad("conv_channels, conv_kernels and conv_strides need equal non-zero lengths");
  std::size_t total = 1;
  for (std::size_t i = 0; i < conv_strides.size(); ++i) {
    if (conv_strides[i] == 0 || conv_channels[i] == 0) bad("conv strides and channels must be positive");
    if (conv_kernels[i] < conv_strides[i]) bad("each conv kernel must be at least its stride");
    total *= conv_strides[i];
  }
  if (length == 0 || length % total != 0) bad("product of conv strides must divide the pattern length");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) bad("d_model must be divisible by n_heads");
  if (k_max < 1) bad("k_max must be >= 1");
  if (decoder_kernel % 2 == 0) bad("decoder_kernel must be odd");
  if (!(mask_ratio >= 0 && mask_ratio < 1)) bad("mask_ratio must lie in [0, 1)");
  if (patch_size == 0 || patch_stride == 0 || length < patch_size)
    fail(Errc::PatchConfigInvalid, "pattern length " + std::to_string(length) + " below patch size " +
                                       std::to_string(patch_size));
}

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> split_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoul(item));
  return out;
}

}  // namespace

std::string ModelConfig::to_text() const {
  std::ostringstream o;
  char buf[64];
  o << "length=" << length << "\nd_model=" << d_model << "\nn_heads=" << n_heads << "\nn_layers=" << n_layers
    << "\nffn_mult=" << ffn_mult << "\nconv_channels=" << join(conv_channels)
    << "\nconv_kernels=" << join(conv_kernels) << "\nconv_strides=" << join(conv_strides)
    << "\ndecoder_kernel=" << decoder_kernel << "\nk_max=" << k_max << "\npatch_size=" << patch_size
    << "\npatch_stride=" << patch_stride;
  std::snprintf(buf, sizeof buf, "%.17g", mask_ratio);
  o << "\nmask_ratio=" << buf;
  std::snprintf(buf, sizeof buf, "%.17g", tau);
  o << "\ntau=" << buf << "\nskip_fusion=" << (skip_fusion ? 1 : 0) << "\ninit_seed=" << init_seed << "\n";
  return o.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "length") c.length = std::stoul(v);
    else if (k == "d_model") c.d_model = std::stoul(v);
    else if (k == "n_heads") c.n_heads = std::stoul(v);
    else if (k == "n_layers") c.n_layers = std::stoul(v);
    else if (k == "ffn_mult") c.ffn_mult = std::stoul(v);
    else if (k == "conv_channels") c.conv_channels = split_list(v);
    else if (k == "conv_kernels") c.conv_kernels = split_list(v);
    else if (k == "conv_strides") c.conv_strides = split_list(v);
    else if (k == "decoder_kernel") c.decoder_kernel = std::stoul(v);
    else if (k == "k_max") c.k_max = std::stoul(v);
    else if (k == "patch_size") c.patch_size = std::stoul(v);
    else if (k == "patch_stride") c.patch_stride = std::stoul(v);
    else if (k == "mask_ratio") c.mask_ratio = std::stod(v);
    else if (k == "tau") c.tau = std::stod(v);
    else if (k == "skip_fusion") c.skip_fusion = v == "1" || v == "true";
    else if (k == "init_seed") c.init_seed = std::stoull(v);
    else fail(Errc::InvalidConfig, "unknown model key '" + k + "'");
  }
  return c;
}

bool ModelConfig::same_architecture(const ModelConfig& o) const {
  return length == o.length && d_model == o.d_model && n_heads == o.n_heads && n_layers == o.n_layers &&
         ffn_mult == o.ffn_mult && conv_channels == o.conv_channels && conv_kernels == o.conv_kernels &&
         conv_strides == o.conv_strides && decoder_kernel == o.decoder_kernel && k_max == o.k_max &&
         patch_size == o.patch_size && patch_stride == o.patch_stride && skip_fusion == o.skip_fusion;
}

std::vector<double> sinusoidal_positions(std::size_t n, std::size_t d) {
  std::vector<double> pe(n * d);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe[t * d + i] = std::sin(static_cast<double>(t) * freq);
      if (i + 1 < d) pe[t * d + i + 1] = std::cos(static_cast<double>(t) * freq);
    }
  return pe;
}

// ---- construction --------------------------------------------------------------------

std::size_t Model::add_param(const std::string& name, Tensor t, ParamGroup g, bool decay) {
  t.set_requires_grad(true);
  params_.push_back({name, std::move(t), g, decay});
  return params_.size() - 1;
}

Model::Linear Model::make_linear(const std::string& name, std::size_t in, std::size_t out, ParamGroup g,
                                 std::mt19937_64& rng) {
  Linear l;
  l.w = add_param(name + ".w", Tensor::randn({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng), g, true);
  l.b = add_param(name + ".b", Tensor::zeros({out}), g, false);
  return l;
}

Model::Norm Model::make_norm(const std::string& name, std::size_t d, ParamGroup g) {
  Norm n;
  n.g = add_param(name + ".g", Tensor::full({d}, 1.0), g, false);
  n.b = add_param(name + ".b", Tensor::zeros({d}), g, false);
  return n;
}

Model::Block Model::make_block(const std::string& name, ParamGroup g, std::mt19937_64& rng) {
  const std::size_t d = cfg_.d_model;
  Block b;
  b.ln1 = make_norm(name + ".ln1", d, g);
  b.q = make_linear(name + ".q", d, d, g, rng);
  b.k = make_linear(name + ".k", d, d, g, rng);
  b.v = make_linear(name + ".v", d, d, g, rng);
  b.o = make_linear(name + ".o", d, d, g, rng);
  b.ln2 = make_norm(name + ".ln2", d, g);
  b.ff1 = make_linear(name + ".ff1", d, d * cfg_.ffn_mult, g, rng);
  b.ff2 = make_linear(name + ".ff2", d * cfg_.ffn_mult, d, g, rng);
  return b;
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.init_seed);
  const std::size_t d = cfg_.d_model;
  const std::size_t n = cfg_.conv_channels.size();

  std::size_t cin = 1;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cout = cfg_.conv_channels[i], k = cfg_.conv_kernels[i];
    const double std = std::sqrt(2.0 / static_cast<double>(cin * k));
    enc_w_.push_back(add_param("enc" + std::to_string(i) + ".w", Tensor::randn({cout, cin, k}, std, rng),
                               ParamGroup::Analyzer, true));
    enc_b_.push_back(add_param("enc" + std::to_string(i) + ".b", Tensor::zeros({cout}), ParamGroup::Analyzer, false));
    cin = cout;
  }
  latent_proj_ = make_linear("latent", cfg_.conv_channels.back(), d, ParamGroup::LatentProj, rng);

  g_in_ = make_linear("global.in", d, d, ParamGroup::GlobalInput, rng);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l)
    g_blocks_.push_back(make_block("global.layer" + std::to_string(l), ParamGroup::Global, rng));
  g_norm_ = make_norm("global.norm", d, ParamGroup::Global);

  queries_ = add_param("slots.queries", Tensor::randn({cfg_.k_max, d}, 0.02, rng), ParamGroup::Slots, false);
  s_q_ = make_linear("slots.q", d, d, ParamGroup::Slots, rng);
  s_k_ = make_linear("slots.k", d, d, ParamGroup::Slots, rng);
  s_v_ = make_linear("slots.v", d, d, ParamGroup::Slots, rng);
  s_o_ = make_linear("slots.o", d, d, ParamGroup::Slots, rng);
  act_head_ = make_linear("slots.act", d, 1, ParamGroup::Slots, rng);
  film_head_ = make_linear("slots.film", d, 2 * d, ParamGroup::Slots, rng);
  // start FiLM near identity
  for (double& v : params_[film_head_.w].value.data()) v *= 0.1;

  // decoder stage i restores the input resolution of encoder stage i
  std::size_t prev = d;
  for (std::size_t ii = n; ii-- > 0;) {
    const std::size_t skip = cfg_.skip_fusion ? (ii == 0 ? 1 : cfg_.conv_channels[ii - 1]) : 0;
    const std::size_t out = ii == 0 ? cfg_.conv_channels[0] : cfg_.conv_channels[ii - 1];
    const std::size_t in = prev + skip, k = cfg_.decoder_kernel;
    const double std = std::sqrt(2.0 / static_cast<double>(in * k));
    dec_w_.push_back(add_param("dec" + std::to_string(ii) + ".w", Tensor::randn({out, in, k}, std, rng),
                               ParamGroup::Decoder, true));
    dec_b_.push_back(add_param("dec" + std::to_string(ii) + ".b", Tensor::zeros({out}), ParamGroup::Decoder, false));
    prev = out;
  }
  out_w_ = add_param("dec.out.w", Tensor::randn({cfg_.k_max, prev, 1}, 1.0 / std::sqrt(static_cast<double>(prev)), rng),
                     ParamGroup::Decoder, true);
  out_b_ = add_param("dec.out.b", Tensor::zeros({cfg_.k_max}), ParamGroup::Decoder, false);

  patch_embed_ = make_linear("mae.embed", cfg_.patch_size, d, ParamGroup::Pretrain, rng);
  mask_token_ = add_param("mae.mask_token", Tensor::randn({1, d}, 0.02, rng), ParamGroup::Pretrain, false);
  mae_block_ = make_block("mae.layer", ParamGroup::Pretrain, rng);
  mae_norm_ = make_norm("mae.norm", d, ParamGroup::Pretrain);
  mae_head_ = make_linear("mae.head", d, cfg_.patch_size, ParamGroup::Pretrain, rng);
}

const Parameter* Model::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Model Model::clone() const {
  Model m(*this);
  for (auto& p : m.params_) p.value = Tensor::from(p.value.shape(), p.value.data(), true);
  return m;
}

void Model::copy_values_from(const Model& other) {
  if (other.params_.size() != params_.size()) fail(Errc::IncompatibleCheckpoint, "parameter tables differ");
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value.data() = other.params_[i].value.data();
}

// ---- forward pieces ---------------------------------------------------------------------

Tensor Model::linear(const Tensor& x, const Linear& l) const { return add_row(matmul(x, P(l.w)), P(l.b)); }

Tensor Model::norm(const Tensor& x, const Norm& n) const { return layer_norm(x, P(n.g), P(n.b)); }

Tensor Model::block(const Tensor& x, const Block& b) const {
  const Tensor h = norm(x, b.ln1);
  const Tensor a = attention(linear(h, b.q), linear(h, b.k), linear(h, b.v), cfg_.n_heads);
  const Tensor x1 = add(x, linear(a, b.o));
  const Tensor f = linear(gelu(linear(norm(x1, b.ln2), b.ff1)), b.ff2);
  return add(x1, f);
}

Tensor Model::positions(std::size_t n) const {
  return Tensor::from({n, cfg_.d_model}, sinusoidal_positions(n, cfg_.d_model));
}

std::pair<Tensor, std::vector<Tensor>> Model::encode_local(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(0) != 1 || x.dim(1) != cfg_.length)
    fail(Errc::ShapeMismatch, "model input must be [1, " + std::to_string(cfg_.length) + "], got " + shape_str(x.shape()));
  std::vector<Tensor> skips;
  Tensor h = x;
  for (std::size_t i = 0; i < enc_w_.size(); ++i) {
    const std::size_t k = cfg_.conv_kernels[i], s = cfg_.conv_strides[i];
    const std::size_t pad = k - s;
    h = gelu(conv1d(h, P(enc_w_[i]), P(enc_b_[i]), s, pad / 2, pad - pad / 2));
    skips.push_back(h);
  }
  return {h, skips};
}

Tensor Model::latent_tokens(const Tensor& h) const {
  const Tensor t = linear(transpose(h), latent_proj_);
  return add(t, positions(t.dim(0)));
}

Tensor Model::encode_global(const Tensor& tokens) const {
  if (tokens.rank() != 2 || tokens.dim(1) != cfg_.d_model)
    fail(Errc::ShapeMismatch, "global encoder expects [T, " + std::to_string(cfg_.d_model) + "]");
  Tensor z = linear(tokens, g_in_);
  for (const auto& b : g_blocks_) z = block(z, b);
  return norm(z, g_norm_);
}

SlotOutputs Model::slot_attend(const Tensor& z) const {
  SlotOutputs s;
  const Tensor q = linear(P(queries_), s_q_);
  s.summaries = linear(attention(q, linear(z, s_k_), linear(z, s_v_), cfg_.n_heads), s_o_);
  s.logits = linear(s.summaries, act_head_);
  s.probs = sigmoid(s.logits);
  const Tensor film = linear(s.summaries, film_head_);
  s.gammas = slice(film, 1, 0, cfg_.d_model);
  s.betas = slice(film, 1, cfg_.d_model, cfg_.d_model);
  return s;
}

Tensor Model::spatial_competition(const Tensor& z, const Tensor& gammas) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(z.dim(1)));
  return softmax(scale(matmul(gammas, transpose(z)), inv), 0);
}

Tensor Model::film_modulate(const Tensor& z, const Tensor& w, const Tensor& p, const Tensor& gammas,
                            const Tensor& betas) {
  const Tensor alpha = mul(w, expand(p, w.shape()));  // [K, T]
  const Tensor at = transpose(alpha);                 // [T, K]
  const Tensor g = matmul(at, gammas);
  const Tensor b = matmul(at, betas);
  return add(mul(z, add_scalar(g, 1.0)), b);
}

Tensor Model::decode_masks(const Tensor& zmod, const std::vector<Tensor>& skips, const Tensor& x) const {
  const std::size_t n = cfg_.conv_strides.size();
  if (skips.size() != n) fail(Errc::ShapeMismatch, "decoder needs one skip per analyzer stage");
  Tensor f = transpose(zmod);  // [D, T]
  const std::size_t k = cfg_.decoder_kernel;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t ii = n - 1 - j;
    f = upsample(f, cfg_.conv_strides[ii]);
    if (cfg_.skip_fusion) f = concat({f, ii == 0 ? x : skips[ii - 1]}, 0);
    f = gelu(conv1d(f, P(dec_w_[j]), P(dec_b_[j]), 1, k / 2, k / 2));
  }
  return sigmoid(conv1d(f, P(out_w_), P(out_b_), 1, 0, 0));
}

Tensor Model::reconstruct_components(const Tensor& masks, const Tensor& x) {
  return mul(masks, expand(x, masks.shape()));
}

ForwardResult Model::forward(const Tensor& x) const {
  ForwardResult r;
  auto [h, skips] = encode_local(x);
  const Tensor z = encode_global(latent_tokens(h));
  r.slots = slot_attend(z);
  r.competition = spatial_competition(z, r.slots.gammas);
  const Tensor zmod = film_modulate(z, r.competition, r.slots.probs, r.slots.gammas, r.slots.betas);
  r.masks = decode_masks(zmod, skips, x);
  r.components = reconstruct_components(r.masks, x);
  r.recon = sum_axis(r.components, 0);
  return r;
}

DecompositionResult Model::decompose(const std::vector<double>& x) const {
  if (x.size() != cfg_.length)
    fail(Errc::ShapeMismatch, "pattern length " + std::to_string(x.size()) + " != model length " +
                                  std::to_string(cfg_.length));
  for (double v : x)
    if (!std::isfinite(v)) fail(Errc::NonFiniteInput, "pattern contains NaN or Inf");
  // leaf copies without gradient so no graph is kept
  Model frozen(*this);
  for (auto& p : frozen.params_) p.value = Tensor::from(p.value.shape(), p.value.data(), false);
  const auto r = frozen.forward(Tensor::from({1, x.size()}, x));
  DecompositionResult out;
  const std::size_t L = cfg_.length;
  for (std::size_t k = 0; k < cfg_.k_max; ++k) {
    out.masks.emplace_back(r.masks.data().begin() + static_cast<long>(k * L), r.masks.data().begin() + static_cast<long>((k + 1) * L));
    out.components.emplace_back(r.components.data().begin() + static_cast<long>(k * L),
                                r.components.data().begin() + static_cast<long>((k + 1) * L));
    out.activities.push_back(r.slots.probs[k]);
    if (r.slots.probs[k] > cfg_.tau) out.active.push_back(k);
  }
  out.reconstruction = r.recon.data();
  return out;
}

std::vector<std::size_t> Model::sample_patch_mask(std::mt19937_64& rng) const {
  const std::size_t n = cfg_.patch_count();
  const auto m = static_cast<std::size_t>(std::llround(cfg_.mask_ratio * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  return idx;
}

PretrainResult Model::pretrain_forward(const Tensor& x, std::mt19937_64& rng) const {
  return pretrain_forward(x, sample_patch_mask(rng));
}

PretrainResult Model::pretrain_forward(const Tensor& x, const std::vector<std::size_t>& masked) const {
  if (x.rank() != 2 || x.dim(0) != 1 || x.dim(1) != cfg_.length)
    fail(Errc::ShapeMismatch, "pretraining input must be [1, " + std::to_string(cfg_.length) + "]");
  const std::size_t n = cfg_.patch_count();
  if (n == 0) fail(Errc::PatchConfigInvalid, "pattern shorter than one patch");
  std::vector<bool> is_masked(n, false);
  for (auto m : masked) {
    if (m >= n) fail(Errc::PatchConfigInvalid, "masked patch index out of range");
    is_masked[m] = true;
  }
  std::vector<std::size_t> visible;
  for (std::size_t i = 0; i < n; ++i)
    if (!is_masked[i]) visible.push_back(i);

  const Tensor pos = positions(n);
  const Tensor tokens = add(linear(patchify(x, cfg_.patch_size, cfg_.patch_stride), patch_embed_), pos);
  // full sequence for the auxiliary decoder: encoded visible tokens, mask token elsewhere
  std::vector<Tensor> rows;
  Tensor enc;
  if (!visible.empty()) enc = encode_global(gather_rows(tokens, visible));
  std::size_t vi = 0;
  for (std::size_t i = 0; i < n; ++i) rows.push_back(is_masked[i] ? P(mask_token_) : slice(enc, 0, vi++, 1));
  Tensor seq = add(concat(rows, 0), pos);
  seq = norm(block(seq, mae_block_), mae_norm_);
  PretrainResult r;
  r.recon = overlap_add(linear(seq, mae_head_), cfg_.patch_stride);
  r.masked = masked;
  std::sort(r.masked.begin(), r.masked.end());
  r.covered = r.recon.dim(1);
  return r;
}

// ---- checkpoints ---------------------------------------------------------------------------

namespace {

constexpr char kCkMagic[4] = {'X', 'D', 'C', 'K'};

template <typename T>
void put(std::ostream& o, T v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_str(std::ostream& o, const std::string& s) {
  put<std::uint64_t>(o, s.size());
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) fail(Errc::CorruptCheckpoint, "truncated checkpoint");
  return v;
}

std::string get_str(std::istream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n > (1u << 24)) fail(Errc::CorruptCheckpoint, "implausible string length in checkpoint");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) fail(Errc::CorruptCheckpoint, "truncated checkpoint");
  return s;
}

void put_table(std::ostream& o, const std::vector<std::pair<std::string, const Tensor*>>& t) {
  put<std::uint64_t>(o, t.size());
  for (const auto& [name, ten] : t) {
    put_str(o, name);
    put<std::uint32_t>(o, static_cast<std::uint32_t>(ten->rank()));
    for (auto d : ten->shape()) put<std::uint64_t>(o, d);
    o.write(reinterpret_cast<const char*>(ten->data().data()), static_cast<std::streamsize>(ten->size() * sizeof(double)));
  }
}

std::vector<std::pair<std::string, Tensor>> get_table(std::istream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n > 100000) fail(Errc::CorruptCheckpoint, "implausible parameter count");
  std::vector<std::pair<std::string, Tensor>> t;
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = get_str(in);
    const auto rank = get<std::uint32_t>(in);
    if (rank == 0 || rank > 3) fail(Errc::CorruptCheckpoint, "bad rank for " + name);
    Shape s;
    for (std::uint32_t r = 0; r < rank; ++r) s.push_back(get<std::uint64_t>(in));
    if (numel(s) > (1u << 28)) fail(Errc::CorruptCheckpoint, "implausible tensor size for " + name);
    std::vector<double> v(numel(s));
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) fail(Errc::CorruptCheckpoint, "truncated tensor " + name);
    t.emplace_back(std::move(name), Tensor::from(s, std::move(v)));
  }
  return t;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const std::map<std::string, std::string>& meta,
                     const std::vector<Tensor>* ema) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(Errc::Io, "cannot write " + tmp);
    out.write(kCkMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    put_str(out, model.config().to_text());
    std::string m;
    for (const auto& [k, v] : meta) m += k + "=" + v + "\n";
    put_str(out, m);
    std::vector<std::pair<std::string, const Tensor*>> t;
    for (const auto& p : model.parameters()) t.emplace_back(p.name, &p.value);
    put_table(out, t);
    put<std::uint8_t>(out, ema ? 1 : 0);
    if (ema) {
      if (ema->size() != t.size()) fail(Errc::InvalidConfig, "EMA table size differs from parameter table");
      std::vector<std::pair<std::string, const Tensor*>> e;
      for (std::size_t i = 0; i < t.size(); ++i) e.emplace_back(t[i].first, &(*ema)[i]);
      put_table(out, e);
    }
    if (!out) fail(Errc::Io, "write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(Errc::Io, "cannot move checkpoint into place: " + ec.message());
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::Io, "cannot open " + path);
  char m[4] = {};
  in.read(m, 4);
  if (!in || std::memcmp(m, kCkMagic, 4) != 0) fail(Errc::CorruptCheckpoint, path + " is not a checkpoint");
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    fail(Errc::IncompatibleCheckpoint, "checkpoint version " + std::to_string(version) + " not supported");
  Checkpoint ck;
  ck.config = ModelConfig::from_text(get_str(in));
  std::istringstream meta(get_str(in));
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) ck.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  ck.params = get_table(in);
  if (get<std::uint8_t>(in)) ck.ema = get_table(in);
  return ck;
}

void load_into(const Checkpoint& ck, Model& model, bool use_ema) {
  if (!ck.config.same_architecture(model.config()))
    fail(Errc::IncompatibleCheckpoint, "checkpoint architecture differs from the requested model");
  const auto& table = (use_ema && !ck.ema.empty()) ? ck.ema : ck.params;
  auto& params = model.parameters();
  if (table.size() != params.size()) fail(Errc::IncompatibleCheckpoint, "parameter table size differs");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (table[i].first != params[i].name || table[i].second.shape() != params[i].value.shape())
      fail(Errc::IncompatibleCheckpoint, "parameter " + params[i].name + " missing or reshaped");
    params[i].value.data() = table[i].second.data();
  }
}

}  // namespace xdc
