#include "xdc/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "xdc/error.hpp"

namespace xdc {

namespace {

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v) {
  fail(Errc::InvalidConfig, "bad value '" + v + "' for " + key);
}

std::string show(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::string show(bool v) { return v ? "true" : "false"; }
std::string show(int v) { return std::to_string(v); }
std::string show(std::size_t v) { return std::to_string(v); }
std::string show(const std::string& v) { return v; }
std::string show(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}
std::string show(const std::array<double, 3>& v) { return show(v[0]) + "," + show(v[1]) + "," + show(v[2]); }
std::string show(const Miller& m) {
  return std::to_string(m[0]) + "," + std::to_string(m[1]) + "," + std::to_string(m[2]);
}
std::string show(ProfileShape p) { return p == ProfileShape::PseudoVoigt ? "pseudo_voigt" : "exact_voigt"; }
std::string show(ThermalModel t) { return t == ThermalModel::IsotropicB ? "isotropic_b" : "debye_temperature"; }

std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

// Parsers take the key for error messages.
void parse(const std::string& k, const std::string& v, double& out) {
  std::size_t pos = 0;
  try {
    out = std::stod(v, &pos);
  } catch (...) {
    bad_value(k, v);
  }
  if (pos != v.size()) bad_value(k, v);
}
void parse(const std::string& k, const std::string& v, unsigned long long& out) {
  if (v.empty() || v[0] == '-') bad_value(k, v);
  std::size_t pos = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (...) {
    bad_value(k, v);
  }
  if (pos != v.size()) bad_value(k, v);
}
void parse(const std::string& k, const std::string& v, std::size_t& out) {
  unsigned long long x = 0;
  parse(k, v, x);
  out = static_cast<std::size_t>(x);
}
void parse(const std::string& k, const std::string& v, int& out) {
  std::size_t pos = 0;
  try {
    out = std::stoi(v, &pos);
  } catch (...) {
    bad_value(k, v);
  }
  if (pos != v.size()) bad_value(k, v);
}
void parse(const std::string& k, const std::string& v, bool& out) {
  if (v == "true" || v == "1") out = true;
  else if (v == "false" || v == "0") out = false;
  else bad_value(k, v);
}
void parse(const std::string&, const std::string& v, std::string& out) { out = v; }
void parse(const std::string& k, const std::string& v, std::vector<std::size_t>& out) {
  out.clear();
  for (const auto& s : split_commas(v)) {
    std::size_t x = 0;
    parse(k, s, x);
    out.push_back(x);
  }
}
void parse(const std::string& k, const std::string& v, std::array<double, 3>& out) {
  const auto parts = split_commas(v);
  if (parts.size() != 3) bad_value(k, v);
  for (int i = 0; i < 3; ++i) parse(k, parts[static_cast<std::size_t>(i)], out[static_cast<std::size_t>(i)]);
}
void parse(const std::string& k, const std::string& v, Miller& out) {
  const auto parts = split_commas(v);
  if (parts.size() != 3) bad_value(k, v);
  for (int i = 0; i < 3; ++i) parse(k, parts[static_cast<std::size_t>(i)], out[static_cast<std::size_t>(i)]);
}
void parse(const std::string& k, const std::string& v, ProfileShape& out) {
  if (v == "pseudo_voigt") out = ProfileShape::PseudoVoigt;
  else if (v == "exact_voigt") out = ProfileShape::ExactVoigt;
  else bad_value(k, v);
}
void parse(const std::string& k, const std::string& v, ThermalModel& out) {
  if (v == "isotropic_b") out = ThermalModel::IsotropicB;
  else if (v == "debye_temperature") out = ThermalModel::DebyeTemperature;
  else bad_value(k, v);
}

template <class Access>
Field field(std::string key, Access acc) {
  return Field{key,
               [acc](const RunConfig& c) { return show(acc(const_cast<RunConfig&>(c))); },
               [acc, key](RunConfig& c, const std::string& v) { parse(key, v, acc(c)); }};
}

#define XDC_FIELD(name, member) field(name, [](RunConfig& c) -> auto& { return c.member; })

void train_fields(std::vector<Field>& f, const std::string& p, TrainConfig RunConfig::*t) {
  auto add = [&](const std::string& k, auto acc) {
    f.push_back(field(p + "." + k, [t, acc](RunConfig& c) -> auto& { return acc(c.*t); }));
  };
  add("lr", [](TrainConfig& x) -> auto& { return x.lr; });
  add("batch_size", [](TrainConfig& x) -> auto& { return x.batch_size; });
  add("epochs", [](TrainConfig& x) -> auto& { return x.epochs; });
  add("warmup_epochs", [](TrainConfig& x) -> auto& { return x.warmup_epochs; });
  add("min_lr_ratio", [](TrainConfig& x) -> auto& { return x.min_lr_ratio; });
  add("weight_decay", [](TrainConfig& x) -> auto& { return x.weight_decay; });
  add("beta1", [](TrainConfig& x) -> auto& { return x.beta1; });
  add("beta2", [](TrainConfig& x) -> auto& { return x.beta2; });
  add("adam_eps", [](TrainConfig& x) -> auto& { return x.adam_eps; });
  add("ema_decay", [](TrainConfig& x) -> auto& { return x.ema_decay; });
  add("freeze_global", [](TrainConfig& x) -> auto& { return x.freeze_global; });
  add("freeze_input_projection", [](TrainConfig& x) -> auto& { return x.freeze_input_projection; });
  add("masked_only", [](TrainConfig& x) -> auto& { return x.masked_only; });
  add("samples_per_epoch", [](TrainConfig& x) -> auto& { return x.samples_per_epoch; });
  add("val_samples", [](TrainConfig& x) -> auto& { return x.val_samples; });
}

const std::vector<Field>& registry() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f{
        XDC_FIELD("seed", seed),
        XDC_FIELD("threads", threads),
        XDC_FIELD("verbose", verbose),
        XDC_FIELD("out", out),
        XDC_FIELD("sim.wavelength", sim.wavelength),
        XDC_FIELD("sim.two_theta_min", sim.two_theta_min),
        XDC_FIELD("sim.two_theta_max", sim.two_theta_max),
        XDC_FIELD("sim.step", sim.step),
        XDC_FIELD("sim.crystallite_size", sim.crystallite_size),
        XDC_FIELD("sim.thermal_B", sim.thermal_B),
        XDC_FIELD("sim.zero_shift", sim.zero_shift),
        XDC_FIELD("sim.detector_distance", sim.detector_distance),
        XDC_FIELD("sim.slit_half_height", sim.slit_half_height),
        XDC_FIELD("sim.sample_half_height", sim.sample_half_height),
        XDC_FIELD("sim.background_order", sim.background_order),
        XDC_FIELD("sim.background_amplitude", sim.background_amplitude),
        XDC_FIELD("sim.noise_ratio", sim.noise_ratio),
        XDC_FIELD("sim.preferred_orientation_enabled", sim.preferred_orientation_enabled),
        XDC_FIELD("sim.preferred_orientation", sim.preferred_orientation),
        XDC_FIELD("sim.orientation_axis", sim.orientation_axis),
        XDC_FIELD("sim.profile", sim.profile),
        XDC_FIELD("sim.geometry_kappa", sim.geometry_kappa),
        XDC_FIELD("sim.smoothing_sigma", sim.smoothing_sigma),
        XDC_FIELD("sim.thermal_model", sim.thermal_model),
        XDC_FIELD("sim.temperature", sim.temperature),
        XDC_FIELD("sim.debye_temperature", sim.debye_temperature),
        XDC_FIELD("sim.lattice_extinction", sim.lattice_extinction),
        XDC_FIELD("sim.lattice_torsion", sim.lattice_torsion),
        XDC_FIELD("data.cif_dir", data.cif_dir),
        XDC_FIELD("data.random_structures", data.random_structures),
        XDC_FIELD("data.renders_per_crystal", data.renders_per_crystal),
        XDC_FIELD("data.split", data.split),
        XDC_FIELD("data.val_mixtures", data.val_mixtures),
        XDC_FIELD("data.test_mixtures", data.test_mixtures),
        XDC_FIELD("mix.k_max", mix.k_max),
        XDC_FIELD("mix.min_components", mix.min_components),
        XDC_FIELD("mix.max_components", mix.max_components),
        XDC_FIELD("mix.alpha", mix.alpha),
        XDC_FIELD("mix.weight_floor", mix.weight_floor),
        XDC_FIELD("mix.noise_sigma", mix.noise_sigma),
        XDC_FIELD("model.length", model.length),
        XDC_FIELD("model.d_model", model.d_model),
        XDC_FIELD("model.n_heads", model.n_heads),
        XDC_FIELD("model.n_layers", model.n_layers),
        XDC_FIELD("model.ffn_mult", model.ffn_mult),
        XDC_FIELD("model.conv_channels", model.conv_channels),
        XDC_FIELD("model.conv_kernels", model.conv_kernels),
        XDC_FIELD("model.conv_strides", model.conv_strides),
        XDC_FIELD("model.decoder_kernel", model.decoder_kernel),
        XDC_FIELD("model.k_max", model.k_max),
        XDC_FIELD("model.patch_size", model.patch_size),
        XDC_FIELD("model.patch_stride", model.patch_stride),
        XDC_FIELD("model.mask_ratio", model.mask_ratio),
        XDC_FIELD("model.tau", model.tau),
        XDC_FIELD("model.skip_fusion", model.skip_fusion),
    };
    train_fields(f, "pretrain", &RunConfig::pretrain);
    train_fields(f, "train", &RunConfig::train);
    f.push_back(XDC_FIELD("loss.alpha_amp", loss.alpha_amp));
    f.push_back(XDC_FIELD("loss.lambda_shape", loss.lambda_shape));
    f.push_back(XDC_FIELD("loss.beta_geo", loss.beta_geo));
    f.push_back(XDC_FIELD("loss.lambda_geo", loss.lambda_geo));
    f.push_back(XDC_FIELD("loss.lambda_act", loss.lambda_act));
    f.push_back(XDC_FIELD("loss.lambda_mix", loss.lambda_mix));
    f.push_back(XDC_FIELD("loss.lambda_shape_pre", loss.lambda_shape_pre));
    f.push_back(XDC_FIELD("loss.lambda_geo_pre", loss.lambda_geo_pre));
    f.push_back(XDC_FIELD("eval.peak_min_height", eval.peaks.min_height));
    f.push_back(XDC_FIELD("eval.peak_min_separation", eval.peaks.min_separation));
    f.push_back(XDC_FIELD("eval.match_tol", eval.match_tol));
    f.push_back(XDC_FIELD("eval.candidates", eval.candidates));
    f.push_back(XDC_FIELD("eval.rerank_window", eval.rerank_window));
    return f;
  }();
  return fields;
}

#undef XDC_FIELD

}  // namespace

RunConfig::RunConfig() {
  pretrain.epochs = 10;
  pretrain.warmup_epochs = 1;
  pretrain.freeze_global = false;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : registry())
    if (f.key == key) {
      f.set(*this, trim(value));
      return;
    }
  fail(Errc::InvalidConfig, "unknown config key '" + key + "'");
}

void RunConfig::apply_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(Errc::InvalidConfig, "line " + std::to_string(n) + ": expected key = value");
    set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

void RunConfig::apply_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::Io, "cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  apply_text(ss.str());
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& f : registry()) s += f.key + " = " + f.get(*this) + "\n";
  return s;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> k;
  for (const auto& f : registry()) k.push_back(f.key);
  return k;
}

void RunConfig::validate() const {
  if (threads < 1) fail(Errc::InvalidConfig, "threads must be >= 1");
  sim.validate();
  model.validate();
  pretrain.validate();
  train.validate();
  loss.validate();
  if (data.renders_per_crystal < 1) fail(Errc::InvalidConfig, "data.renders_per_crystal must be >= 1");
  const double total = data.split[0] + data.split[1] + data.split[2];
  if (std::abs(total - 1.0) > 1e-9 || data.split[0] <= 0 || data.split[1] < 0 || data.split[2] < 0)
    fail(Errc::InvalidConfig, "data.split must be non-negative and sum to 1");
  if (mix.k_max != static_cast<int>(model.k_max)) fail(Errc::InvalidConfig, "mix.k_max must equal model.k_max");
  if (mix.min_components < 1 || mix.max_components < mix.min_components || mix.max_components > mix.k_max)
    fail(Errc::InvalidConfig, "need 1 <= mix.min_components <= mix.max_components <= mix.k_max");
  if (sim.grid().length != model.length)
    fail(Errc::InvalidConfig, "sim grid has " + std::to_string(sim.grid().length) + " points but model.length is " +
                                  std::to_string(model.length));
}

std::uint64_t RunConfig::stage_seed(const std::string& stage) const { return derive_seed(seed, stage); }

RunConfig RunConfig::smoke() {
  RunConfig c;
  c.sim.two_theta_min = 20.0;
  c.sim.two_theta_max = 50.72;
  c.sim.step = 0.06;
  c.data.random_structures = 40;
  c.data.renders_per_crystal = 4;
  c.data.val_mixtures = 8;
  c.data.test_mixtures = 8;
  c.mix.max_components = 3;
  c.pretrain.epochs = 2;
  c.pretrain.warmup_epochs = 1;
  c.pretrain.samples_per_epoch = 32;
  c.pretrain.lr = 1e-3;
  c.train.epochs = 2;
  c.train.warmup_epochs = 1;
  c.train.samples_per_epoch = 32;
  c.train.val_samples = 8;
  c.train.lr = 1e-3;
  c.eval.candidates = 16;
  return c;
}

}  // namespace xdc
