#include "xdc/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <thread>

#include "xdc/error.hpp"

namespace fs = std::filesystem;

namespace xdc {

namespace run_paths {
std::string library(const std::string& out) { return (fs::path(out) / "library").string(); }
std::string patterns(const std::string& out) { return (fs::path(out) / "patterns").string(); }
std::string manifest(const std::string& out) { return (fs::path(out) / "split.txt").string(); }
std::string failures(const std::string& out) { return (fs::path(out) / "failures.txt").string(); }
std::string index(const std::string& out) { return (fs::path(out) / "index.xdci").string(); }
std::string mixtures(const std::string& out, const std::string& split) {
  return (fs::path(out) / "mixtures" / split).string();
}
std::string pretrain_checkpoint(const std::string& out) { return (fs::path(out) / "pretrain.xdck").string(); }
std::string train_checkpoint(const std::string& out) { return (fs::path(out) / "train.xdck").string(); }
std::string eval_dir(const std::string& out) { return (fs::path(out) / "eval").string(); }
}  // namespace run_paths

namespace {

void say(const LogSink& log, const std::string& line) {
  if (log) log(line);
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream o(path);
  if (!o) fail(Errc::Io, "cannot write " + path);
  o << text;
  if (!o) fail(Errc::Io, "write failed for " + path);
}

std::string mixture_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "m%05zu", i);
  return buf;
}

template <class F>
void parallel_for(std::size_t n, int threads, F&& work) {
  const std::size_t nt = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), n));
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t t) {
    for (std::size_t i = t; i < n; i += nt) {
      try {
        work(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (nt == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nt; ++t) pool.emplace_back(run, t);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<MixtureSample> read_mixture_dir(const std::string& dir, std::size_t limit = 0) {
  if (!fs::is_directory(dir)) fail(Errc::Io, "no mixture directory " + dir);
  std::vector<std::string> subdirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) subdirs.push_back(e.path().string());
  std::sort(subdirs.begin(), subdirs.end());
  if (limit && subdirs.size() > limit) subdirs.resize(limit);
  std::vector<MixtureSample> out;
  for (const auto& d : subdirs) out.push_back(read_mixture(d));
  return out;
}

Model model_for(const RunConfig& cfg) {
  ModelConfig mc = cfg.model;
  mc.init_seed = cfg.stage_seed("init");
  return Model(mc);
}

std::vector<std::string> expand_inputs(const std::vector<std::string>& inputs) {
  std::vector<std::string> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<std::string> found;
      for (const auto& e : fs::directory_iterator(in))
        if (e.is_regular_file()) found.push_back(e.path().string());
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else if (fs::exists(in)) {
      files.push_back(in);
    } else {
      fail(Errc::Io, "no such input " + in);
    }
  }
  if (files.empty()) fail(Errc::EmptyInput, "no input patterns");
  return files;
}

}  // namespace

void write_run_snapshot(const RunConfig& cfg, const std::string& command) {
  fs::create_directories(cfg.out);
  write_file((fs::path(cfg.out) / "config.resolved.txt").string(), cfg.to_text());
  std::ofstream o(fs::path(cfg.out) / "run.txt", std::ios::app);
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char ts[64];
  std::strftime(ts, sizeof ts, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  o << "command=" << command << " seed=" << cfg.seed << " threads=" << cfg.threads << " time=" << ts << "\n";
}

// ---- simulate ----------------------------------------------------------------------------------

SimulateSummary cmd_simulate(const RunConfig& cfg, const std::string& cif_dir, const LogSink& log) {
  cfg.validate();
  SimulateSummary sum;
  std::vector<CrystalStructure> structures;
  std::string failures;
  if (!cif_dir.empty()) {
    if (!fs::is_directory(cif_dir)) fail(Errc::Io, "no CIF directory " + cif_dir);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(cif_dir))
      if (e.is_regular_file() && e.path().extension() == ".cif") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      try {
        structures.push_back(load_structure(f));
        // the file name disambiguates blocks that share a data_ name
        if (std::any_of(structures.begin(), structures.end() - 1,
                        [&](const auto& s) { return s.id == structures.back().id; }))
          structures.back().id += "_" + fs::path(f).stem().string();
      } catch (const Error& e) {
        ++sum.failed;
        failures += fs::path(f).filename().string() + ": " + e.what() + "\n";
        say(log, "skip file=" + fs::path(f).filename().string() + " error=" + std::string(errc_name(e.code())));
      }
    }
  } else {
    std::mt19937_64 rng(cfg.stage_seed("structures"));
    for (std::size_t i = 0; i < cfg.data.random_structures; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "rs%05zu", i);
      structures.push_back(random_structure(id, rng));
    }
  }
  sum.parsed = structures.size();
  fs::create_directories(cfg.out);
  write_file(run_paths::failures(cfg.out), failures);
  if (structures.empty()) fail(Errc::EmptyInput, "no structures parsed");

  const int n = cfg.data.renders_per_crystal;
  const std::uint64_t seed = cfg.stage_seed("simulate");
  const std::string pat_dir = run_paths::patterns(cfg.out);
  fs::create_directories(pat_dir);
  std::vector<std::string> lines(structures.size() * static_cast<std::size_t>(n));
  ReferenceLibrary lib;
  lib.grid = cfg.sim.grid();
  std::vector<DiffractionPattern> selected(structures.size());
  parallel_for(lines.size(), cfg.threads, [&](std::size_t j) {
    const std::size_t si = j / static_cast<std::size_t>(n);
    const int r = static_cast<int>(j % static_cast<std::size_t>(n));
    const auto& s = structures[si];
    const auto p = render_candidate(s, cfg.sim, seed, r);
    const std::string file = "c" + std::to_string(si) + "_r" + std::to_string(r) + ".xdcp";
    write_pattern_binary((fs::path(pat_dir) / file).string(), p);
    lines[j] = file + " " + s.id + " " + std::to_string(r) + "\n";
    if (r == selected_candidate(s.id, seed, n)) selected[si] = p;
  });
  std::string idx = "# file id render\n";
  for (const auto& l : lines) idx += l;
  write_file((fs::path(pat_dir) / "index.txt").string(), idx);
  sum.patterns = lines.size();
  for (std::size_t i = 0; i < structures.size(); ++i)
    if (!lib.entries.emplace(structures[i].id, std::move(selected[i])).second)
      fail(Errc::DuplicateIds, "duplicate structure id " + structures[i].id);
  write_library(run_paths::library(cfg.out), lib);
  write_index(run_paths::index(cfg.out), RetrievalIndex::from_library(lib));
  std::vector<std::string> ids = lib.ids();
  write_manifest(run_paths::manifest(cfg.out), split_by_crystal(ids, cfg.data.split, cfg.stage_seed("split")));
  say(log, "simulate parsed=" + std::to_string(sum.parsed) + " failed=" + std::to_string(sum.failed) +
               " patterns=" + std::to_string(sum.patterns));
  return sum;
}

// ---- mix ---------------------------------------------------------------------------------------

std::size_t cmd_mix(const RunConfig& cfg, const std::string& library_dir, const LogSink& log) {
  cfg.validate();
  const ReferenceLibrary lib = read_library(library_dir.empty() ? run_paths::library(cfg.out) : library_dir);
  const SplitManifest man = read_manifest(run_paths::manifest(cfg.out));
  if (!lib.grid.same_as(cfg.sim.grid())) fail(Errc::GridMismatch, "library grid differs from the sim grid");
  std::size_t total = 0;
  for (const auto& [split, count] : {std::pair<std::string, std::size_t>{"val", cfg.data.val_mixtures},
                                     std::pair<std::string, std::size_t>{"test", cfg.data.test_mixtures}}) {
    const std::string dir = run_paths::mixtures(cfg.out, split);
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto& pool = man.split(split);
    const std::uint64_t seed = cfg.stage_seed("mix-" + split);
    for (std::size_t i = 0; i < count; ++i)
      write_mixture((fs::path(dir) / mixture_name(i)).string(), mixture_at(lib, pool, 0, i, seed, cfg.mix));
    total += count;
    say(log, "mix split=" + split + " count=" + std::to_string(count) + " pool=" + std::to_string(pool.size()));
  }
  return total;
}

// ---- prep --------------------------------------------------------------------------------------

std::vector<std::string> cmd_prep(const RunConfig& cfg, const std::vector<std::string>& inputs, int snip_iterations,
                                  const LogSink& log) {
  const Grid grid = cfg.sim.grid();
  const std::string dir = (fs::path(cfg.out) / "prep").string();
  fs::create_directories(dir);
  std::vector<std::string> written;
  for (const auto& f : expand_inputs(inputs)) {
    const auto raw = read_two_column(f);
    DiffractionPattern p = resample_to_grid(raw, grid);
    SnipOptions so;
    so.iterations = snip_iterations;
    const auto bg = snip_background(p.intensities, so);
    for (std::size_t i = 0; i < p.size(); ++i) p.intensities[i] = std::max(0.0, p.intensities[i] - bg[i]);
    p.normalize_max();
    const std::string path = (fs::path(dir) / (fs::path(f).stem().string() + ".txt")).string();
    write_pattern_text(path, p);
    written.push_back(path);
    say(log, "prep input=" + fs::path(f).filename().string() + " points=" + std::to_string(raw.size()));
  }
  return written;
}

// ---- training ---------------------------------------------------------------------------------

TrainReport cmd_pretrain(const RunConfig& cfg, const LogSink& log) {
  cfg.validate();
  const ReferenceLibrary lib = read_library(run_paths::library(cfg.out));
  const SplitManifest man = read_manifest(run_paths::manifest(cfg.out));
  const auto pool = man.train;
  const std::uint64_t seed = cfg.stage_seed("pretrain-data");
  const PatternSource train = [&](std::uint64_t epoch, std::uint64_t index) {
    return mixture_at(lib, pool, epoch, index, seed, cfg.mix).mixed.intensities;
  };
  std::vector<MixtureSample> val;
  if (cfg.pretrain.val_samples > 0) val = read_mixture_dir(run_paths::mixtures(cfg.out, "val"), cfg.pretrain.val_samples);
  const PatternSource val_src = [&](std::uint64_t, std::uint64_t index) { return val.at(index).mixed.intensities; };
  TrainConfig tc = cfg.pretrain;
  tc.seed = cfg.stage_seed("pretrain");
  tc.threads = cfg.threads;
  tc.val_samples = val.size();
  Model model = model_for(cfg);
  return run_stage1(model, train, val.empty() ? nullptr : &val_src, tc, cfg.loss,
                    run_paths::pretrain_checkpoint(cfg.out), log);
}

TrainReport cmd_train(const RunConfig& cfg, const std::string& init, const LogSink& log) {
  cfg.validate();
  const ReferenceLibrary lib = read_library(run_paths::library(cfg.out));
  const SplitManifest man = read_manifest(run_paths::manifest(cfg.out));
  Model model = model_for(cfg);
  const std::string init_path = !init.empty() ? init : run_paths::pretrain_checkpoint(cfg.out);
  if (fs::exists(init_path)) {
    load_into(read_checkpoint(init_path), model, false);
    say(log, "init checkpoint=" + fs::path(init_path).filename().string());
  } else if (!init.empty()) {
    fail(Errc::Io, "no checkpoint " + init);
  } else {
    say(log, "init checkpoint=none");
  }
  const auto pool = man.train;
  const std::uint64_t seed = cfg.stage_seed("train-data");
  const MixtureSource train = [&](std::uint64_t epoch, std::uint64_t index) {
    return mixture_at(lib, pool, epoch, index, seed, cfg.mix);
  };
  std::vector<MixtureSample> val;
  if (cfg.train.val_samples > 0) val = read_mixture_dir(run_paths::mixtures(cfg.out, "val"), cfg.train.val_samples);
  const MixtureSource val_src = [&](std::uint64_t, std::uint64_t index) { return val.at(index); };
  TrainConfig tc = cfg.train;
  tc.seed = cfg.stage_seed("train");
  tc.threads = cfg.threads;
  tc.val_samples = val.size();
  return run_stage2(model, train, val.empty() ? nullptr : &val_src, tc, cfg.loss,
                    run_paths::train_checkpoint(cfg.out), log);
}

// ---- decompose / index / evaluate ---------------------------------------------------------------

namespace {

Model load_model(const std::string& path, bool use_ema) {
  const Checkpoint ck = read_checkpoint(path);
  Model m(ck.config);
  load_into(ck, m, use_ema);
  return m;
}

}  // namespace

std::vector<DecomposeSummary> cmd_decompose(const RunConfig& cfg, const std::string& checkpoint,
                                            const std::vector<std::string>& inputs, double tau, bool raw_weights,
                                            const LogSink& log) {
  const Model model = load_model(checkpoint.empty() ? run_paths::train_checkpoint(cfg.out) : checkpoint, !raw_weights);
  const std::size_t L = model.config().length;
  std::vector<DecomposeSummary> out;
  for (const auto& f : expand_inputs(inputs)) {
    const DiffractionPattern p = load_pattern(f);
    if (p.size() != L)
      fail(Errc::GridMismatch, "IncompatibleGrid: " + f + " has " + std::to_string(p.size()) +
                                   " points, the model expects " + std::to_string(L));
    const auto d = model.decompose(p.intensities);
    DecomposeSummary s;
    s.input = f;
    s.activities = d.activities;
    for (std::size_t k = 0; k < d.activities.size(); ++k)
      if (d.activities[k] > tau) s.active.push_back(k);
    const std::string dir = (fs::path(cfg.out) / "decompose" / fs::path(f).stem()).string();
    fs::create_directories(dir);
    for (std::size_t k = 0; k < d.components.size(); ++k)
      write_pattern_text((fs::path(dir) / ("slot_" + std::to_string(k) + ".txt")).string(),
                         DiffractionPattern(p.grid, d.components[k]));
    write_pattern_text((fs::path(dir) / "reconstruction.txt").string(), DiffractionPattern(p.grid, d.reconstruction));
    std::string act = "# slot activity active\n", list;
    char buf[96];
    for (std::size_t k = 0; k < d.activities.size(); ++k) {
      const bool on = std::find(s.active.begin(), s.active.end(), k) != s.active.end();
      std::snprintf(buf, sizeof buf, "%zu %.17g %d\n", k, d.activities[k], on ? 1 : 0);
      act += buf;
      if (on) list += (list.empty() ? "" : ",") + std::to_string(k);
    }
    write_file((fs::path(dir) / "activities.txt").string(), act);
    say(log, "decompose file=" + fs::path(f).filename().string() + " active=" + (list.empty() ? "none" : list));
    out.push_back(std::move(s));
  }
  return out;
}

std::size_t cmd_index(const RunConfig& cfg, const std::string& library_dir, const LogSink& log) {
  const ReferenceLibrary lib = read_library(library_dir.empty() ? run_paths::library(cfg.out) : library_dir);
  fs::create_directories(cfg.out);
  write_index(run_paths::index(cfg.out), RetrievalIndex::from_library(lib));
  say(log, "index entries=" + std::to_string(lib.entries.size()));
  return lib.entries.size();
}

EvalReport cmd_evaluate(const RunConfig& cfg, const std::string& checkpoint, const std::string& mixtures_dir,
                        const std::string& index_path, const LogSink& log) {
  const Model model = load_model(checkpoint.empty() ? run_paths::train_checkpoint(cfg.out) : checkpoint, true);
  const auto samples = read_mixture_dir(mixtures_dir.empty() ? run_paths::mixtures(cfg.out, "test") : mixtures_dir);
  const std::string ip = index_path.empty() ? run_paths::index(cfg.out) : index_path;
  std::optional<RetrievalIndex> index;
  if (fs::exists(ip)) index = read_index(ip);
  EvalOptions opt = cfg.eval;
  opt.loss = cfg.loss;
  opt.threads = cfg.threads;
  const EvalReport rep = evaluate_model(model, samples, index ? &*index : nullptr, opt);

  const std::string dir = run_paths::eval_dir(cfg.out);
  fs::create_directories(dir);
  write_file((fs::path(dir) / "report.txt").string(), rep.to_text());
  write_file((fs::path(dir) / "table.txt").string(), rep.table());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto in = make_eval_input(samples[i], model.decompose(samples[i].mixed.intensities));
    write_plot_data((fs::path(dir) / "plots" / mixture_name(i)).string(), in, rep.samples[i]);
  }
  say(log, "evaluate samples=" + std::to_string(samples.size()));
  return rep;
}

std::vector<std::string> changed_parameters(const std::string& a, const std::string& b,
                                            const std::vector<ParamGroup>& groups) {
  const Checkpoint ca = read_checkpoint(a), cb = read_checkpoint(b);
  if (!ca.config.same_architecture(cb.config)) fail(Errc::IncompatibleCheckpoint, "checkpoint architectures differ");
  const Model ref(ca.config);
  std::vector<std::string> changed;
  for (const auto& p : ref.parameters()) {
    if (std::find(groups.begin(), groups.end(), p.group) == groups.end()) continue;
    const Tensor* ta = nullptr;
    const Tensor* tb = nullptr;
    for (const auto& [n, t] : ca.params)
      if (n == p.name) ta = &t;
    for (const auto& [n, t] : cb.params)
      if (n == p.name) tb = &t;
    if (!ta || !tb || ta->data() != tb->data()) changed.push_back(p.name);
  }
  return changed;
}

// ---- smoke -------------------------------------------------------------------------------------

EvalReport cmd_smoke(const RunConfig& cfg, const LogSink& log) {
  auto stage = [&](const std::string& name, auto&& fn) {
    say(log, "stage=" + name);
    try {
      return fn();
    } catch (const Error& e) {
      throw Error(e.code(), "stage " + name + " failed: " + e.what());
    } catch (const std::exception& e) {
      throw std::runtime_error("stage " + name + " failed: " + e.what());
    }
  };
  stage("simulate", [&] { return cmd_simulate(cfg, cfg.data.cif_dir, log); });
  stage("mix", [&] { return cmd_mix(cfg, "", log); });
  stage("pretrain", [&] { return cmd_pretrain(cfg, log); });
  stage("train", [&] { return cmd_train(cfg, "", log); });
  stage("decompose", [&] {
    return cmd_decompose(cfg, "", {(fs::path(run_paths::mixtures(cfg.out, "test")) / mixture_name(0) / "mixed.txt").string()},
                         cfg.model.tau, false, log);
  });
  EvalReport rep = stage("evaluate", [&] { return cmd_evaluate(cfg, "", "", "", log); });
  stage("freeze-check", [&] {
    const auto changed = changed_parameters(run_paths::pretrain_checkpoint(cfg.out), run_paths::train_checkpoint(cfg.out),
                                            {ParamGroup::Global, ParamGroup::GlobalInput});
    if (cfg.train.freeze_global && !changed.empty())
      fail(Errc::InvalidConfig, "frozen parameter changed during training: " + changed.front());
    say(log, "freeze_check changed=" + std::to_string(changed.size()));
    return 0;
  });
  return rep;
}

}  // namespace xdc
