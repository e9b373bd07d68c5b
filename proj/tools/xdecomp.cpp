// xdecomp: simulate, mix, prep, pretrain, train, decompose, index, evaluate, smoke.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 internal error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "xdc/error.hpp"
#include "xdc/pipeline.hpp"

namespace fs = std::filesystem;
using namespace xdc;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  int threads = 0;
  bool verbose = false;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key = value configuration file")->check(CLI::ExistingFile);
  app->add_option_function<std::uint64_t>(
      "--seed", [&c](const std::uint64_t& s) { c.seed = s, c.seed_set = true; }, "global seed");
  app->add_option("--out", c.out, "run directory");
  app->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
  app->add_flag("--verbose", c.verbose, "echo log lines to stderr");
  app->add_option("--set", c.overrides, "override one config key (key=value), repeatable");
}

// Without --config, a run directory's resolved snapshot is the starting point,
// so later commands inherit what earlier ones used.
RunConfig resolve(const Common& c, RunConfig base, bool reuse_snapshot) {
  const auto snapshot = fs::path(c.out.empty() ? base.out : c.out) / "config.resolved.txt";
  if (!c.config.empty()) base.apply_file(c.config);
  else if (reuse_snapshot && fs::exists(snapshot)) base.apply_file(snapshot.string());
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail(Errc::Usage, "--set expects key=value, got '" + kv + "'");
    base.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed_set) base.seed = c.seed;
  if (!c.out.empty()) base.out = c.out;
  if (c.threads > 0) base.threads = c.threads;
  if (c.verbose) base.verbose = true;
  return base;
}

LogSink make_log(const RunConfig& cfg, const std::string& command) {
  fs::create_directories(cfg.out);
  auto file = std::make_shared<std::ofstream>(fs::path(cfg.out) / (command + ".log"), std::ios::trunc);
  const bool echo = cfg.verbose;
  return [file, echo](const std::string& line) {
    *file << line << '\n';
    file->flush();
    if (echo) std::cerr << line << '\n';
  };
}

int exit_code(Errc e) {
  switch (e) {
    case Errc::Usage:
    case Errc::InvalidConfig:
    case Errc::PatchConfigInvalid:
      return 1;
    default:
      return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Powder diffraction mixture decomposition"};
  app.require_subcommand(1);
  Common common;
  std::string cif_dir, library, checkpoint, mixtures, index, init;
  std::vector<std::string> inputs;
  double tau = -1;
  bool raw = false;
  int snip = 24;
  bool show_config = false;

  auto* simulate = app.add_subcommand("simulate", "render a pattern library from CIF files");
  simulate->add_option("--cif-dir", cif_dir, "directory of CIF files (default: data.cif_dir or random structures)");
  auto* mix = app.add_subcommand("mix", "write fixed validation and test mixtures");
  mix->add_option("--library", library, "library directory");
  auto* prep = app.add_subcommand("prep", "resample, background-subtract and normalize measured patterns");
  prep->add_option("inputs", inputs, "two-column files or directories")->required();
  prep->add_option("--snip-iterations", snip, "SNIP clipping iterations")->check(CLI::PositiveNumber);
  auto* pretrain = app.add_subcommand("pretrain", "masked-patch pretraining of the global encoder");
  auto* train = app.add_subcommand("train", "decomposition training");
  train->add_option("--init", init, "initial checkpoint (default: the run's pretraining checkpoint)");
  auto* decompose = app.add_subcommand("decompose", "decompose patterns with a trained checkpoint");
  decompose->add_option("inputs", inputs, "pattern files or directories")->required();
  decompose->add_option("--checkpoint", checkpoint, "checkpoint (default: the run's training checkpoint)");
  decompose->add_option("--tau", tau, "activity threshold (default: model.tau)");
  decompose->add_flag("--raw-weights", raw, "use raw weights instead of the EMA copy");
  auto* idx = app.add_subcommand("index", "build the retrieval index from a library");
  idx->add_option("--library", library, "library directory");
  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint on stored test mixtures");
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint");
  evaluate->add_option("--mixtures", mixtures, "directory of mixture directories");
  evaluate->add_option("--index", index, "retrieval index file");
  auto* smoke = app.add_subcommand("smoke", "end-to-end run at toy scale");
  for (auto* sc : {simulate, mix, prep, pretrain, train, decompose, idx, evaluate, smoke}) {
    add_common(sc, common);
    sc->add_flag("--print-config", show_config, "print the resolved configuration and exit");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    RunConfig cfg = resolve(common, command == "smoke" ? RunConfig::smoke() : RunConfig{},
                            command != "smoke" && command != "simulate");
    if (show_config) {
      std::cout << cfg.to_text();
      return 0;
    }
    cfg.validate();
    write_run_snapshot(cfg, command);
    const LogSink log = make_log(cfg, command);
    auto print = [&](const std::string& s) {
      log(s);
      std::cout << s << '\n';
    };

    if (command == "simulate") {
      const auto s = cmd_simulate(cfg, cif_dir.empty() ? cfg.data.cif_dir : cif_dir, log);
      print("simulate parsed=" + std::to_string(s.parsed) + " failed=" + std::to_string(s.failed) +
            " patterns=" + std::to_string(s.patterns));
    } else if (command == "mix") {
      print("mix written=" + std::to_string(cmd_mix(cfg, library, log)));
    } else if (command == "prep") {
      for (const auto& p : cmd_prep(cfg, inputs, snip, log)) print("prep wrote=" + p);
    } else if (command == "pretrain") {
      const auto r = cmd_pretrain(cfg, log);
      print("pretrain epochs=" + std::to_string(r.epochs.size()) + " checkpoint=" + run_paths::pretrain_checkpoint(cfg.out));
    } else if (command == "train") {
      const auto r = cmd_train(cfg, init, log);
      print("train epochs=" + std::to_string(r.epochs.size()) + " checkpoint=" + run_paths::train_checkpoint(cfg.out));
    } else if (command == "decompose") {
      const auto res = cmd_decompose(cfg, checkpoint, inputs, tau >= 0 ? tau : cfg.model.tau, raw, log);
      for (const auto& d : res) {
        std::string line = "file=" + fs::path(d.input).filename().string() + " activities=";
        char buf[32];
        for (std::size_t k = 0; k < d.activities.size(); ++k) {
          std::snprintf(buf, sizeof buf, "%s%.4f", k ? "," : "", d.activities[k]);
          line += buf;
        }
        line += " active=";
        for (std::size_t k = 0; k < d.active.size(); ++k) line += (k ? "," : "") + std::to_string(d.active[k]);
        if (d.active.empty()) line += "none";
        std::cout << line << '\n';
      }
    } else if (command == "index") {
      print("index entries=" + std::to_string(cmd_index(cfg, library, log)));
    } else if (command == "evaluate") {
      const auto rep = cmd_evaluate(cfg, checkpoint, mixtures, index, log);
      std::cout << rep.table();
    } else if (command == "smoke") {
      const auto rep = cmd_smoke(cfg, log);
      std::cout << rep.table();
      print("smoke status=ok report=" + (fs::path(run_paths::eval_dir(cfg.out)) / "report.txt").string());
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "xdecomp " << command << ": " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "xdecomp " << command << ": internal error: " << e.what() << '\n';
    return 3;
  }
}
