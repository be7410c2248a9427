#include "featspace/iterative.hpp"
#include "featspace/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

namespace fp = featspace::pipeline;

namespace {

enum ExitCode { kOk = 0, kIoFailure = 1, kUsage = 2, kStale = 3, kSolver = 4 };

struct Options {
  std::string config;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
  std::string mode;
  bool dry_run = false;
  bool quiet = false;
};

void add_common(CLI::App *cmd, Options &o) {
  cmd->add_option("--config", o.config, "key=value experiment config");
  cmd->add_option("--out", o.out, "output directory")->capture_default_str();
  cmd->add_option("--seed", o.seed, "override the config seed");
  cmd->add_option("--mode", o.mode, "basis source")->check(CLI::IsMember({"oracle", "navigator"}));
  cmd->add_flag("--dry-run", o.dry_run, "validate the config, print the memory estimate and exit");
  cmd->add_flag("-q,--quiet", o.quiet, "no progress messages");
}

int run(const std::string &stage, const Options &o) {
  featspace::io::KeyValueConfig kv;
  if (!o.config.empty()) kv = featspace::io::KeyValueConfig::load(o.config);
  if (o.seed) kv.set("seed", std::to_string(*o.seed));
  if (!o.mode.empty()) kv.set("basis_mode", o.mode);
  fp::StageOptions opt;
  opt.config = fp::ExperimentConfig::from_kv(kv);
  opt.config.validate();
  opt.out = o.out;
  if (!o.quiet) opt.log = [](const std::string &m) { std::cerr << "featspace: " << m << "\n"; };

  const double gib = opt.config.memory_estimate_bytes() / (1024.0 * 1024.0 * 1024.0);
  if (gib > 4.0) {
    std::fprintf(stderr, "featspace: warning: this configuration needs roughly %.1f GiB of memory\n", gib);
  }
  if (o.dry_run) {
    std::printf("config ok: %d frames, %d spokes, memory estimate %.3f GiB\n", opt.config.phantom.n_frames(),
                opt.config.spokes(), gib);
    return kOk;
  }
  if (stage == "run-all") {
    fp::run_all(opt);
  } else {
    fp::run_stage(stage, opt);
  }
  return kOk;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Feature-space dynamic MRI reconstruction pipeline"};
  app.require_subcommand(1);
  Options o;
  std::vector<std::pair<std::string, CLI::App *>> commands;
  for (const auto &[name, help] : std::vector<std::pair<std::string, std::string>>{
           {"phantom", "generate the ground-truth phantom"},
           {"acquire", "simulate radial multi-coil k-space"},
           {"basis", "extract the temporal basis"},
           {"backproject", "preconditioned backprojection U0"},
           {"recon-admm", "iterative reconstruction"},
           {"train", "simulate a corpus and train the network"},
           {"infer", "apply the trained network to U0"},
           {"eval", "metrics, T1 maps and agreement statistics"},
           {"run-all", "all stages in order"}}) {
    auto *cmd = app.add_subcommand(name, help);
    add_common(cmd, o);
    commands.emplace_back(name, cmd);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  std::string stage;
  for (const auto &[name, cmd] : commands)
    if (cmd->parsed()) stage = name;

  try {
    return run(stage, o);
  } catch (const featspace::StaleInput &e) {
    std::cerr << "featspace: stale input: " << e.what() << "\n";
    return kStale;
  } catch (const featspace::iterative::SolverFailure &e) {
    std::cerr << "featspace: solver failure: " << e.what() << "\n";
    return kSolver;
  } catch (const featspace::InvalidParameter &e) {
    std::cerr << "featspace: configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const featspace::IoError &e) {
    if (!o.config.empty() && !std::filesystem::exists(o.config)) {
      std::cerr << "featspace: " << e.what() << "\n";
      return kUsage;
    }
    std::cerr << "featspace: i/o error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const std::exception &e) {
    std::cerr << "featspace: error: " << e.what() << "\n";
    return kIoFailure;
  }
}
