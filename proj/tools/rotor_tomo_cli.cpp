// rotor_tomo_cli: simulate, reconstruct, gradcheck, presets.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "rotor_tomo/parallel.hpp"
#include "rotor_tomo/rotor_tomo.hpp"

namespace fs = std::filesystem;
using namespace rotor_tomo;

namespace {

enum Exit : int { kOk = 0, kFailedCheck = 1, kIterationCap = 2, kInputError = 3, kNumericalFailure = 4 };

struct Common {
  std::string config;
  std::string preset;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "scenario JSON");
  cmd->add_option("--preset", c.preset, "built-in scenario (fig1, fig2a, fig3, fig4, fig5) instead of --config");
  cmd->add_option("--out", c.out, "output directory; preset trajectory files are read from here")->capture_default_str();
  cmd->add_option("--seed", c.seed, "overrides the noise seed (simulate) or the optimizer seed (reconstruct, gradcheck)");
  cmd->add_option("--threads", c.threads, "worker cap, 0 = machine parallelism");
}

/// The config document plus the directory its relative file names resolve against.
std::pair<json, fs::path> load_document(const Common& c, ConfigUse use, const fs::path& preset_dir) {
  if (c.config.empty() == c.preset.empty()) throw InputError("give exactly one of --config or --preset");
  if (!c.preset.empty()) {
    const Preset& p = find_preset(c.preset);
    return {use == ConfigUse::simulate ? p.simulate : p.reconstruct, preset_dir};
  }
  return {read_json(c.config), fs::path(c.config).parent_path()};
}

int run_simulate(const Common& c) {
  auto [doc, dir] = load_document(c, ConfigUse::simulate, c.out);
  if (c.seed) doc["noise"]["seed"] = *c.seed;
  if (c.seed && !doc["noise"].contains("level")) doc.erase("noise");
  const ScenarioConfig cfg = parse_scenario(doc, ConfigUse::simulate, dir);
  for (const auto& f : write_simulation(cfg, c.out)) std::cout << f.string() << '\n';
  return kOk;
}

int run_reconstruct(const Common& c, const std::string& truth_path) {
  auto [doc, dir] = load_document(c, ConfigUse::reconstruct, c.out);
  if (c.seed) doc["optimizer"]["seed"] = *c.seed;
  const ScenarioConfig cfg = parse_scenario(doc, ConfigUse::reconstruct, dir);
  std::optional<json> truth;
  if (!truth_path.empty()) truth = read_json(truth_path);
  const ReconstructionRun run = run_reconstruction(cfg, c.out, truth);
  std::cout << run.bundle.dump(2) << '\n';
  switch (run.result.trace.status) {
    case RunStatus::converged: return kOk;
    case RunStatus::iteration_cap: return kIterationCap;
    case RunStatus::numerical_failure: return kNumericalFailure;
  }
  return kNumericalFailure;
}

int run_gradcheck(const Common& c, const std::string& block, GradcheckOptions opt) {
  auto [doc, dir] = load_document(c, ConfigUse::reconstruct, c.out);
  const ScenarioConfig cfg = parse_scenario(doc, ConfigUse::reconstruct, dir);
  if (!block.empty() && block != "all") opt.block = parse_block(block);
  opt.seed = c.seed.value_or(cfg.optimizer.seed);
  const auto rows = gradcheck(build_problem(cfg), opt);
  bool ok = true;
  std::printf("%-6s %-6s %12s %14s\n", "block", "status", "components", "rel_error");
  for (const auto& r : rows) {
    if (!r.active) {
      std::printf("%-6s %-6s %12s %14s\n", std::string(to_string(r.block)).c_str(), "n/a", "-", "-");
      continue;
    }
    ok = ok && r.pass;
    std::printf("%-6s %-6s %12lld %14.3e\n", std::string(to_string(r.block)).c_str(), r.pass ? "ok" : "FAIL",
                static_cast<long long>(r.components), r.relative_error);
  }
  std::printf("threshold %.1e: %s\n", opt.tolerance, ok ? "pass" : "fail");
  return ok ? kOk : kFailedCheck;
}

int run_presets(const std::string& name, const std::string& out) {
  if (name.empty()) {
    for (const auto& p : presets()) std::cout << p.name << "  " << p.description << '\n';
    return kOk;
  }
  const Preset& p = find_preset(name);
  fs::create_directories(out);
  write_json(fs::path(out) / (p.name + "_simulate.json"), p.simulate);
  write_json(fs::path(out) / (p.name + "_reconstruct.json"), p.reconstruct);
  std::cout << (fs::path(out) / (p.name + "_simulate.json")).string() << '\n'
            << (fs::path(out) / (p.name + "_reconstruct.json")).string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Laser-kicked rotor simulation and reconstruction"};
  app.require_subcommand(1);

  Common sim_opts, rec_opts, grad_opts;
  auto* sim = app.add_subcommand("simulate", "forward model of a fully known scenario");
  add_common(sim, sim_opts);

  std::string truth_path;
  auto* rec = app.add_subcommand("reconstruct", "fit the unknowns of a scenario to its reference trajectories");
  add_common(rec, rec_opts);
  rec->add_option("--truth", truth_path, "truth JSON from simulate; enables comparison metrics");

  std::string block = "all";
  GradcheckOptions gc;
  auto* grad = app.add_subcommand("gradcheck", "analytic gradient against central differences");
  add_common(grad, grad_opts);
  grad->add_option("--block", block, "a, b, p, P, I, T or all")->capture_default_str();
  grad->add_option("--max-components", gc.max_components, "components checked per block")->capture_default_str();
  grad->add_option("--tolerance", gc.tolerance, "relative error threshold")->capture_default_str();
  grad->add_flag("--corrupt-gradient", gc.corrupt_gradient, "test hook: perturb the analytic gradient");

  std::string preset_name, preset_out = ".";
  auto* pre = app.add_subcommand("presets", "list built-in scenarios, or write one with --name");
  pre->add_option("--name", preset_name, "preset to write");
  pre->add_option("--out", preset_out, "output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInputError;
  }

  try {
    const auto cap = [](unsigned n) {
      if (n > 0) set_max_threads(n);
    };
    if (*sim) return cap(sim_opts.threads), run_simulate(sim_opts);
    if (*rec) return cap(rec_opts.threads), run_reconstruct(rec_opts, truth_path);
    if (*grad) return cap(grad_opts.threads), run_gradcheck(grad_opts, block, gc);
    return run_presets(preset_name, preset_out);
  } catch (const ConfigurationError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kInputError;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInputError;
  } catch (const ConvergenceError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInputError;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInputError;
  }
}
