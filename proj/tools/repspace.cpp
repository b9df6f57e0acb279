#include <iostream>

#include <CLI11.hpp>

#include "repspace/pipeline.hpp"

using namespace repspace;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kDependency = 3, kConfigMismatch = 4 };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"repspace: representation embedding pipeline"};
  std::string stage, config_path;
  bool force = false, print_config = false;
  std::optional<std::size_t> workers;
  std::optional<std::uint64_t> seed;

  std::vector<std::string> choices = stage_names();
  choices.push_back("all");
  app.add_option("stage", stage, "stage to run, or 'all'")->check(CLI::IsMember(choices));
  app.add_option("--config,-c", config_path, "run configuration (JSON)")->required();
  app.add_flag("--force", force, "recompute even if up to date or the configuration changed");
  app.add_option("--workers", workers, "worker threads (overrides REPSPACE_WORKERS)")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "global seed (overrides the config file)");
  app.add_flag("--print-effective-config", print_config, "print the configuration with all defaults and exit");
  CLI11_PARSE(app, argc, argv);

  const std::string scope = "repspace " + (stage.empty() ? std::string("config") : stage);
  try {
    RunConfig cfg = load_config(config_path);
    apply_env_overrides(cfg);
    if (workers) cfg.workers = *workers;
    if (seed) cfg.seed = *seed;
    if (print_config) {
      std::cout << to_json(cfg).dump(2) << "\n";
      return kOk;
    }
    if (stage.empty()) {
      std::cerr << scope << ": error: no stage given\n";
      return kUsage;
    }
    Pipeline p(cfg, hooks_from_env(), &std::cerr);
    if (stage == "all")
      p.run_all(force);
    else
      p.run(stage, force);
    return kOk;
  } catch (const DependencyError& e) {
    std::cerr << scope << ": error: " << e.what() << "\n";
    return kDependency;
  } catch (const ConfigMismatchError& e) {
    std::cerr << scope << ": error: " << e.what() << "\n";
    return kConfigMismatch;
  } catch (const ValidationError& e) {
    std::cerr << scope << ": error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << scope << ": error: " << e.what() << "\n";
    return kFailure;
  }
}
