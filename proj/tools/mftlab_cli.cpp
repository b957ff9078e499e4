#include "mftlab/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kDivergence = 3;
constexpr int kCheckFailure = 4;
constexpr int kOtherError = 1;

std::filesystem::path default_out_dir(const mftlab::ExperimentConfig& config) {
  if (config.output_dir) return *config.output_dir;
  if (const char* env = std::getenv("MFTLAB_OUT_DIR"); env && *env) return env;
  return "mftlab_out";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mftlab: mean-field attention training laboratory"};
  app.set_version_flag("--version", std::string(mftlab::version_string()));
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  int workers = 1;
  bool verbose = false;
  auto* run_cmd = app.add_subcommand("run", "Run the experiment described by a JSON config");
  run_cmd->add_option("config", config_path, "Experiment config (JSON)")->required();
  run_cmd->add_option("--out", out_dir, "Output directory (default: $MFTLAB_OUT_DIR or ./mftlab_out)");
  run_cmd->add_option("--workers", workers, "Concurrent sweep cells")->check(CLI::PositiveNumber);
  run_cmd->add_flag("--verbose", verbose, "Progress on stderr");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  mftlab::ExperimentConfig config;
  try {
    config = mftlab::load_config(config_path);
  } catch (const mftlab::ConfigError& e) {
    std::cerr << "config error at " << e.what() << '\n';
    return kConfigError;
  }

  mftlab::RunOptions options;
  options.out_dir = out_dir.empty() ? default_out_dir(config) : std::filesystem::path(out_dir);
  options.workers = workers;
  options.verbose = verbose;
  options.log = &std::cerr;

  try {
    const auto manifest = mftlab::run(config, options);
    if (manifest.status == "diverged") {
      std::cerr << "divergence: " << manifest.message << '\n';
      return kDivergence;
    }
    if (!manifest.checks_passed()) {
      for (const auto& c : manifest.checks)
        if (!c.passed) std::cerr << "check failed: " << c.metric << " = " << c.value.dump() << '\n';
      return kCheckFailure;
    }
    if (verbose) std::cerr << "[mftlab] wrote " << (options.out_dir / "manifest.json").string() << '\n';
    return kOk;
  } catch (const mftlab::DivergenceError& e) {
    std::cerr << "divergence in " << e.what() << '\n';
    return kDivergence;
  } catch (const mftlab::ConfigError& e) {
    std::cerr << "config error at " << e.what() << '\n';
    return kConfigError;
  } catch (const mftlab::InvalidInputError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOtherError;
  }
}
