#pragma once

// Declarative experiments: a JSON config selects a pipeline, the runner
// writes CSV/JSON artifacts plus a manifest with SHA-256 checksums.

#include "mftlab/io.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>

namespace mftlab {

/// Malformed config; path names the offending field, e.g. "train.eta".
class ConfigError : public Error {
 public:
  ConfigError(std::string path, const std::string& what)
      : Error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

enum class ExperimentKind { forward, train, ntk, injectivity, convergence_sweep };

std::string to_string(ExperimentKind kind);

struct DatasetSpec {
  enum class Source { gaussian_iid, inline_samples } source = Source::gaussian_iid;
  std::uint64_t seed = 0;
  double scale = 1.0;
  /// Targets sit at this distance from the initial forward outputs, in a
  /// random direction. A negative value draws targets i.i.d. instead.
  double target_offset = 1e-2;
  bool duplicate_first = false;
  Dataset samples;  // inline source
};

struct SweepSpec {
  std::vector<double> init_scales;
  std::vector<double> target_offsets;
  double converge_ratio = 1e-6;
};

struct WitnessSpec {
  Vec x1;
  Vec x2;
  std::optional<Vec> coefficients;  // empty: use the detected dependence
  WitnessOptions options;
};

struct InjectivitySpec {
  std::vector<ProbePtr> measures;
  IndependenceOptions options;
  bool series = false;
  std::optional<WitnessSpec> witness;
};

struct CheckSpec {
  std::optional<double> min;
  std::optional<double> max;
  std::optional<Json> equals;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::forward;
  Index d = 2, L = 1, H = 1, N = 1;
  std::vector<Index> n;  // context size per sample
  Integrator integrator = Integrator::euler;
  DatasetSpec dataset;
  TrainConfig train;
  NTKOptions ntk;
  InjectivitySpec injectivity;
  SweepSpec sweep;
  std::map<std::string, CheckSpec> checks;
  std::optional<std::string> output_dir;
  Json source;
};

ExperimentConfig parse_config(const Json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Scalar metrics a kind exposes to the checks block.
std::vector<std::string> metric_names(ExperimentKind kind);

struct OutputFile {
  std::string path;  // relative to the output directory
  std::string sha256;
  std::uintmax_t bytes = 0;
};

struct CheckResult {
  std::string metric;
  Json value;
  bool passed = false;
};

struct RunManifest {
  ExperimentKind kind = ExperimentKind::forward;
  Json config;
  std::string version;
  Json seeds;
  double wall_clock_seconds = 0.0;
  std::string status = "ok";  // ok | diverged
  std::string message;
  Json summary;
  std::vector<OutputFile> files;
  std::vector<CheckResult> checks;

  bool checks_passed() const;
  Json to_json() const;
};

struct RunOptions {
  std::filesystem::path out_dir;
  Index workers = 1;
  bool verbose = false;
  std::ostream* log = nullptr;
};

/// Runs the pipeline, writes artifacts and manifest.json into out_dir.
/// Divergence is reported through status "diverged" with partial outputs.
RunManifest run(const ExperimentConfig& config, const RunOptions& options);

/// Builds the sample list; targets of the offset mode use rho's forward
/// outputs.
Dataset build_dataset(const ExperimentConfig& config, const DepthParameterization& rho);

struct SweepCell {
  double init_scale = 0.0;
  double target_offset = 0.0;
  double lambda0 = 0.0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double rate = 0.0;
  double r_squared = 0.0;
  bool converged = false;
  std::string status;  // completed | diverged | error
  std::string message;
};

/// Cells in row-major order (init_scale outer); each cell is independent
/// and errors are recorded per cell.
std::vector<SweepCell> convergence_sweep(const ExperimentConfig& base, Index workers);

void write_sweep_csv(std::ostream& os, std::span<const SweepCell> cells);

ProbePtr parse_measure(const Json& j, const std::string& path);

const char* version_string();

}  // namespace mftlab
