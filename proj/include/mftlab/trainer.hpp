#pragma once

// Particle-transport gradient flow: every head moves along minus the
// gradient field, theta_lh <- theta_lh - eta * grad L[rho](s_l, theta_lh).

#include "mftlab/adjoint.hpp"

#include <optional>
#include <string>

namespace mftlab {

struct TrainConfig {
  double eta = 0.1;
  Index steps = 100;
  bool fixup = true;
  double init_scale = 1.0;
  /// Gaussian scale of V when fixup is on (0 keeps V = 0 exactly).
  double v_perturbation = 0.0;
  std::optional<double> v_clamp;
  std::uint64_t seed = 0;
  Index log_every = 1;
  /// Evaluate lambda_0 every this many log points; 0 disables.
  Index lambda_every = 0;
  Index max_halvings = 3;

  void validate() const;
};

enum class TrainStatus { completed, diverged };

struct TrainReport {
  std::vector<Index> steps;
  std::vector<double> flow_time;
  std::vector<double> loss;
  std::vector<double> upper_gradient;
  std::vector<double> v_only_gradient;
  std::vector<double> cot_displacement;
  std::vector<double> eta;
  /// lambda_0 at log points where it was evaluated, NaN elsewhere.
  std::vector<double> lambda0;

  double rate = 0.0;
  double r_squared = 0.0;
  Index fit_points = 0;
  bool monotone = true;
  Index halvings = 0;
  Index violations = 0;
  double path_length = 0.0;  // eta * sum of upper-gradient norms
  TrainStatus status = TrainStatus::completed;
  std::string message;
  DepthParameterization final_rho;
};

/// fixup: V = 0 (plus optional v_perturbation), Q and q centered Gaussian
/// with standard deviation init_scale; otherwise V is drawn the same way.
DepthParameterization init_parameterization(Index L, Index H, Index d, const TrainConfig& config);

TrainReport train(const DepthParameterization& rho0, const Dataset& dataset, const TrainConfig& config);

struct RateFit {
  double rate = 0.0;
  double r_squared = 0.0;
  Index points = 0;
  bool saturated = false;
};

/// Least-squares slope of log(loss) against flow time on [begin, end);
/// rate is minus the slope. A nonpositive loss in the window marks the fit
/// saturated and truncates the window there.
RateFit fit_linear_rate(std::span<const double> times, std::span<const double> losses, Index begin, Index end);

/// Prefix of the trace whose losses exceed floor_ratio * loss[0] (and are
/// positive); the window used for rate fitting.
Index presaturation_end(std::span<const double> losses, double floor_ratio = 1e-12);

}  // namespace mftlab
