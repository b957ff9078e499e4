#include "mftlab/trainer.hpp"

#include "mftlab/attention.hpp"
#include "mftlab/ntk.hpp"

#include <cmath>
#include <limits>

namespace mftlab {

namespace {

// Increases below this relative size are attributed to roundoff in the
// residual, not to an overshooting step.
constexpr double kMonotoneSlack = 1e-10;
constexpr double kLossFloor = 1e-28;

bool violates(double candidate, double current) {
  if (!std::isfinite(candidate)) return true;
  if (current <= kLossFloor) return false;
  return candidate - current > kMonotoneSlack * current;
}

DepthParameterization apply_step(const DepthParameterization& rho, const GradientField& field, double eta,
                                 const std::optional<double>& v_clamp) {
  DepthParameterization next = rho;
  for (Index l = 0; l < rho.num_layers(); ++l)
    for (Index h = 0; h < rho.num_heads(); ++h) {
      auto& head = next.head(l, h);
      head -= eta * field.blocks[l][h];
      if (v_clamp) head.V = clamp_value(head.V, *v_clamp);
    }
  return next;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw InvalidInputError("eta must be finite and nonnegative");
  if (steps < 1) throw InvalidInputError("steps must be >= 1");
  if (log_every < 1) throw InvalidInputError("log_every must be >= 1");
  if (lambda_every < 0) throw InvalidInputError("lambda_every must be >= 0");
  if (max_halvings < 0) throw InvalidInputError("max_halvings must be >= 0");
  if (!(init_scale >= 0.0)) throw InvalidInputError("init_scale must be nonnegative");
  if (!(v_perturbation >= 0.0)) throw InvalidInputError("v_perturbation must be nonnegative");
  if (v_clamp && !(*v_clamp > 0.0)) throw InvalidInputError("v_clamp radius must be positive");
}

DepthParameterization init_parameterization(Index L, Index H, Index d, const TrainConfig& config) {
  if (L < 1 || H < 1 || d < 1) throw InvalidInputError("L, H and d must be positive");
  config.validate();
  Rng rng(config.seed);
  std::vector<std::vector<AttentionParams>> heads(static_cast<std::size_t>(L));
  const double v_scale = config.fixup ? config.v_perturbation : config.init_scale;
  for (auto& layer : heads)
    for (Index h = 0; h < H; ++h) {
      AttentionParams p;
      p.Q = rng.normal_mat(d, d, config.init_scale);
      p.q = rng.normal_vec(d, config.init_scale);
      p.V = v_scale > 0.0 ? rng.normal_mat(d, d, v_scale) : Mat::Zero(d, d);
      if (config.v_clamp) p.V = clamp_value(p.V, *config.v_clamp);
      layer.push_back(std::move(p));
    }
  return DepthParameterization::from_heads(std::move(heads));
}

TrainReport train(const DepthParameterization& rho0, const Dataset& dataset, const TrainConfig& config) {
  config.validate();
  rho0.validate();
  TrainReport report;
  DepthParameterization rho = rho0;
  AdjointSolution sol;
  GradientField field;
  try {
    sol = solve_adjoint(rho, dataset);
    field = param_gradient(rho, sol);
  } catch (const DivergenceError& e) {
    report.status = TrainStatus::diverged;
    report.message = e.what();
    report.final_rho = rho;
    return report;
  }

  double eta = config.eta;
  double t = 0.0;
  Index log_count = 0;
  auto log_point = [&](Index step) {
    report.steps.push_back(step);
    report.flow_time.push_back(t);
    report.loss.push_back(sol.risk);
    report.upper_gradient.push_back(upper_gradient_norm(field));
    report.v_only_gradient.push_back(upper_gradient_norm(field, true));
    report.cot_displacement.push_back(cot_distance(rho, rho0));
    report.eta.push_back(eta);
    double lam = std::numeric_limits<double>::quiet_NaN();
    if (config.lambda_every > 0 && log_count % config.lambda_every == 0)
      lam = lambda_min_profile(rho, sol.trajectories).lambda0;
    report.lambda0.push_back(lam);
    ++log_count;
  };
  log_point(0);

  for (Index step = 1; step <= config.steps; ++step) {
    const double grad_norm = upper_gradient_norm(field);
    DepthParameterization candidate;
    AdjointSolution cand_sol;
    bool accepted = false;
    while (!accepted) {
      candidate = apply_step(rho, field, eta, config.v_clamp);
      bool diverged = false;
      try {
        cand_sol = solve_adjoint(candidate, dataset);
      } catch (const DivergenceError&) {
        diverged = true;
      }
      const bool bad = diverged || violates(cand_sol.risk, sol.risk);
      if (!bad) {
        accepted = true;
      } else if (report.halvings < config.max_halvings) {
        eta *= 0.5;
        ++report.halvings;
      } else if (diverged) {
        report.status = TrainStatus::diverged;
        report.message = "non-finite loss at step " + std::to_string(step);
        break;
      } else {
        ++report.violations;
        report.monotone = false;
        accepted = true;
      }
    }
    if (report.status == TrainStatus::diverged) break;

    report.path_length += eta * grad_norm;
    t += eta;
    rho = std::move(candidate);
    sol = std::move(cand_sol);
    try {
      field = param_gradient(rho, sol);
    } catch (const DivergenceError& e) {
      report.status = TrainStatus::diverged;
      report.message = e.what();
      break;
    }
    if (step % config.log_every == 0 || step == config.steps) log_point(step);
  }

  const Index end = presaturation_end(report.loss);
  const RateFit fit = fit_linear_rate(report.flow_time, report.loss, 0, end);
  report.rate = fit.rate;
  report.r_squared = fit.r_squared;
  report.fit_points = fit.points;
  report.final_rho = std::move(rho);
  return report;
}

RateFit fit_linear_rate(std::span<const double> times, std::span<const double> losses, Index begin, Index end) {
  if (times.size() != losses.size()) throw DimensionError("time and loss traces differ in length");
  if (begin < 0 || end > static_cast<Index>(losses.size()) || begin > end)
    throw InvalidInputError("invalid fit window");
  RateFit fit;
  Index stop = end;
  for (Index k = begin; k < end; ++k)
    if (!(losses[k] > 0.0)) {
      fit.saturated = true;
      stop = k;
      break;
    }
  fit.points = stop - begin;
  if (fit.points < 2) return fit;

  double mt = 0.0, my = 0.0;
  for (Index k = begin; k < stop; ++k) {
    mt += times[k];
    my += std::log(losses[k]);
  }
  mt /= static_cast<double>(fit.points);
  my /= static_cast<double>(fit.points);
  double stt = 0.0, sty = 0.0, syy = 0.0;
  for (Index k = begin; k < stop; ++k) {
    const double dt = times[k] - mt;
    const double dy = std::log(losses[k]) - my;
    stt += dt * dt;
    sty += dt * dy;
    syy += dy * dy;
  }
  if (stt <= 0.0) return fit;
  const double slope = sty / stt;
  fit.rate = -slope;
  const double ss_res = syy - slope * sty;
  fit.r_squared = syy > 0.0 ? 1.0 - std::max(ss_res, 0.0) / syy : 1.0;
  return fit;
}

Index presaturation_end(std::span<const double> losses, double floor_ratio) {
  if (losses.empty()) return 0;
  const double floor = floor_ratio * losses.front();
  Index k = 0;
  while (k < static_cast<Index>(losses.size()) && losses[k] > 0.0 && losses[k] > floor) ++k;
  return k;
}

}  // namespace mftlab
