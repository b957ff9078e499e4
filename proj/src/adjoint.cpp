#include "mftlab/adjoint.hpp"

#include "mftlab/attention.hpp"

#include <cmath>

namespace mftlab {

bool GradientField::is_finite() const {
  for (const auto& layer : blocks)
    for (const auto& g : layer)
      if (!g.is_finite()) return false;
  return true;
}

namespace {

void check_dataset(const DepthParameterization& rho, const Dataset& dataset) {
  if (dataset.empty()) throw InvalidInputError("dataset is empty");
  for (const auto& s : dataset) {
    s.validate();
    if (s.cloud.dim() != rho.dim()) throw DimensionError("sample dimension differs from parameterization");
  }
}

double sample_loss(const Sample& s, const Trajectory& t) { return 0.5 * (t.output() - s.target).squaredNorm(); }

}  // namespace

double risk(const DepthParameterization& rho, const Dataset& dataset) {
  rho.validate();
  check_dataset(rho, dataset);
  double total = 0.0;
  for (const auto& s : dataset) total += sample_loss(s, forward_trajectory(rho, s));
  const double r = total / static_cast<double>(dataset.size());
  if (!std::isfinite(r)) throw DivergenceError("risk", "non-finite risk");
  return r;
}

Mat terminal_adjoint(const Sample& sample, const Trajectory& trajectory) {
  const auto& last = trajectory.final_state();
  Mat m = Mat::Zero(last.dim(), last.num_tokens());
  m.col(0) = last.query - sample.target;
  return m;
}

AdjointState backward_adjoint(const DepthParameterization& rho, const Trajectory& trajectory, const Mat& terminal) {
  if (trajectory.num_layers() != rho.num_layers())
    throw InvalidInputError("trajectory has " + std::to_string(trajectory.states.size()) +
                            " nodes, expected " + std::to_string(rho.num_layers() + 1));
  const auto& last = trajectory.final_state();
  if (terminal.rows() != last.dim() || terminal.cols() != last.num_tokens())
    throw DimensionError("terminal adjoint shape does not match the trajectory");
  const double h = rho.step();
  AdjointState adj;
  adj.nodes.resize(trajectory.states.size());
  adj.nodes.back() = terminal;
  for (Index l = rho.num_layers() - 1; l >= 0; --l) {
    const TokenJacobian J(rho.layers[l], trajectory.states[l]);
    const Mat& next = adj.nodes[l + 1];
    const Vec flat = Eigen::Map<const Vec>(next.data(), next.size());
    const Vec prev = flat + h * J.apply_transpose(flat);
    adj.nodes[l] = Eigen::Map<const Mat>(prev.data(), next.rows(), next.cols());
    if (!adj.nodes[l].allFinite())
      throw DivergenceError("backward_adjoint", "non-finite adjoint at layer " + std::to_string(l));
  }
  return adj;
}

AdjointSolution solve_adjoint(const DepthParameterization& rho, const Dataset& dataset) {
  rho.validate();
  check_dataset(rho, dataset);
  AdjointSolution sol;
  sol.trajectories.reserve(dataset.size());
  sol.adjoints.reserve(dataset.size());
  double total = 0.0;
  for (const auto& s : dataset) {
    sol.trajectories.push_back(forward_trajectory(rho, s));
    const auto& t = sol.trajectories.back();
    total += sample_loss(s, t);
    sol.adjoints.push_back(backward_adjoint(rho, t, terminal_adjoint(s, t)));
  }
  sol.risk = total / static_cast<double>(dataset.size());
  if (!std::isfinite(sol.risk)) throw DivergenceError("risk", "non-finite risk");
  return sol;
}

AttentionParams gradient_field_at(const AdjointSolution& solution, Index layer, const AttentionParams& theta) {
  if (solution.trajectories.empty()) throw InvalidInputError("empty adjoint solution");
  if (layer < 0 || layer >= solution.trajectories.front().num_layers())
    throw InvalidInputError("layer index out of range");
  AttentionParams g = AttentionParams::zeros(theta.dim());
  for (std::size_t j = 0; j < solution.trajectories.size(); ++j) {
    const CoupledState& state = solution.trajectories[j].states[layer];
    const Mat& m = solution.adjoints[j].nodes[layer + 1];
    const Mat X = state.tokens();
    const Mat& Y = state.context.points;
    const auto s = detail::head_stats(theta, state.context, X);
    const Mat U = theta.V.transpose() * m;
    Mat T = U.transpose() * Y;
    T.colwise() -= U.cwiseProduct(s.means).colwise().sum().transpose();
    const Mat W = s.probs.cwiseProduct(T);  // row i: C_i u_i = Y W_i^T
    const Mat CU = Y * W.transpose();       // d x (n+1)
    g.V += m * s.means.transpose();
    g.q += CU.rowwise().sum();
    g.Q += CU * X.transpose();
  }
  g *= 1.0 / static_cast<double>(solution.trajectories.size());
  return g;
}

GradientField param_gradient(const DepthParameterization& rho, const AdjointSolution& solution) {
  GradientField field;
  field.blocks.resize(rho.layers.size());
  for (Index l = 0; l < rho.num_layers(); ++l) {
    field.blocks[l].reserve(rho.layers[l].heads.size());
    for (const auto& head : rho.layers[l].heads) field.blocks[l].push_back(gradient_field_at(solution, l, head));
  }
  if (!field.is_finite()) throw DivergenceError("param_gradient", "non-finite gradient field");
  return field;
}

GradientField param_gradient(const DepthParameterization& rho, const Dataset& dataset) {
  return param_gradient(rho, solve_adjoint(rho, dataset));
}

double upper_gradient_norm(const GradientField& field, bool v_only) {
  if (field.blocks.empty()) return 0.0;
  double total = 0.0;
  for (const auto& layer : field.blocks) {
    double s = 0.0;
    for (const auto& g : layer) s += v_only ? g.V.squaredNorm() : g.squared_norm();
    total += s / static_cast<double>(layer.size());
  }
  return std::sqrt(total / static_cast<double>(field.blocks.size()));
}

}  // namespace mftlab
