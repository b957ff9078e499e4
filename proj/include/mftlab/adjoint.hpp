#pragma once

// Discrete adjoint of the explicit Euler forward pass and the gradient field
// of the quadratic training risk over head parameters.

#include "mftlab/flow.hpp"

namespace mftlab {

/// Adjoint vectors m_i at depth nodes 0..L; nodes[k] is d x (n+1), column 0
/// for the query.
struct AdjointState {
  std::vector<Mat> nodes;

  const Mat& terminal() const { return nodes.back(); }
  const Mat& initial() const { return nodes.front(); }
};

/// Gradient field sampled at the particles: blocks[l][h] = (gQ, gq, gV).
///
/// Scaling convention: each particle carries mass 1/(L H), so the field is
/// the Euclidean gradient of the discrete risk divided by that mass,
///   blocks[l][h] = L * H * dR/dtheta_lh,
/// which is the sampled value of (1/N) sum_j D_theta A^*(Lambda^j(s_l)) m^j.
struct GradientField {
  std::vector<std::vector<AttentionParams>> blocks;

  Index num_layers() const { return static_cast<Index>(blocks.size()); }
  Index num_heads() const { return blocks.empty() ? 0 : static_cast<Index>(blocks.front().size()); }
  bool is_finite() const;
};

/// (1/N) sum_j 1/2 |x^j(1) - y^j|^2
double risk(const DepthParameterization& rho, const Dataset& dataset);

/// Quadratic loss gradient on the query token, zero on context tokens.
/// Single injection site for other smooth per-sample losses.
Mat terminal_adjoint(const Sample& sample, const Trajectory& trajectory);

/// m(s_l) = m(s_{l+1}) + h J(x(s_l))^T m(s_{l+1}), with J the token
/// Jacobian at the pre-step state of layer l.
AdjointState backward_adjoint(const DepthParameterization& rho, const Trajectory& trajectory,
                              const Mat& terminal);

/// Forward trajectories and adjoints of a whole dataset at one
/// parameterization; reusable for gradient evaluation at arbitrary theta.
struct AdjointSolution {
  std::vector<Trajectory> trajectories;
  std::vector<AdjointState> adjoints;
  double risk = 0.0;
};

AdjointSolution solve_adjoint(const DepthParameterization& rho, const Dataset& dataset);

/// (1/N) sum_j sum_i D_theta phi_theta[mu^j(s_l)](x_i^j(s_l))^* m_i^j(s_{l+1})
/// at any theta, not only at the particles of layer l.
AttentionParams gradient_field_at(const AdjointSolution& solution, Index layer, const AttentionParams& theta);

GradientField param_gradient(const DepthParameterization& rho, const Dataset& dataset);
GradientField param_gradient(const DepthParameterization& rho, const AdjointSolution& solution);

/// sqrt((1/L) sum_l (1/H) sum_h |g_lh|^2); with v_only the norm uses gV only.
double upper_gradient_norm(const GradientField& field, bool v_only = false);

}  // namespace mftlab
