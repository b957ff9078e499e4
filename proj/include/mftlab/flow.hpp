#pragma once

// Depth-discretized token transport: every layer is an equal-weight head
// ensemble and one layer advances all tokens by h = 1/L along the coupled
// attention field.

#include "mftlab/core.hpp"

#include <span>

namespace mftlab {

enum class Integrator { euler, rk4 };

/// L layers of H equal-weight heads; layer l sits at depth (l + 1/2) / L.
struct DepthParameterization {
  std::vector<HeadEnsemble> layers;

  static DepthParameterization from_heads(std::vector<std::vector<AttentionParams>> heads);

  Index num_layers() const { return static_cast<Index>(layers.size()); }
  Index num_heads() const { return layers.empty() ? 0 : layers.front().size(); }
  Index dim() const { return layers.empty() ? 0 : layers.front().dim(); }
  double step() const { return 1.0 / static_cast<double>(num_layers()); }
  double depth_node(Index l) const { return (static_cast<double>(l) + 0.5) * step(); }

  AttentionParams& head(Index l, Index h) { return layers[l].heads[h]; }
  const AttentionParams& head(Index l, Index h) const { return layers[l].heads[h]; }

  void validate() const;
};

struct Sample {
  TokenCloud cloud;
  Vec input;
  Vec target;

  CoupledState initial_state() const { return {input, cloud}; }
  void validate() const;
};

using Dataset = std::vector<Sample>;

/// Token positions at depth nodes 0, 1/L, ..., 1.
struct Trajectory {
  std::vector<CoupledState> states;

  Index num_layers() const { return static_cast<Index>(states.size()) - 1; }
  const CoupledState& final_state() const { return states.back(); }
  const Vec& output() const { return states.back().query; }
};

CoupledState forward_step(const HeadEnsemble& ensemble, const CoupledState& state, double h,
                          Integrator integrator = Integrator::euler);

Trajectory forward_trajectory(const DepthParameterization& rho, const Sample& sample,
                              Integrator integrator = Integrator::euler);

/// Matched-particle bound sqrt((1/L) sum_l (1/H) sum_h |theta_lh - theta'_lh|^2)
/// on the layer-wise W2 distance; exact when the identity matching is optimal.
double cot_distance(const DepthParameterization& a, const DepthParameterization& b);

/// (1/L) sum_l (1/H) sum_h |theta_lh|^2
double second_moment(const DepthParameterization& rho);

/// Repeats every layer `factor` times: same piecewise-constant parameter
/// field in depth, `factor` times finer step.
DepthParameterization refine_depth(const DepthParameterization& rho, Index factor);

/// Per layer: the head average of the operator norm of V.
std::vector<double> mean_value_opnorms(const DepthParameterization& rho);

}  // namespace mftlab
