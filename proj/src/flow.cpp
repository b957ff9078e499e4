#include "mftlab/flow.hpp"

#include "mftlab/attention.hpp"

#include <cmath>

namespace mftlab {

DepthParameterization DepthParameterization::from_heads(std::vector<std::vector<AttentionParams>> heads) {
  DepthParameterization rho;
  rho.layers.reserve(heads.size());
  for (auto& layer : heads) rho.layers.push_back(HeadEnsemble::uniform(std::move(layer)));
  return rho;
}

void DepthParameterization::validate() const {
  if (layers.empty()) throw InvalidInputError("parameterization has no layers");
  const Index H = layers.front().size();
  const Index d = layers.front().dim();
  for (const auto& layer : layers) {
    layer.validate();
    if (layer.size() != H) throw DimensionError("layers have different head counts");
    if (layer.dim() != d) throw DimensionError("layers have different dimensions");
    for (double w : layer.weights)
      if (std::abs(w - 1.0 / static_cast<double>(H)) > 1e-15)
        throw InvalidInputError("depth parameterization requires equal head weights");
  }
}

void Sample::validate() const {
  cloud.validate();
  if (input.size() != cloud.dim() || target.size() != cloud.dim())
    throw DimensionError("sample input/target dimension differs from its cloud");
  require_finite(input, "sample input");
  require_finite(target, "sample target");
}

namespace {

Mat field_at(const HeadEnsemble& ensemble, const Mat& tokens, const Vec& weights) {
  return detail::coupled_field_unchecked(ensemble, tokens, weights);
}

Mat step_tokens(const HeadEnsemble& ensemble, const Mat& x, const Vec& w, double h, Integrator integrator) {
  if (integrator == Integrator::euler) return x + h * field_at(ensemble, x, w);
  const Mat k1 = field_at(ensemble, x, w);
  const Mat k2 = field_at(ensemble, x + 0.5 * h * k1, w);
  const Mat k3 = field_at(ensemble, x + 0.5 * h * k2, w);
  const Mat k4 = field_at(ensemble, x + h * k3, w);
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

}  // namespace

CoupledState forward_step(const HeadEnsemble& ensemble, const CoupledState& state, double h,
                          Integrator integrator) {
  if (!(h > 0.0)) throw InvalidInputError("step size must be positive");
  ensemble.validate();
  state.validate();
  if (ensemble.dim() != state.dim()) throw DimensionError("ensemble and state dimensions differ");
  CoupledState next = state;
  next.set_tokens(step_tokens(ensemble, state.tokens(), state.context.weights, h, integrator));
  if (!next.is_finite()) throw DivergenceError("forward_step", "non-finite token position");
  return next;
}

Trajectory forward_trajectory(const DepthParameterization& rho, const Sample& sample, Integrator integrator) {
  rho.validate();
  sample.validate();
  if (rho.dim() != sample.cloud.dim()) throw DimensionError("parameterization and sample dimensions differ");
  const double h = rho.step();
  const Vec& w = sample.cloud.weights;
  Trajectory traj;
  traj.states.reserve(rho.layers.size() + 1);
  traj.states.push_back(sample.initial_state());
  Mat x = traj.states.front().tokens();
  for (Index l = 0; l < rho.num_layers(); ++l) {
    x = step_tokens(rho.layers[l], x, w, h, integrator);
    if (!x.allFinite())
      throw DivergenceError("forward_trajectory", "non-finite token position at layer " + std::to_string(l));
    CoupledState s = traj.states.back();
    s.set_tokens(x);
    traj.states.push_back(std::move(s));
  }
  return traj;
}

double cot_distance(const DepthParameterization& a, const DepthParameterization& b) {
  if (a.num_layers() != b.num_layers() || a.num_heads() != b.num_heads())
    throw DimensionError("cot_distance requires equal layer and head counts");
  double total = 0.0;
  for (Index l = 0; l < a.num_layers(); ++l) {
    double layer = 0.0;
    for (Index h = 0; h < a.num_heads(); ++h) {
      const auto& x = a.head(l, h);
      const auto& y = b.head(l, h);
      if (x.dim() != y.dim()) throw DimensionError("cot_distance head dimensions differ");
      layer += squared_distance(x, y);
    }
    total += layer / static_cast<double>(a.num_heads());
  }
  return std::sqrt(total / static_cast<double>(a.num_layers()));
}

double second_moment(const DepthParameterization& rho) {
  double total = 0.0;
  for (const auto& layer : rho.layers) {
    double s = 0.0;
    for (const auto& head : layer.heads) s += head.squared_norm();
    total += s / static_cast<double>(layer.size());
  }
  return total / static_cast<double>(rho.num_layers());
}

DepthParameterization refine_depth(const DepthParameterization& rho, Index factor) {
  if (factor < 1) throw InvalidInputError("refinement factor must be >= 1");
  DepthParameterization out;
  out.layers.reserve(rho.layers.size() * static_cast<std::size_t>(factor));
  for (const auto& layer : rho.layers)
    for (Index r = 0; r < factor; ++r) out.layers.push_back(layer);
  return out;
}

std::vector<double> mean_value_opnorms(const DepthParameterization& rho) {
  std::vector<double> out;
  for (const auto& layer : rho.layers) {
    double s = 0.0;
    for (const auto& head : layer.heads) {
      Eigen::JacobiSVD<Mat> svd(head.V);
      s += svd.singularValues().size() > 0 ? svd.singularValues()(0) : 0.0;
    }
    out.push_back(s / static_cast<double>(layer.size()));
  }
  return out;
}

}  // namespace mftlab
