#include "mftlab/ntk.hpp"

#include "mftlab/attention.hpp"

#include <cmath>
#include <limits>

namespace mftlab {

namespace {

void check_trajectories(const DepthParameterization& rho, std::span<const Trajectory> trajectories, Index layer) {
  if (trajectories.empty()) throw InvalidInputError("no trajectories");
  for (const auto& t : trajectories) {
    if (t.num_layers() != rho.num_layers()) throw DimensionError("trajectory depth differs from parameterization");
    if (t.states.front().dim() != rho.dim()) throw DimensionError("trajectory dimension differs from parameterization");
  }
  if (layer < 0 || layer > rho.num_layers()) throw InvalidInputError("layer index out of range");
}

Index total_tokens(std::span<const Trajectory> trajectories) {
  Index n = 0;
  for (const auto& t : trajectories) n += t.states.front().num_tokens();
  return n;
}

// Head used at a depth node: the layer's own heads, the last layer's for
// the terminal node.
const HeadEnsemble& layer_heads(const DepthParameterization& rho, Index layer) {
  return rho.layers[static_cast<std::size_t>(std::min(layer, rho.num_layers() - 1))];
}

// d x n_total feature matrix of one head.
Mat head_features(const AttentionParams& head, std::span<const Trajectory> trajectories, Index layer) {
  Mat F(head.dim(), total_tokens(trajectories));
  Index col = 0;
  for (const auto& t : trajectories) {
    const CoupledState& s = t.states[layer];
    const auto stats = detail::head_stats(head, s.context, s.tokens());
    F.middleCols(col, stats.means.cols()) = stats.means;
    col += stats.means.cols();
  }
  return F;
}

}  // namespace

Vec v_feature(const AttentionParams& head, const Trajectory& trajectory, Index layer, Index token) {
  if (layer < 0 || layer >= static_cast<Index>(trajectory.states.size()))
    throw InvalidInputError("layer index out of range");
  const CoupledState& s = trajectory.states[layer];
  if (token < 0 || token >= s.num_tokens()) throw InvalidInputError("token index out of range");
  const Vec x = token == 0 ? s.query : Vec(s.context.points.col(token - 1));
  return moment_maps(head.Q, head.q, s.context, x).mean();
}

Mat ntk_v_matrix(const DepthParameterization& rho, std::span<const Trajectory> trajectories, Index layer) {
  rho.validate();
  check_trajectories(rho, trajectories, layer);
  const auto& heads = layer_heads(rho, layer);
  const Index n = total_tokens(trajectories);
  Mat K = Mat::Zero(n, n);
  for (const auto& head : heads.heads) {
    const Mat F = head_features(head, trajectories, layer);
    K.noalias() += F.transpose() * F;
  }
  K /= static_cast<double>(heads.size());
  return 0.5 * (K + K.transpose());
}

Mat ntk_full_matrix(const DepthParameterization& rho, std::span<const Trajectory> trajectories, Index layer,
                    Index size_gate) {
  rho.validate();
  check_trajectories(rho, trajectories, layer);
  const Index d = rho.dim();
  const Index n = total_tokens(trajectories);
  if (n * d > size_gate)
    throw SizeGateError("full NTK of size " + std::to_string(n * d) + " exceeds the gate " + std::to_string(size_gate));
  const auto& heads = layer_heads(rho, layer);
  const Index P = 2 * d * d + d;
  Mat K = Mat::Zero(n * d, n * d);
  Mat Phi(P, n * d);
  for (const auto& head : heads.heads) {
    Index slot = 0;
    for (const auto& t : trajectories) {
      const CoupledState& s = t.states[layer];
      const Mat X = s.tokens();
      for (Index i = 0; i < X.cols(); ++i, ++slot) {
        const ThetaDerivative D(head, s.context, X.col(i));
        for (Index c = 0; c < d; ++c) {
          const AttentionParams g = D.adjoint(Vec::Unit(d, c));
          auto col = Phi.col(slot * d + c);
          col.head(d * d) = Eigen::Map<const Vec>(g.Q.data(), d * d);
          col.segment(d * d, d) = g.q;
          col.tail(d * d) = Eigen::Map<const Vec>(g.V.data(), d * d);
        }
      }
    }
    K.noalias() += Phi.transpose() * Phi;
  }
  K /= static_cast<double>(heads.size());
  return 0.5 * (K + K.transpose());
}

SymmetricSpectrum symmetric_spectrum(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw Error("symmetric eigensolver failed");
  SymmetricSpectrum s;
  s.min = es.eigenvalues()(0);
  s.max = es.eigenvalues()(es.eigenvalues().size() - 1);
  s.condition = s.min > 0.0 ? s.max / s.min : std::numeric_limits<double>::infinity();
  return s;
}

NTKReport lambda_min_profile(const DepthParameterization& rho, std::span<const Trajectory> trajectories,
                             const NTKOptions& options) {
  rho.validate();
  check_trajectories(rho, trajectories, 0);
  NTKReport r;
  r.n_total = total_tokens(trajectories);
  const bool full = options.full && r.n_total * rho.dim() <= options.size_gate;
  for (Index l = 0; l < rho.num_layers(); ++l) {
    r.depth.push_back(rho.depth_node(l));
    Mat k1 = ntk_v_matrix(rho, trajectories, l);
    const auto sv = symmetric_spectrum(k1);
    r.lambda_min_v.push_back(sv.min);
    r.lambda_max_v.push_back(sv.max);
    r.cond_v.push_back(sv.condition);
    r.lambda0 += sv.min;
    if (options.keep_matrices) r.k1.push_back(std::move(k1));
    if (full) {
      Mat k = ntk_full_matrix(rho, trajectories, l, options.size_gate);
      const auto sf = symmetric_spectrum(k);
      r.lambda_min_full.push_back(sf.min);
      r.lambda_max_full.push_back(sf.max);
      r.cond_full.push_back(sf.condition);
      r.lambda0_full += sf.min;
      if (options.keep_matrices) r.full.push_back(std::move(k));
    }
  }
  r.lambda0 /= static_cast<double>(rho.num_layers());
  if (full) r.lambda0_full /= static_cast<double>(rho.num_layers());
  return r;
}

std::vector<Trajectory> forward_all(const DepthParameterization& rho, const Dataset& dataset) {
  std::vector<Trajectory> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) out.push_back(forward_trajectory(rho, s));
  return out;
}

PerturbationResult ntk_perturbation_test(const DepthParameterization& rho, const Dataset& dataset, double delta,
                                         std::uint64_t seed) {
  if (!(delta >= 0.0)) throw InvalidInputError("delta must be nonnegative");
  const NTKOptions opts{false, 0, false};
  PerturbationResult r;
  r.delta = delta;
  r.lambda0 = lambda_min_profile(rho, forward_all(rho, dataset), opts).lambda0;
  DepthParameterization moved = rho;
  Rng rng(seed);
  const Index d = rho.dim();
  for (auto& layer : moved.layers)
    for (auto& head : layer.heads) {
      head.Q += rng.normal_mat(d, d, delta);
      head.q += rng.normal_vec(d, delta);
      head.V += rng.normal_mat(d, d, delta);
    }
  r.lambda0_perturbed = lambda_min_profile(moved, forward_all(moved, dataset), opts).lambda0;
  r.abs_change = std::abs(r.lambda0_perturbed - r.lambda0);
  r.cot_distance = cot_distance(rho, moved);
  r.ratio = r.cot_distance > 0.0 ? r.abs_change / r.cot_distance : 0.0;
  return r;
}

}  // namespace mftlab
