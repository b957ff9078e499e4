#pragma once

// Neural tangent kernels of the attention layers on finite token sets.
//
// Tokens of all samples are stacked sample-major (query first, then context)
// into n_total = sum_j (n_j + 1) slots. Adjoint directions are identified
// with stacked Euclidean vectors, so lambda values are eigenvalues of plain
// symmetric matrices; non-uniform cloud weights do not enter the norm.

#include "mftlab/flow.hpp"

#include <span>

namespace mftlab {

/// Softmax mean of the pushed context seen from one pushed token at the
/// given depth node (the V-linear feature of the head).
Vec v_feature(const AttentionParams& head, const Trajectory& trajectory, Index layer, Index token);

/// K1[(j,i),(j',i')] = (1/H) sum_h <M_h^j(x_i), M_h^j'(x_i')>.
/// The vector-adjoint form of the V-part kernel is K1 (x) I_d.
Mat ntk_v_matrix(const DepthParameterization& rho, std::span<const Trajectory> trajectories, Index layer);

/// Gram matrix of m -> D_theta A^* m over the n_total * d canonical adjoint
/// directions (index = slot * d + coordinate), averaged over heads.
Mat ntk_full_matrix(const DepthParameterization& rho, std::span<const Trajectory> trajectories, Index layer,
                    Index size_gate = 512);

struct NTKOptions {
  bool full = false;
  Index size_gate = 512;
  bool keep_matrices = true;
};

struct NTKReport {
  Index n_total = 0;
  std::vector<double> depth;
  std::vector<Mat> k1;    // per layer, kept when requested
  std::vector<Mat> full;  // per layer, only when computed
  std::vector<double> lambda_min_v;
  std::vector<double> lambda_max_v;
  std::vector<double> cond_v;
  std::vector<double> lambda_min_full;
  std::vector<double> lambda_max_full;
  std::vector<double> cond_full;
  double lambda0 = 0.0;       // depth average of lambda_min(K1)
  double lambda0_full = 0.0;  // same for K when computed
};

struct SymmetricSpectrum {
  double min = 0.0;
  double max = 0.0;
  double condition = 0.0;  // +inf when min <= 0
};

SymmetricSpectrum symmetric_spectrum(const Mat& m);

NTKReport lambda_min_profile(const DepthParameterization& rho, std::span<const Trajectory> trajectories,
                             const NTKOptions& options = {});

std::vector<Trajectory> forward_all(const DepthParameterization& rho, const Dataset& dataset);

struct PerturbationResult {
  double delta = 0.0;
  double lambda0 = 0.0;
  double lambda0_perturbed = 0.0;
  double abs_change = 0.0;
  double cot_distance = 0.0;
  double ratio = 0.0;  // abs_change / cot_distance, 0 when delta = 0
};

/// Moves every head by independent Gaussian noise of scale delta and
/// reports the change of lambda_0 against the displacement.
PerturbationResult ntk_perturbation_test(const DepthParameterization& rho, const Dataset& dataset, double delta,
                                         std::uint64_t seed);

}  // namespace mftlab
