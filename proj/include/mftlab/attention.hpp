#pragma once

// Softmax attention with the key matrix fixed to the identity:
//
//   phi_theta[mu](x) = V * sum_l p_l y_l,   p_l ∝ w_l exp(<Q x + q, y_l>)
//
// plus its exact derivatives with respect to token positions and to the head
// parameters. Every softmax subtracts the maximal score before
// exponentiation.

#include "mftlab/core.hpp"

namespace mftlab {

/// Shift-stabilized exponential moments of a cloud seen from x.
///
/// normalization = sum_l w_l exp(s_l - shift), first_moment = sum_l w_l
/// exp(s_l - shift) y_l, with s_l = <Q x + q, y_l> and shift = max_l s_l
/// over positive-weight points. The unstabilized moments are
/// exp(shift) times these.
struct Moments {
  double normalization = 0.0;
  Vec first_moment;
  double shift = 0.0;

  Vec mean() const { return first_moment / normalization; }
};

Moments moment_maps(const Mat& Q, const Vec& q, const TokenCloud& cloud, const Vec& x);

Vec softmax_weights(const Mat& Q, const Vec& q, const TokenCloud& cloud, const Vec& x);

Vec attention_single(const AttentionParams& head, const TokenCloud& cloud, const Vec& x);

Vec attention_meanfield(const HeadEnsemble& ensemble, const TokenCloud& cloud, const Vec& x);

/// Ensemble field evaluated at every token of a coupled state; the cloud is
/// the context only. Returns d x (n+1), column 0 for the query.
Mat coupled_field(const HeadEnsemble& ensemble, const CoupledState& state);

namespace detail {

/// Softmax statistics of one head for a batch of query points against a
/// fixed cloud. Row i of `probs` is the softmax of query column i.
struct HeadStats {
  Mat probs;      // m x n
  Mat means;      // d x m, softmax means
  Mat query_lin;  // d x m, Q x_i + q
};

HeadStats head_stats(const AttentionParams& head, const TokenCloud& cloud, const Mat& queries);

/// Unchecked kernel behind coupled_field.
Mat coupled_field_unchecked(const HeadEnsemble& ensemble, const Mat& tokens, const Vec& weights);

}  // namespace detail

/// Jacobian of the coupled field F_i = Phi[mu](x_i), i = 0..n, with respect
/// to all token positions, in token-major stacking.
///
/// For one head with softmax rows p_i, means ybar_i, covariances C_i and
/// a_i = Q x_i + q the nonzero blocks are
///   dF_i/dx_i (query role)          V C_i Q
///   dF_i/dx_k (context role, k>=1)  V p_ik (I + (y_k - ybar_i) a_i^T)
/// and a context token's diagonal block is the sum of both roles.
///
/// Dense storage is kept for n <= kDenseLimit; above that the operator is
/// applied matrix-free. Both paths are exact.
class TokenJacobian {
 public:
  static constexpr Index kDenseLimit = 64;

  TokenJacobian(const HeadEnsemble& ensemble, const CoupledState& state);

  Index dim() const { return d_; }
  Index num_tokens() const { return n_ + 1; }
  Index size() const { return d_ * (n_ + 1); }
  bool is_dense() const { return dense_.size() > 0; }

  Vec apply(const Vec& delta) const;
  Vec apply_transpose(const Vec& cotangent) const;

  /// Explicit (n+1)d x (n+1)d matrix, assembled block-wise.
  Mat dense() const;

  Vec apply_matrix_free(const Vec& delta) const;
  Vec apply_transpose_matrix_free(const Vec& cotangent) const;

 private:
  struct Head {
    double weight;
    Mat Q;
    Mat V;
    detail::HeadStats stats;
  };

  Mat assemble() const;

  Index d_ = 0;
  Index n_ = 0;
  Mat context_;  // d x n
  std::vector<Head> heads_;
  Mat dense_;
};

TokenJacobian token_jacobian(const HeadEnsemble& ensemble, const CoupledState& state);

/// Linearization of theta -> phi_theta[mu](x) at a fixed cloud and query:
///   D_V . V' = V' ybar
///   D_q . q' = V C q'
///   D_Q . Q' = V C Q' x
/// where C is the softmax-weighted covariance of the cloud. The adjoint
/// against a cotangent m is (gQ, gq, gV) = (C V^T m x^T, C V^T m, m ybar^T).
class ThetaDerivative {
 public:
  ThetaDerivative(const AttentionParams& head, const TokenCloud& cloud, const Vec& x);

  Vec apply_V(const Mat& dV) const { return dV * mean_; }
  Vec apply_q(const Vec& dq) const { return V_ * (cov_ * dq); }
  Vec apply_Q(const Mat& dQ) const { return V_ * (cov_ * (dQ * x_)); }
  Vec apply(const AttentionParams& tangent) const;

  AttentionParams adjoint(const Vec& cotangent) const;

  const Vec& mean() const { return mean_; }
  const Mat& covariance() const { return cov_; }
  const Vec& weights() const { return probs_; }

 private:
  Vec x_;
  Mat V_;
  Vec probs_;
  Vec mean_;
  Mat cov_;
};

ThetaDerivative d_theta_attention(const AttentionParams& head, const TokenCloud& cloud, const Vec& x);

/// Smooth radial clamp V -> R tanh(|V|/R) V/|V| (Frobenius norm), so that
/// |clamp(V)| < R and clamp(V) = V + O(|V|^3) near zero.
Mat clamp_value(const Mat& V, double radius);

}  // namespace mftlab
