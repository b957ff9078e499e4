#include "mftlab/attention.hpp"

#include <cmath>
#include <limits>

namespace mftlab {

namespace {

void check_query(const Mat& Q, const Vec& q, const TokenCloud& cloud, const Vec& x) {
  cloud.validate();
  const Index d = cloud.dim();
  if (Q.rows() != d || Q.cols() != d || q.size() != d || x.size() != d)
    throw DimensionError("attention inputs do not share the cloud dimension " + std::to_string(d));
  require_finite(Q, "Q");
  require_finite(q, "q");
  require_finite(x, "query token");
}

// Stabilized softmax of one score row against the cloud weights.
// Returns the shift and writes unnormalized weights into `out`.
double stabilized_row(const Eigen::Ref<const Vec>& scores, const Vec& weights, Eigen::Ref<Vec> out) {
  double shift = -std::numeric_limits<double>::infinity();
  for (Index k = 0; k < scores.size(); ++k)
    if (weights(k) > 0.0 && scores(k) > shift) shift = scores(k);
  for (Index k = 0; k < scores.size(); ++k)
    out(k) = weights(k) > 0.0 ? weights(k) * std::exp(scores(k) - shift) : 0.0;
  return shift;
}

}  // namespace

namespace detail {

HeadStats head_stats(const AttentionParams& head, const TokenCloud& cloud, const Mat& queries) {
  HeadStats s;
  s.query_lin = head.Q * queries;
  s.query_lin.colwise() += head.q;
  const Mat scores = s.query_lin.transpose() * cloud.points;  // m x n
  s.probs.resize(scores.rows(), scores.cols());
  Vec row(scores.cols());
  for (Index i = 0; i < scores.rows(); ++i) {
    stabilized_row(scores.row(i).transpose(), cloud.weights, row);
    s.probs.row(i) = row.transpose() / row.sum();
  }
  s.means = cloud.points * s.probs.transpose();
  return s;
}

Mat coupled_field_unchecked(const HeadEnsemble& ensemble, const Mat& tokens, const Vec& weights) {
  const Index n = tokens.cols() - 1;
  const TokenCloud cloud{tokens.rightCols(n), weights};
  Mat field = Mat::Zero(tokens.rows(), tokens.cols());
  // fixed head order keeps the reduction deterministic
  for (std::size_t h = 0; h < ensemble.heads.size(); ++h) {
    const auto& head = ensemble.heads[h];
    const HeadStats s = head_stats(head, cloud, tokens);
    field.noalias() += ensemble.weights[h] * (head.V * s.means);
  }
  return field;
}

}  // namespace detail

Moments moment_maps(const Mat& Q, const Vec& q, const TokenCloud& cloud, const Vec& x) {
  check_query(Q, q, cloud, x);
  const Vec scores = cloud.points.transpose() * (Q * x + q);
  Vec w(scores.size());
  Moments m;
  m.shift = stabilized_row(scores, cloud.weights, w);
  m.normalization = w.sum();
  m.first_moment = cloud.points * w;
  return m;
}

Vec softmax_weights(const Mat& Q, const Vec& q, const TokenCloud& cloud, const Vec& x) {
  check_query(Q, q, cloud, x);
  const Vec scores = cloud.points.transpose() * (Q * x + q);
  Vec w(scores.size());
  stabilized_row(scores, cloud.weights, w);
  return w / w.sum();
}

Vec attention_single(const AttentionParams& head, const TokenCloud& cloud, const Vec& x) {
  head.validate();
  const Moments m = moment_maps(head.Q, head.q, cloud, x);
  return head.V * m.mean();
}

Vec attention_meanfield(const HeadEnsemble& ensemble, const TokenCloud& cloud, const Vec& x) {
  ensemble.validate();
  Vec out = Vec::Zero(cloud.dim());
  for (std::size_t h = 0; h < ensemble.heads.size(); ++h)
    out += ensemble.weights[h] * attention_single(ensemble.heads[h], cloud, x);
  return out;
}

Mat coupled_field(const HeadEnsemble& ensemble, const CoupledState& state) {
  ensemble.validate();
  state.validate();
  if (ensemble.dim() != state.dim()) throw DimensionError("ensemble and state dimensions differ");
  return detail::coupled_field_unchecked(ensemble, state.tokens(), state.context.weights);
}

TokenJacobian::TokenJacobian(const HeadEnsemble& ensemble, const CoupledState& state)
    : d_(state.dim()), n_(state.context.size()), context_(state.context.points) {
  const Mat tokens = state.tokens();
  heads_.reserve(ensemble.heads.size());
  for (std::size_t h = 0; h < ensemble.heads.size(); ++h) {
    const auto& head = ensemble.heads[h];
    heads_.push_back({ensemble.weights[h], head.Q, head.V,
                      detail::head_stats(head, state.context, tokens)});
  }
  if (n_ <= kDenseLimit) dense_ = assemble();
}

Mat TokenJacobian::assemble() const {
  const Index m = n_ + 1;
  Mat J = Mat::Zero(d_ * m, d_ * m);
  const Mat eye = Mat::Identity(d_, d_);
  for (const auto& h : heads_) {
    const auto& s = h.stats;
    for (Index i = 0; i < m; ++i) {
      const Vec p = s.probs.row(i).transpose();
      const Vec ybar = s.means.col(i);
      const Mat centered = context_.colwise() - ybar;
      const Mat cov = centered * p.asDiagonal() * centered.transpose();
      J.block(i * d_, i * d_, d_, d_) += h.weight * h.V * cov * h.Q;
      for (Index k = 0; k < n_; ++k) {
        const Vec dy = context_.col(k) - ybar;
        J.block(i * d_, (k + 1) * d_, d_, d_) +=
            (h.weight * p(k)) * h.V * (eye + dy * s.query_lin.col(i).transpose());
      }
    }
  }
  return J;
}

Mat TokenJacobian::dense() const { return is_dense() ? dense_ : assemble(); }

Vec TokenJacobian::apply(const Vec& delta) const {
  if (delta.size() != size()) throw DimensionError("token perturbation has wrong length");
  return is_dense() ? Vec(dense_ * delta) : apply_matrix_free(delta);
}

Vec TokenJacobian::apply_transpose(const Vec& cotangent) const {
  if (cotangent.size() != size()) throw DimensionError("token cotangent has wrong length");
  return is_dense() ? Vec(dense_.transpose() * cotangent) : apply_transpose_matrix_free(cotangent);
}

Vec TokenJacobian::apply_matrix_free(const Vec& delta) const {
  const Index m = n_ + 1;
  const Eigen::Map<const Mat> D(delta.data(), d_, m);
  const Mat ctx = D.rightCols(n_);
  Mat out = Mat::Zero(d_, m);
  for (const auto& h : heads_) {
    const auto& s = h.stats;
    // G_ik = <y_k, Q delta_i> + <a_i, delta_k>
    const Mat G = (h.Q * D).transpose() * context_ + s.query_lin.transpose() * ctx;
    const Mat W = s.probs.cwiseProduct(G);
    Mat inner = ctx * s.probs.transpose() + context_ * W.transpose();
    inner -= s.means * W.rowwise().sum().asDiagonal();
    out.noalias() += h.weight * (h.V * inner);
  }
  return Eigen::Map<const Vec>(out.data(), out.size());
}

Vec TokenJacobian::apply_transpose_matrix_free(const Vec& cotangent) const {
  const Index m = n_ + 1;
  const Eigen::Map<const Mat> M(cotangent.data(), d_, m);
  Mat out = Mat::Zero(d_, m);
  for (const auto& h : heads_) {
    const auto& s = h.stats;
    const Mat U = h.V.transpose() * M;  // u_i = V^T m_i
    // T_ik = <y_k - ybar_i, u_i>
    Mat T = U.transpose() * context_;
    T.colwise() -= U.cwiseProduct(s.means).colwise().sum().transpose();
    const Mat W = s.probs.cwiseProduct(T);
    out.noalias() += h.weight * (h.Q.transpose() * (context_ * W.transpose()));
    out.rightCols(n_).noalias() += h.weight * (U * s.probs + s.query_lin * W);
  }
  return Eigen::Map<const Vec>(out.data(), out.size());
}

TokenJacobian token_jacobian(const HeadEnsemble& ensemble, const CoupledState& state) {
  ensemble.validate();
  state.validate();
  if (ensemble.dim() != state.dim()) throw DimensionError("ensemble and state dimensions differ");
  return TokenJacobian(ensemble, state);
}

ThetaDerivative::ThetaDerivative(const AttentionParams& head, const TokenCloud& cloud, const Vec& x)
    : x_(x), V_(head.V) {
  probs_ = softmax_weights(head.Q, head.q, cloud, x);
  mean_ = cloud.points * probs_;
  const Mat centered = cloud.points.colwise() - mean_;
  cov_ = centered * probs_.asDiagonal() * centered.transpose();
}

Vec ThetaDerivative::apply(const AttentionParams& t) const {
  return apply_Q(t.Q) + apply_q(t.q) + apply_V(t.V);
}

AttentionParams ThetaDerivative::adjoint(const Vec& m) const {
  AttentionParams g;
  g.q = cov_ * (V_.transpose() * m);
  g.Q = g.q * x_.transpose();
  g.V = m * mean_.transpose();
  return g;
}

ThetaDerivative d_theta_attention(const AttentionParams& head, const TokenCloud& cloud, const Vec& x) {
  head.validate();
  return ThetaDerivative(head, cloud, x);
}

Mat clamp_value(const Mat& V, double radius) {
  if (!(radius > 0.0)) throw InvalidInputError("clamp radius must be positive");
  const double r = V.norm() / radius;
  // tanh(r)/r, with its series below the cancellation threshold
  const double factor = r < 1e-4 ? 1.0 - r * r / 3.0 : std::tanh(r) / r;
  return factor * V;
}

}  // namespace mftlab
