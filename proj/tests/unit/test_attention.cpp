#include "mftlab/attention.hpp"

#include "../support/oracles.hpp"

#include <gtest/gtest.h>

using namespace mftlab;

namespace {

HeadEnsemble random_ensemble(Rng& rng, Index d, Index H) {
  std::vector<AttentionParams> heads;
  for (Index h = 0; h < H; ++h) heads.push_back(oracle::random_head(rng, d));
  return HeadEnsemble::uniform(std::move(heads));
}

CoupledState random_state(Rng& rng, Index d, Index n) { return {rng.normal_vec(d), oracle::random_cloud(rng, d, n)}; }

}  // namespace

TEST(MomentMaps, ZeroQueryGivesCloudMean) {
  Rng rng(1);
  const auto c = oracle::random_cloud(rng, 3, 5);
  const auto m = moment_maps(Mat::Zero(3, 3), Vec::Zero(3), c, rng.normal_vec(3));
  EXPECT_NEAR(m.normalization, 1.0, 1e-15);
  EXPECT_LT((m.first_moment - c.mean()).norm(), 1e-14);
}

TEST(MomentMaps, SinglePointCloud) {
  Rng rng(2);
  const Vec y = rng.normal_vec(2);
  const auto m = moment_maps(rng.normal_mat(2, 2), rng.normal_vec(2), TokenCloud::dirac(y), rng.normal_vec(2));
  EXPECT_LT((m.mean() - y).norm(), 1e-15);
}

TEST(MomentMaps, MatchesExtendedPrecisionDirectSum) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = oracle::random_cloud(rng, 2, 3);
    const Mat Q = rng.normal_mat(2, 2);
    const Vec q = rng.normal_vec(2);
    const Vec x = rng.normal_vec(2);
    const auto m = moment_maps(Q, q, c, x);
    const auto o = oracle::direct_moments(Q, q, c, x);
    const double scale = std::exp(m.shift);
    EXPECT_LT(oracle::relative_error(m.normalization * scale, static_cast<double>(o.normalization)), 1e-13);
    Vec om(2);
    om << static_cast<double>(o.first_moment[0]), static_cast<double>(o.first_moment[1]);
    EXPECT_LT(oracle::relative_error(Vec(m.first_moment * scale), om), 1e-13);
  }
}

TEST(MomentMaps, DimensionMismatchThrows) {
  Rng rng(4);
  const auto c = oracle::random_cloud(rng, 2, 3);
  EXPECT_THROW(moment_maps(Mat::Zero(3, 3), Vec::Zero(3), c, Vec::Zero(3)), DimensionError);
  Vec x = Vec::Zero(2);
  x(0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(moment_maps(Mat::Zero(2, 2), Vec::Zero(2), c, x), Error);
}

TEST(SoftmaxWeights, ZeroQueryReturnsCloudWeights) {
  Rng rng(5);
  const auto c = oracle::random_cloud(rng, 3, 4);
  const Vec p = softmax_weights(Mat::Zero(3, 3), Vec::Zero(3), c, rng.normal_vec(3));
  EXPECT_LT((p - c.weights).norm(), 1e-15);
}

TEST(SoftmaxWeights, ConcentratesOnMaximizer) {
  Rng rng(6);
  const auto c = oracle::random_cloud(rng, 2, 5);
  const Vec e = rng.unit_vec(2);
  Index best = 0;
  (c.points.transpose() * e).maxCoeff(&best);
  const Vec p = softmax_weights(Mat::Zero(2, 2), 1e4 * e, c, Vec::Zero(2));
  EXPECT_NEAR(p(best), 1.0, 1e-12);
}

TEST(SoftmaxWeights, MatchesDirectSoftmaxOracle) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = oracle::random_cloud(rng, 3, 6);
    const Mat Q = rng.normal_mat(3, 3);
    const Vec q = rng.normal_vec(3);
    const Vec x = rng.normal_vec(3);
    const Vec p = softmax_weights(Q, q, c, x);
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    EXPECT_GE(p.minCoeff(), 0.0);
    EXPECT_LT((p - oracle::direct_softmax(Q, q, c, x)).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(SoftmaxWeights, ShiftInvariance) {
  Rng rng(8);
  // With Q = 0 the score is <q, y>; adding a constant score is achieved by
  // moving every point along a direction orthogonal to nothing, so instead
  // shift all points by a vector and compensate in the first moment.
  const auto c = oracle::random_cloud(rng, 2, 4);
  const Vec q = rng.normal_vec(2);
  TokenCloud shifted = c;
  const Vec a = rng.normal_vec(2, 10.0);
  shifted.points.colwise() += a;  // every score moves by <q, a>
  const Vec p0 = softmax_weights(Mat::Zero(2, 2), q, c, Vec::Zero(2));
  const Vec p1 = softmax_weights(Mat::Zero(2, 2), q, shifted, Vec::Zero(2));
  EXPECT_LT((p0 - p1).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(SoftmaxWeights, LargeScoresDoNotOverflow) {
  Rng rng(9);
  const auto c = oracle::random_cloud(rng, 2, 4);
  const Vec p = softmax_weights(Mat::Zero(2, 2), Vec::Constant(2, 1e6), c, Vec::Zero(2));
  EXPECT_TRUE(p.allFinite());
  EXPECT_NEAR(p.sum(), 1.0, 1e-12);
}

TEST(AttentionSingle, TrivialCases) {
  Rng rng(10);
  auto head = oracle::random_head(rng, 3);
  const auto c = oracle::random_cloud(rng, 3, 4);
  const Vec x = rng.normal_vec(3);
  AttentionParams zeroV = head;
  zeroV.V.setZero();
  EXPECT_EQ(attention_single(zeroV, c, x).norm(), 0.0);
  const Vec y = rng.normal_vec(3);
  EXPECT_LT((attention_single(head, TokenCloud::dirac(y), x) - head.V * y).norm(), 1e-14);
  AttentionParams flat = head;
  flat.Q.setZero();
  flat.q.setZero();
  EXPECT_LT((attention_single(flat, c, x) - head.V * c.mean()).norm(), 1e-14);
}

TEST(AttentionSingle, ConvexCombinationBound) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto head = oracle::random_head(rng, 3, 2.0);
    const auto c = oracle::random_cloud(rng, 3, 5);
    const Vec out = attention_single(head, c, rng.normal_vec(3));
    const double opnorm = Eigen::JacobiSVD<Mat>(head.V).singularValues()(0);
    EXPECT_LE(out.norm(), opnorm * c.points.colwise().norm().maxCoeff() * (1 + 1e-12));
  }
}

TEST(AttentionMeanfield, EnsembleAverages) {
  Rng rng(12);
  const auto a = oracle::random_head(rng, 2);
  const auto b = oracle::random_head(rng, 2);
  const auto c = oracle::random_cloud(rng, 2, 3);
  const Vec x = rng.normal_vec(2);
  EXPECT_LT((attention_meanfield(HeadEnsemble::uniform({a}), c, x) - attention_single(a, c, x)).norm(), 1e-15);
  EXPECT_LT((attention_meanfield(HeadEnsemble::uniform({a, a, a}), c, x) - attention_single(a, c, x)).norm(), 1e-14);
  const Vec mean = 0.5 * (attention_single(a, c, x) + attention_single(b, c, x));
  EXPECT_LT((attention_meanfield(HeadEnsemble::uniform({a, b}), c, x) - mean).norm(), 1e-15);
  EXPECT_THROW(attention_meanfield(HeadEnsemble{}, c, x), Error);
}

TEST(TokenJacobian, ZeroValueGivesZeroOperator) {
  Rng rng(13);
  auto head = oracle::random_head(rng, 2);
  head.V.setZero();
  const auto state = random_state(rng, 2, 3);
  const TokenJacobian J(HeadEnsemble::uniform({head}), state);
  EXPECT_EQ(J.dense().norm(), 0.0);
}

TEST(TokenJacobian, SingleContextTokenBlockIsV) {
  Rng rng(14);
  const auto head = oracle::random_head(rng, 3);
  const CoupledState state{rng.normal_vec(3), TokenCloud::dirac(rng.normal_vec(3))};
  const Mat J = TokenJacobian(HeadEnsemble::uniform({head}), state).dense();
  // block dF_0 / dx_1
  EXPECT_LT((J.block(0, 3, 3, 3) - head.V).norm(), 1e-14);
}

TEST(TokenJacobian, MatchesFiniteDifferences) {
  Rng rng(15);
  for (int trial = 0; trial < 100; ++trial) {
    const Index d = 1 + trial % 4;
    const Index n = 1 + trial % 6;
    const Index H = 1 + trial % 4;
    const auto ens = random_ensemble(rng, d, H);
    const auto state = random_state(rng, d, n);
    const TokenJacobian J(ens, state);
    const Vec dir = rng.normal_vec(state.stacked().size());
    auto f = [&](double t) {
      CoupledState s = state;
      s.set_stacked(state.stacked() + t * dir);
      const Mat F = coupled_field(ens, s);
      return Vec(Eigen::Map<const Vec>(F.data(), F.size()));
    };
    const Vec fd = oracle::central_difference(f, 1e-5);
    EXPECT_LT(oracle::relative_error(J.apply(dir), fd, 1e-8), 1e-6) << "trial " << trial;
  }
}

TEST(TokenJacobian, TransposeAndMatrixFreeAgree) {
  Rng rng(16);
  const auto ens = random_ensemble(rng, 3, 2);
  const auto state = random_state(rng, 3, 5);
  const TokenJacobian J(ens, state);
  const Mat D = J.dense();
  const Vec u = rng.normal_vec(D.cols());
  const Vec w = rng.normal_vec(D.rows());
  EXPECT_LT((J.apply_matrix_free(u) - D * u).norm(), 1e-12 * (1 + (D * u).norm()));
  EXPECT_LT((J.apply_transpose_matrix_free(w) - D.transpose() * w).norm(), 1e-12 * (1 + (D.transpose() * w).norm()));
  EXPECT_NEAR(w.dot(J.apply(u)), u.dot(J.apply_transpose(w)), 1e-12 * (1 + std::abs(w.dot(D * u))));
}

TEST(TokenJacobian, LargeCloudIsMatrixFree) {
  Rng rng(17);
  const auto ens = random_ensemble(rng, 2, 2);
  const auto state = random_state(rng, 2, TokenJacobian::kDenseLimit + 6);
  const TokenJacobian J(ens, state);
  EXPECT_FALSE(J.is_dense());
  const Vec u = rng.normal_vec(J.size());
  EXPECT_LT((J.apply(u) - J.dense() * u).norm(), 1e-11 * (1 + u.norm()));
}

TEST(DThetaAttention, ZeroValueKillsQueryBlocks) {
  Rng rng(18);
  auto head = oracle::random_head(rng, 3);
  head.V.setZero();
  const auto c = oracle::random_cloud(rng, 3, 4);
  const ThetaDerivative D(head, c, rng.normal_vec(3));
  const auto g = D.adjoint(rng.normal_vec(3));
  EXPECT_EQ(g.Q.norm(), 0.0);
  EXPECT_EQ(g.q.norm(), 0.0);
  EXPECT_GT(g.V.norm(), 0.0);
}

TEST(DThetaAttention, DegenerateSoftmax) {
  Rng rng(19);
  const auto head = oracle::random_head(rng, 2);
  const Vec y = rng.normal_vec(2);
  const ThetaDerivative D(head, TokenCloud::dirac(y), rng.normal_vec(2));
  EXPECT_LT(D.covariance().norm(), 1e-15);
  const Mat dV = rng.normal_mat(2, 2);
  EXPECT_LT((D.apply_V(dV) - dV * y).norm(), 1e-14);
}

TEST(DThetaAttention, MatchesFiniteDifferencesAndDoubleSum) {
  Rng rng(20);
  for (int trial = 0; trial < 100; ++trial) {
    const Index d = 1 + trial % 4;
    const Index n = 1 + trial % 6;
    const auto head = oracle::random_head(rng, d);
    const auto c = oracle::random_cloud(rng, d, n);
    const Vec x = rng.normal_vec(d);
    const ThetaDerivative D(head, c, x);
    AttentionParams t = oracle::random_head(rng, d);
    auto f = [&](double s) { return attention_single(head + s * t, c, x); };
    EXPECT_LT(oracle::relative_error(D.apply(t), oracle::central_difference(f, 1e-5), 1e-8), 1e-6);

    const Vec p = softmax_weights(head.Q, head.q, c, x);
    const Vec dq_double = oracle::double_sum_covariance_apply(head.V, p, c.points, t.q);
    EXPECT_LT(oracle::relative_error(D.apply_q(t.q), dq_double), 1e-12);
    const Vec dQ_double = oracle::double_sum_covariance_apply(head.V, p, c.points, t.Q * x);
    EXPECT_LT(oracle::relative_error(D.apply_Q(t.Q), dQ_double), 1e-12);
  }
}

TEST(DThetaAttention, AdjointIsTranspose) {
  Rng rng(21);
  const auto head = oracle::random_head(rng, 3);
  const auto c = oracle::random_cloud(rng, 3, 5);
  const ThetaDerivative D(head, c, rng.normal_vec(3));
  const AttentionParams t = oracle::random_head(rng, 3);
  const Vec m = rng.normal_vec(3);
  const auto g = D.adjoint(m);
  const double lhs = m.dot(D.apply(t));
  const double rhs = (g.Q.array() * t.Q.array()).sum() + g.q.dot(t.q) + (g.V.array() * t.V.array()).sum();
  EXPECT_NEAR(lhs, rhs, 1e-12 * (1 + std::abs(lhs)));
}

TEST(ClampValue, BoundedAndTangentToIdentity) {
  Rng rng(22);
  const Mat V = rng.normal_mat(3, 3, 10.0);
  EXPECT_LT(clamp_value(V, 2.0).norm(), 2.0);
  const Mat small = rng.normal_mat(3, 3, 1e-4);
  EXPECT_LT((clamp_value(small, 1.0) - small).norm(), 1e-10);
  EXPECT_EQ(clamp_value(Mat::Zero(2, 2), 1.0).norm(), 0.0);
}
