#include "mftlab/adjoint.hpp"
#include "mftlab/attention.hpp"

#include "../support/oracles.hpp"

#include <gtest/gtest.h>

using namespace mftlab;

namespace {

Vec flat(const Mat& m) { return Eigen::Map<const Vec>(m.data(), m.size()); }

/// Risk recomputed from dumped trajectories with an independent accumulation.
double recomputed_risk(const DepthParameterization& rho, const Dataset& ds) {
  long double acc = 0.0L;
  for (const auto& s : ds) {
    const auto traj = forward_trajectory(rho, s);
    const Mat tokens = traj.final_state().tokens();
    for (Index k = 0; k < s.target.size(); ++k) {
      const long double r = static_cast<long double>(tokens(k, 0)) - s.target(k);
      acc += 0.5L * r * r;
    }
  }
  return static_cast<double>(acc / ds.size());
}

Dataset with_targets_at_outputs(const DepthParameterization& rho, Dataset ds) {
  for (auto& s : ds) s.target = forward_trajectory(rho, s).output();
  return ds;
}

}  // namespace

TEST(Risk, ZeroAtOutputs) {
  Rng rng(1);
  const auto rho = oracle::random_rho(rng, 3, 2, 2);
  const auto ds = with_targets_at_outputs(rho, oracle::random_dataset(rng, 2, 2, 3));
  EXPECT_EQ(risk(rho, ds), 0.0);
}

TEST(Risk, FixupIsHalfSquaredOffset) {
  Rng rng(2);
  auto rho = oracle::random_rho(rng, 3, 2, 2);
  for (auto& layer : rho.layers)
    for (auto& h : layer.heads) h.V.setZero();
  auto ds = oracle::random_dataset(rng, 3, 2, 2);
  double expected = 0.0;
  for (auto& s : ds) {
    const Vec u = rng.normal_vec(2);
    s.target = s.input + u;
    expected += 0.5 * u.squaredNorm() / 3.0;
  }
  EXPECT_NEAR(risk(rho, ds), expected, 1e-15);
}

TEST(Risk, MatchesRecomputation) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto rho = oracle::random_rho(rng, 1 + trial % 4, 1 + trial % 3, 2);
    const auto ds = oracle::random_dataset(rng, 1 + trial % 3, 2, 1 + trial % 4);
    EXPECT_LT(oracle::relative_error(risk(rho, ds), recomputed_risk(rho, ds)), 1e-12);
  }
}

TEST(TerminalAdjoint, ClosedForms) {
  Rng rng(4);
  const auto rho = oracle::random_rho(rng, 2, 2, 1);
  Sample s;
  s.cloud = oracle::random_cloud(rng, 1, 3);
  s.input = Vec::Constant(1, 2.0);
  s.target = Vec::Zero(1);
  Trajectory fake;
  fake.states.push_back(s.initial_state());
  const Mat m = terminal_adjoint(s, fake);
  EXPECT_EQ(m(0, 0), 2.0);
  EXPECT_EQ(m.rightCols(3).norm(), 0.0);

  auto ds = with_targets_at_outputs(rho, {s});
  const auto traj = forward_trajectory(rho, ds[0]);
  EXPECT_EQ(terminal_adjoint(ds[0], traj).norm(), 0.0);
}

TEST(BackwardAdjoint, ConstantWhenValueIsZero) {
  Rng rng(5);
  auto rho = oracle::random_rho(rng, 4, 2, 2);
  for (auto& layer : rho.layers)
    for (auto& h : layer.heads) h.V.setZero();
  const auto ds = oracle::random_dataset(rng, 1, 2, 3);
  const auto traj = forward_trajectory(rho, ds[0]);
  const Mat term = rng.normal_mat(2, 4);
  const auto adj = backward_adjoint(rho, traj, term);
  ASSERT_EQ(adj.nodes.size(), 5u);
  for (const auto& m : adj.nodes) EXPECT_EQ((m - term).norm(), 0.0);
}

TEST(BackwardAdjoint, Linearity) {
  Rng rng(6);
  const auto rho = oracle::random_rho(rng, 3, 2, 3);
  const auto ds = oracle::random_dataset(rng, 1, 3, 4);
  const auto traj = forward_trajectory(rho, ds[0]);
  const Mat a = rng.normal_mat(3, 5);
  const Mat b = rng.normal_mat(3, 5);
  const double alpha = 0.7, beta = -1.3;
  const auto ma = backward_adjoint(rho, traj, a);
  const auto mb = backward_adjoint(rho, traj, b);
  const auto mc = backward_adjoint(rho, traj, alpha * a + beta * b);
  for (std::size_t k = 0; k < mc.nodes.size(); ++k) {
    const Mat combo = alpha * ma.nodes[k] + beta * mb.nodes[k];
    EXPECT_LT((mc.nodes[k] - combo).norm(), 1e-12 * (1 + combo.norm()));
  }
}

TEST(BackwardAdjoint, MatchesInputFiniteDifferences) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Index d = 1 + trial % 3;
    const auto rho = oracle::random_rho(rng, 1 + trial % 4, 1 + trial % 3, d);
    const auto ds = oracle::random_dataset(rng, 1, d, 1 + trial % 4);
    const auto traj = forward_trajectory(rho, ds[0]);
    const auto adj = backward_adjoint(rho, traj, terminal_adjoint(ds[0], traj));
    const Vec dir = rng.normal_vec(d * (ds[0].cloud.size() + 1));
    auto loss_at = [&](double t) {
      Sample s = ds[0];
      CoupledState st = s.initial_state();
      st.set_stacked(st.stacked() + t * dir);
      s.input = st.query;
      s.cloud = st.context;
      return Vec::Constant(1, risk(rho, {s}));
    };
    const double fd = oracle::central_difference(loss_at, 1e-5)(0);
    EXPECT_LT(oracle::relative_error(flat(adj.initial()).dot(dir), fd, 1e-8), 1e-6) << "trial " << trial;
  }
}

TEST(ParamGradient, MatchesFiniteDifferencesOfRisk) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const Index d = 1 + trial % 3;
    const Index L = 1 + trial % 4;
    const Index H = 1 + trial % 3;
    const auto rho = oracle::random_rho(rng, L, H, d);
    const auto ds = oracle::random_dataset(rng, 1 + trial % 2, d, 1 + trial % 4);
    const auto field = param_gradient(rho, ds);
    ASSERT_TRUE(field.is_finite());
    for (Index l = 0; l < L; ++l)
      for (Index h = 0; h < H; ++h)
        for (int comp = 0; comp < 3; ++comp)
          for (Index r = 0; r < d; ++r)
            for (Index c = 0; c < (comp == 1 ? 1 : d); ++c) {
              auto eval = [&](double t) {
                DepthParameterization moved = rho;
                oracle::param_entry(moved.head(l, h), comp, r, c) += t;
                return Vec::Constant(1, risk(moved, ds));
              };
              const double fd = static_cast<double>(L * H) * oracle::central_difference(eval, 1e-5)(0);
              AttentionParams g = field.blocks[l][h];
              const double an = oracle::param_entry(g, comp, r, c);
              EXPECT_LE(std::abs(an - fd), std::max(1e-5 * std::max(std::abs(an), std::abs(fd)), 1e-10 * L * H));
            }
  }
}

TEST(ParamGradient, ZeroResidualGivesZeroField) {
  Rng rng(9);
  const auto rho = oracle::random_rho(rng, 2, 3, 2);
  const auto ds = with_targets_at_outputs(rho, oracle::random_dataset(rng, 2, 2, 3));
  EXPECT_EQ(upper_gradient_norm(param_gradient(rho, ds)), 0.0);
}

TEST(ParamGradient, FieldAtParticlesMatchesBlocks) {
  Rng rng(10);
  const auto rho = oracle::random_rho(rng, 2, 2, 2);
  const auto ds = oracle::random_dataset(rng, 2, 2, 3);
  const auto sol = solve_adjoint(rho, ds);
  const auto field = param_gradient(rho, sol);
  const auto g = gradient_field_at(sol, 1, rho.head(1, 1));
  EXPECT_LT(std::sqrt(squared_distance(g, field.blocks[1][1])), 1e-14 * (1 + std::sqrt(g.squared_norm())));
}

TEST(ParamGradient, ChainConsistencyEnergyIdentity) {
  Rng rng(11);
  const auto rho = oracle::random_rho(rng, 3, 2, 2, 0.7);
  const auto ds = oracle::random_dataset(rng, 2, 2, 3);
  const auto field = param_gradient(rho, ds);
  const double g2 = std::pow(upper_gradient_norm(field), 2);
  const double r0 = risk(rho, ds);
  double previous_error = 1.0;
  for (double eta : {1e-4, 1e-5}) {
    DepthParameterization moved = rho;
    for (Index l = 0; l < 3; ++l)
      for (Index h = 0; h < 2; ++h) moved.head(l, h) -= eta * field.blocks[l][h];
    const double secant = (r0 - risk(moved, ds)) / eta;
    const double err = std::abs(secant - g2) / g2;
    EXPECT_LT(err, 0.01);
    EXPECT_LT(err, previous_error);
    previous_error = err;
  }
}

TEST(ParamGradient, CauchySchwarzAlongSmallMoves) {
  Rng rng(12);
  const auto rho = oracle::random_rho(rng, 2, 3, 2);
  const auto ds = oracle::random_dataset(rng, 2, 2, 3);
  const double upper = upper_gradient_norm(param_gradient(rho, ds));
  const double r0 = risk(rho, ds);
  for (int trial = 0; trial < 10; ++trial) {
    DepthParameterization moved = rho;
    for (Index l = 0; l < 2; ++l)
      for (Index h = 0; h < 3; ++h) moved.head(l, h) += 1e-6 * oracle::random_head(rng, 2);
    const double slope = std::abs(risk(moved, ds) - r0) / cot_distance(rho, moved);
    EXPECT_LE(slope, upper * (1 + 1e-3));
  }
}

TEST(ParamGradient, SelfConvergenceInDepth) {
  Rng rng(13);
  const auto rho = oracle::random_rho(rng, 2, 2, 2, 0.5);
  const auto ds = oracle::random_dataset(rng, 1, 2, 3);
  // Field of the refined model, averaged back onto the coarse layer, at the
  // coarse particle.
  auto coarse_field = [&](Index factor) {
    const auto fine = refine_depth(rho, factor);
    const auto sol = solve_adjoint(fine, ds);
    AttentionParams acc = AttentionParams::zeros(2);
    for (Index k = 0; k < factor; ++k) acc += (1.0 / factor) * gradient_field_at(sol, k, rho.head(0, 0));
    return acc;
  };
  const auto g1 = coarse_field(1), g2 = coarse_field(2), g4 = coarse_field(4);
  const double ratio = std::sqrt(squared_distance(g1, g2) / squared_distance(g2, g4));
  EXPECT_GT(ratio, 1.5);
  EXPECT_LT(ratio, 2.5);
}

TEST(UpperGradientNorm, Properties) {
  Rng rng(14);
  GradientField zero;
  zero.blocks.assign(2, std::vector<AttentionParams>(2, AttentionParams::zeros(2)));
  EXPECT_EQ(upper_gradient_norm(zero), 0.0);

  auto rho = oracle::random_rho(rng, 2, 2, 2);
  for (auto& layer : rho.layers)
    for (auto& h : layer.heads) h.V.setZero();
  const auto ds = oracle::random_dataset(rng, 2, 2, 3);
  const auto fix = param_gradient(rho, ds);
  EXPECT_EQ(upper_gradient_norm(fix), upper_gradient_norm(fix, true));

  const auto rnd = param_gradient(oracle::random_rho(rng, 2, 2, 2), ds);
  EXPECT_GT(upper_gradient_norm(rnd), upper_gradient_norm(rnd, true));
}
