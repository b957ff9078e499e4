#include "mftlab/injectivity.hpp"

#include "../support/oracles.hpp"

#include <gtest/gtest.h>

using namespace mftlab;

namespace {

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

TokenCloud cloud_of(std::initializer_list<Vec> pts) {
  Mat m(2, static_cast<Index>(pts.size()));
  Index k = 0;
  for (const auto& p : pts) m.col(k++) = p;
  return TokenCloud::uniform(m);
}

std::vector<ProbePtr> all_variants() {
  Rng rng(99);
  const auto base = ProbeMeasure::discrete(oracle::random_cloud(rng, 2, 4));
  return {base,
          ProbeMeasure::dirac(vec2(0.3, -1.0)),
          ProbeMeasure::uniform_cube(1.5, 2),
          ProbeMeasure::laplace(Mat::Identity(2, 2)),
          ProbeMeasure::mixture(1.0, vec2(0.6, 0.8), 0.5 * Mat::Identity(2, 2)),
          ProbeMeasure::convolve(base, ProbeMeasure::uniform_cube(0.5, 2)),
          ProbeMeasure::translate(base, vec2(1.0, 2.0)),
          ProbeMeasure::gaussian_smooth(base, 0.3 * Mat::Identity(2, 2))};
}

/// Independent rank oracle: smallest singular value of the column-normalized
/// cumulant matrix after projecting out span{1, q}.
double weak_sigma_oracle(const std::vector<ProbePtr>& ms, const Mat& grid) {
  const Index M = grid.cols();
  Mat affine(M, grid.rows() + 1);
  affine.col(0).setOnes();
  affine.rightCols(grid.rows()) = grid.transpose();
  const Eigen::HouseholderQR<Mat> qr(affine);
  const Mat basis = qr.householderQ() * Mat::Identity(M, affine.cols());
  Mat G(M, static_cast<Index>(ms.size()));
  for (std::size_t j = 0; j < ms.size(); ++j) {
    for (Index k = 0; k < M; ++k) G(k, static_cast<Index>(j)) = cumulant(*ms[j], grid.col(k));
    G.col(static_cast<Index>(j)).normalize();
  }
  const Mat P = G - basis * (basis.transpose() * G);
  return Eigen::JacobiSVD<Mat>(P).singularValues().minCoeff();
}

}  // namespace

TEST(Cumulant, NormalizationAtZero) {
  for (const auto& m : all_variants()) EXPECT_NEAR(cumulant(*m, Vec::Zero(2)), 0.0, 1e-13) << m->name();
}

TEST(Cumulant, ConvolutionAdditivityAndTranslation) {
  Rng rng(1);
  const auto a = ProbeMeasure::discrete(oracle::random_cloud(rng, 2, 3));
  const auto b = ProbeMeasure::mixture(0.7, vec2(1.0, 0.0), 0.2 * Mat::Identity(2, 2));
  const auto conv = ProbeMeasure::convolve(a, b);
  const Vec shift = vec2(0.4, -1.1);
  const auto tr = ProbeMeasure::translate(a, shift);
  for (int k = 0; k < 50; ++k) {
    const Vec q = rng.normal_vec(2);
    EXPECT_NEAR(cumulant(*conv, q), cumulant(*a, q) + cumulant(*b, q), 1e-12);
    EXPECT_NEAR(cumulant(*tr, q), cumulant(*a, q) - q.dot(shift), 1e-12);
  }
}

TEST(Cumulant, UniformCubeMatchesQuadrature) {
  const double a = 1.3;
  const auto cube = ProbeMeasure::uniform_cube(a, 2);
  const Vec e = vec2(0.6, 0.8);
  for (double t : {1e-3, 0.05, 0.3, 1.0}) {
    double mgf = 1.0;
    for (Index i = 0; i < 2; ++i)
      mgf *= oracle::gauss_legendre([&](double y) { return std::exp(t * e(i) * y); }, -a, a) / (2 * a);
    const double expected = std::log(mgf);
    EXPECT_LE(std::abs(directional_cumulant(*cube, e, t) - expected), 1e-8 * std::abs(expected)) << t;
  }
}

TEST(Cumulant, DiscreteMatchesDirectLogSum) {
  Rng rng(2);
  const auto c = oracle::random_cloud(rng, 2, 5);
  const auto m = ProbeMeasure::discrete(c);
  const Vec q = rng.normal_vec(2);
  const auto o = oracle::direct_moments(Mat::Zero(2, 2), q, c, Vec::Zero(2));
  EXPECT_NEAR(cumulant(*m, q), std::log(static_cast<double>(o.normalization)), 1e-14);
}

TEST(Cumulant, ConvexAlongDirections) {
  Rng rng(3);
  for (const auto& m : all_variants()) {
    const Vec e = rng.unit_vec(2);
    const double r = std::min(3.0, 0.9 * mgf_radius(*m, e));
    const int n = 60;
    std::vector<double> g;
    for (int k = 0; k <= n; ++k) g.push_back(directional_cumulant(*m, e, -r + 2 * r * k / n));
    for (int k = 1; k < n; ++k) EXPECT_GE(g[k - 1] - 2 * g[k] + g[k + 1], -1e-10) << m->name();
  }
}

TEST(Cumulant, LaplaceDomain) {
  const auto lap = ProbeMeasure::laplace(2.0 * Mat::Identity(2, 2));
  const Vec e = vec2(1.0, 0.0);
  const double r = mgf_radius(*lap, e);
  EXPECT_NEAR(r, 1.0, 1e-14);
  EXPECT_NEAR(directional_cumulant(*lap, e, 0.5), -std::log(1 - 0.25), 1e-14);
  EXPECT_THROW(directional_cumulant(*lap, e, 1.01), DomainError);
  EXPECT_TRUE(std::isinf(mgf_radius(*ProbeMeasure::uniform_cube(1.0, 2), e)));
}

TEST(ProbeMeasureFactory, RejectsInvalidParameters) {
  EXPECT_THROW(ProbeMeasure::uniform_cube(-1.0, 2), InvalidInputError);
  Mat bad = Mat::Identity(2, 2);
  bad(1, 1) = -1.0;
  EXPECT_THROW(ProbeMeasure::laplace(bad), InvalidInputError);
  EXPECT_THROW(ProbeMeasure::convolve(ProbeMeasure::dirac(vec2(0, 0)), ProbeMeasure::uniform_cube(1.0, 3)),
               DimensionError);
  ProbePtr deep = ProbeMeasure::dirac(vec2(0, 0));
  for (int k = 0; k < ProbeMeasure::kMaxDepth - 1; ++k) deep = ProbeMeasure::translate(deep, vec2(1, 0));
  EXPECT_THROW(ProbeMeasure::translate(deep, vec2(1, 0)), InvalidInputError);
}

TEST(SpecialFunctions, StableAndSeries) {
  EXPECT_NEAR(log_sinhc(1000.0), 1000.0 - std::log(2000.0), 1e-12);
  EXPECT_NEAR(log_cosh(-800.0), 800.0 - std::log(2.0), 1e-12);
  EXPECT_NEAR(log_sinhc(0.5), std::log(std::sinh(0.5) / 0.5), 1e-15);
  EXPECT_EQ(log_sinhc(0.0), 0.0);
  const auto g = log_sinhc_coefficients(3);
  EXPECT_NEAR(g[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(g[1], -1.0 / 180.0, 1e-16);
  EXPECT_NEAR(g[2], 1.0 / 2835.0, 1e-17);
  const auto b = log_cosh_coefficients(2);
  EXPECT_NEAR(b[0], 0.5, 1e-15);
  EXPECT_NEAR(b[1], -1.0 / 12.0, 1e-15);
  const double u = 0.2;
  double series = 0.0;
  const auto g12 = log_sinhc_coefficients(12);
  for (std::size_t k = 0; k < g12.size(); ++k) series += g12[k] * std::pow(u, 2.0 * (k + 1));
  EXPECT_NEAR(series, log_sinhc(u), 1e-16);
}

TEST(PairwiseDifference, SharedDifferenceFails) {
  const Vec v = vec2(0.3, 0.4);
  const std::vector<TokenCloud> clouds = {cloud_of({vec2(0, 0), v, vec2(2, 1)}),
                                          cloud_of({vec2(5, -1), vec2(5, -1) + v})};
  const auto r = check_pairwise_difference_condition(clouds);
  EXPECT_FALSE(r.passed);
  EXPECT_LT(r.min_gap, 1e-15);
}

TEST(PairwiseDifference, ConvolutionCloudFails) {
  const Vec b = vec2(1.0, 0.3), e = vec2(-0.2, 0.8), z = vec2(0, 0);
  const std::vector<TokenCloud> clouds = {cloud_of({z, b}), cloud_of({z, e}), cloud_of({z, b, e, b + e})};
  EXPECT_FALSE(check_pairwise_difference_condition(clouds).passed);
}

TEST(PairwiseDifference, GaussianCloudsPass) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    std::vector<TokenCloud> clouds;
    for (int j = 0; j < 3; ++j) clouds.push_back(TokenCloud::uniform(rng.normal_mat(2, 4)));
    const auto r = check_pairwise_difference_condition(clouds);
    EXPECT_TRUE(r.passed) << seed;
    EXPECT_GT(r.min_gap, 1e-6) << seed;
  }
}

TEST(Independence, NegativeFamiliesFail) {
  Rng rng(4);
  const auto mu = ProbeMeasure::discrete(oracle::random_cloud(rng, 2, 3));
  const std::vector<std::vector<ProbePtr>> families = {
      {ProbeMeasure::dirac(vec2(0.1, 0.2)), ProbeMeasure::dirac(vec2(-1.0, 0.5))},
      {mu, ProbeMeasure::translate(mu, vec2(0.7, -0.3))},
      {ProbeMeasure::gaussian(vec2(0, 0), Mat::Identity(2, 2)), ProbeMeasure::gaussian(vec2(1, 2), Mat::Identity(2, 2))},
  };
  for (const auto& fam : families) {
    IndependenceOptions opts;
    opts.seed = 7;
    const auto weak = independence_sigma_min(fam, opts);
    EXPECT_FALSE(weak.passed);
    EXPECT_LE(weak.sigma_min, 1e-10);
    opts.mode = IndependenceMode::strong;
    opts.direction = vec2(0.6, 0.8);
    const auto strong = independence_sigma_min(fam, opts);
    EXPECT_FALSE(strong.passed);
    EXPECT_LE(strong.sigma_min, 1e-10);
  }
}

TEST(Independence, TwoCubesPassStrongMode) {
  const std::vector<ProbePtr> fam = {ProbeMeasure::uniform_cube(1.0, 2), ProbeMeasure::uniform_cube(2.0, 2)};
  IndependenceOptions opts;
  opts.mode = IndependenceMode::strong;
  opts.direction = vec2(1.0, 0.0);
  const auto r = independence_sigma_min(fam, opts);
  EXPECT_TRUE(r.passed);
  EXPECT_GE(r.sigma_min, 1e-4);
  EXPECT_EQ(r.grid_points, 41);
}

TEST(Independence, WeakModeMatchesRankOracle) {
  Rng rng(5);
  const std::vector<ProbePtr> fam = {ProbeMeasure::discrete(oracle::random_cloud(rng, 2, 3)),
                                     ProbeMeasure::discrete(oracle::random_cloud(rng, 2, 4)),
                                     ProbeMeasure::mixture(1.0, vec2(1, 0), Mat::Identity(2, 2))};
  const Mat grid = rng.normal_mat(2, 40);
  const auto r = independence_sigma_min_weak(fam, grid);
  EXPECT_NEAR(r.sigma_min, weak_sigma_oracle(fam, grid), 1e-10);
  EXPECT_TRUE(r.passed);
}

TEST(Independence, DependenceCoefficientsOfConvolution) {
  const Vec b = vec2(1.0, 0.3), e = vec2(-0.2, 0.8), z = vec2(0, 0);
  const std::vector<ProbePtr> fam = {ProbeMeasure::discrete(cloud_of({z, b})), ProbeMeasure::discrete(cloud_of({z, e})),
                                     ProbeMeasure::discrete(cloud_of({z, b, e, b + e}))};
  IndependenceOptions opts;
  opts.seed = 3;
  const auto r = independence_sigma_min(fam, opts);
  EXPECT_FALSE(r.passed);
  const Vec c = r.coefficients / r.coefficients(0);
  EXPECT_NEAR(c(1), 1.0, 1e-6);
  EXPECT_NEAR(c(2), -1.0, 1e-6);
}

TEST(Independence, GaussianSmoothingPreservesPass) {
  const Mat S = 0.4 * Mat::Identity(2, 2);
  const std::vector<ProbePtr> plain = {ProbeMeasure::laplace(Mat::Identity(2, 2)),
                                       ProbeMeasure::laplace(2 * Mat::Identity(2, 2)),
                                       ProbeMeasure::laplace(3 * Mat::Identity(2, 2))};
  std::vector<ProbePtr> smooth;
  for (const auto& m : plain) smooth.push_back(ProbeMeasure::gaussian_smooth(m, S));
  const Vec e = vec2(1.0, 0.0);
  EXPECT_TRUE(series_independence_check(plain, e).passed);
  const auto sr = series_independence_check(smooth, e);
  EXPECT_TRUE(sr.passed);
  EXPECT_EQ(sr.start_order, 2);
  IndependenceOptions opts;
  opts.mode = IndependenceMode::strong;
  opts.direction = e;
  EXPECT_TRUE(independence_sigma_min(plain, opts).passed);
  EXPECT_TRUE(independence_sigma_min(smooth, opts).passed);
}

TEST(SeriesCheck, LaplaceFamily) {
  const std::vector<ProbePtr> fam = {ProbeMeasure::laplace(Mat::Identity(2, 2)),
                                     ProbeMeasure::laplace(2 * Mat::Identity(2, 2)),
                                     ProbeMeasure::laplace(3 * Mat::Identity(2, 2))};
  const auto r = series_independence_check(fam, vec2(1.0, 0.0));
  ASSERT_EQ(r.s.size(), 3u);
  EXPECT_NEAR(r.s[0], 0.5, 1e-15);
  EXPECT_NEAR(r.s[1], 1.0, 1e-15);
  EXPECT_NEAR(r.s[2], 1.5, 1e-15);
  for (std::size_t k = 0; k < r.alpha.size(); ++k) EXPECT_NEAR(r.alpha[k], 1.0 / (k + 1.0), 1e-15);
  EXPECT_TRUE(r.distinct);
  EXPECT_TRUE(r.passed);
  EXPECT_NE(r.vandermonde_determinant, 0.0);
}

TEST(SeriesCheck, EqualCubesCollide) {
  const std::vector<ProbePtr> fam = {ProbeMeasure::uniform_cube(1.0, 2), ProbeMeasure::uniform_cube(1.0, 2)};
  const auto r = series_independence_check(fam, vec2(0.6, 0.8));
  EXPECT_FALSE(r.distinct);
  EXPECT_FALSE(r.passed);
}

TEST(SeriesCheck, SmoothedMixturesSkipQuadraticOrder) {
  const Mat I = Mat::Identity(2, 2);
  const std::vector<ProbePtr> fam = {ProbeMeasure::gaussian_smooth(ProbeMeasure::mixture(1.0, vec2(1, 0), I), I),
                                     ProbeMeasure::gaussian_smooth(ProbeMeasure::mixture(2.0, vec2(1, 0), I), I)};
  const auto r = series_independence_check(fam, vec2(1.0, 0.0));
  EXPECT_EQ(r.start_order, 2);
  EXPECT_TRUE(r.passed);
}

TEST(SeriesCheck, MismatchedFamilyThrows) {
  const std::vector<ProbePtr> fam = {ProbeMeasure::uniform_cube(1.0, 2), ProbeMeasure::laplace(Mat::Identity(2, 2))};
  EXPECT_THROW(series_independence_check(fam, vec2(1.0, 0.0)), InvalidInputError);
}

TEST(SoftmaxMaxGap, ClosedForms) {
  const Vec e = vec2(1.0, 0.0);
  EXPECT_EQ(softmax_max_gap(TokenCloud::dirac(vec2(0.3, 0.1)), e, 50.0), 0.0);
  const auto two = cloud_of({vec2(0, 0), vec2(1, 0)});
  // 1 - e^s / (1 + e^s) = 1 / (1 + e^s)
  EXPECT_NEAR(softmax_max_gap(two, e, 20.0), 1.0 / (1.0 + std::exp(20.0)), 1e-20);
  EXPECT_LE(softmax_max_gap(two, e, 20.0), 1e-8);
}

TEST(SoftmaxMaxGap, MonotoneInScale) {
  Rng rng(6);
  for (int k = 0; k < 20; ++k) {
    const auto c = oracle::random_cloud(rng, 2, 5);
    const Vec e = rng.unit_vec(2);
    double prev = std::numeric_limits<double>::infinity();
    for (double s : {0.0, 1.0, 5.0, 10.0, 50.0, 200.0}) {
      const double g = softmax_max_gap(c, e, s);
      EXPECT_GE(g, 0.0);
      EXPECT_LE(g, prev * (1 + 1e-12));
      prev = g;
    }
  }
}

TEST(NullDirectionWitness, ConvolutionConstruction) {
  const Vec b = vec2(1.0, 0.3), e = vec2(-0.2, 0.8), z = vec2(0, 0), x1 = vec2(0.5, -0.7);
  const std::vector<CoupledState> samples = {{x1, cloud_of({z, b})}, {x1, cloud_of({z, e})},
                                             {x1, cloud_of({z, b, e, b + e})}};
  Vec coeffs(3);
  coeffs << 1.0, 1.0, -1.0;
  const auto good = null_direction_witness(samples, x1, z, coeffs);
  EXPECT_LE(good.residual, 1e-8);
  ASSERT_EQ(good.adjoints.size(), 3u);
  EXPECT_EQ(good.x1_index[0], 0);
  EXPECT_EQ(good.x2_index[2], 1);

  Vec fabricated(3);
  fabricated << 1.0, -1.0, 0.0;
  EXPECT_GT(null_direction_witness(samples, x1, z, fabricated).residual, 1e-3);
  EXPECT_EQ(null_direction_witness(samples, x1, z, Vec::Zero(3)).residual, 0.0);
  EXPECT_THROW(null_direction_witness(samples, x1, vec2(9, 9), fabricated), InvalidInputError);
}
