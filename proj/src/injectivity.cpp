#include "mftlab/injectivity.hpp"

#include "mftlab/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace mftlab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void check_covariance(const Mat& S, Index d, const char* what) {
  if (S.rows() != d || S.cols() != d) throw DimensionError(std::string(what) + " must be d x d");
  if (!S.allFinite()) throw InvalidInputError(std::string(what) + " has non-finite entries");
  const double scale = std::max(1.0, S.norm());
  if ((S - S.transpose()).norm() > 1e-12 * scale) throw InvalidInputError(std::string(what) + " is not symmetric");
  Eigen::SelfAdjointEigenSolver<Mat> es(S, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-12 * scale)
    throw InvalidInputError(std::string(what) + " is not positive semidefinite");
}

void check_unit(const Vec& e, const char* what) {
  if (!e.allFinite() || std::abs(e.norm() - 1.0) > 1e-10) throw InvalidInputError(std::string(what) + " must be a unit vector");
}

double quad(const Mat& S, const Vec& q) { return q.dot(S * q); }

// zeta(2k) by a partial sum with an Euler-Maclaurin tail.
double zeta_even(Index k) {
  const double p = 2.0 * static_cast<double>(k);
  constexpr int n_terms = 1000;
  double s = 0.0;
  for (int n = n_terms - 1; n >= 1; --n) s += std::pow(static_cast<double>(n), -p);
  const double N = n_terms;
  s += std::pow(N, 1.0 - p) / (p - 1.0) + 0.5 * std::pow(N, -p) + p / 12.0 * std::pow(N, -p - 1.0);
  return s;
}

}  // namespace

ProbePtr ProbeMeasure::make(Variant v) {
  auto p = std::shared_ptr<const ProbeMeasure>(new ProbeMeasure(std::move(v)));
  p->validate();
  return p;
}

ProbePtr ProbeMeasure::discrete(TokenCloud cloud) { return make(DiscreteProbe{std::move(cloud)}); }
ProbePtr ProbeMeasure::dirac(const Vec& x) { return make(DiscreteProbe{TokenCloud::dirac(x)}); }
ProbePtr ProbeMeasure::uniform_cube(double radius, Index dim) { return make(UniformCubeProbe{radius, dim}); }
ProbePtr ProbeMeasure::laplace(Mat covariance) { return make(LaplaceProbe{std::move(covariance)}); }
ProbePtr ProbeMeasure::mixture(double offset, Vec direction, Mat covariance) {
  return make(MixtureProbe{offset, std::move(direction), std::move(covariance)});
}
ProbePtr ProbeMeasure::convolve(ProbePtr first, ProbePtr second) {
  return make(ConvolveProbe{std::move(first), std::move(second)});
}
ProbePtr ProbeMeasure::translate(ProbePtr base, Vec shift) { return make(TranslateProbe{std::move(base), std::move(shift)}); }
ProbePtr ProbeMeasure::gaussian_smooth(ProbePtr base, Mat covariance) {
  return make(GaussianSmoothProbe{std::move(base), std::move(covariance)});
}
ProbePtr ProbeMeasure::gaussian(const Vec& mean, Mat covariance) {
  return gaussian_smooth(dirac(mean), std::move(covariance));
}

Index ProbeMeasure::dim() const {
  return std::visit(Overloaded{
                        [](const DiscreteProbe& p) { return p.cloud.dim(); },
                        [](const UniformCubeProbe& p) { return p.dim; },
                        [](const LaplaceProbe& p) { return p.covariance.rows(); },
                        [](const MixtureProbe& p) { return p.direction.size(); },
                        [](const ConvolveProbe& p) { return p.first->dim(); },
                        [](const TranslateProbe& p) { return p.base->dim(); },
                        [](const GaussianSmoothProbe& p) { return p.base->dim(); },
                    },
                    v_);
}

int ProbeMeasure::depth() const {
  return std::visit(Overloaded{
                        [](const ConvolveProbe& p) { return 1 + std::max(p.first->depth(), p.second->depth()); },
                        [](const TranslateProbe& p) { return 1 + p.base->depth(); },
                        [](const GaussianSmoothProbe& p) { return 1 + p.base->depth(); },
                        [](const auto&) { return 1; },
                    },
                    v_);
}

std::string ProbeMeasure::name() const {
  return std::visit(Overloaded{
                        [](const DiscreteProbe& p) { return "discrete(" + std::to_string(p.cloud.size()) + ")"; },
                        [](const UniformCubeProbe& p) { return "uniform_cube(" + std::to_string(p.radius) + ")"; },
                        [](const LaplaceProbe&) { return std::string("laplace"); },
                        [](const MixtureProbe& p) { return "mixture(" + std::to_string(p.offset) + ")"; },
                        [](const ConvolveProbe& p) { return "convolve(" + p.first->name() + "," + p.second->name() + ")"; },
                        [](const TranslateProbe& p) { return "translate(" + p.base->name() + ")"; },
                        [](const GaussianSmoothProbe& p) { return "gaussian_smooth(" + p.base->name() + ")"; },
                    },
                    v_);
}

void ProbeMeasure::validate() const {
  if (depth() > kMaxDepth) throw InvalidInputError("probe measure nesting deeper than 8");
  std::visit(Overloaded{
                 [](const DiscreteProbe& p) {
                   if (p.cloud.size() < 1) throw InvalidInputError("discrete probe needs at least one point");
                   p.cloud.validate();
                 },
                 [](const UniformCubeProbe& p) {
                   if (!(p.radius > 0.0) || !std::isfinite(p.radius))
                     throw InvalidInputError("uniform cube radius must be positive");
                   if (p.dim < 1) throw InvalidInputError("uniform cube dimension must be positive");
                 },
                 [](const LaplaceProbe& p) { check_covariance(p.covariance, p.covariance.rows(), "laplace covariance"); },
                 [](const MixtureProbe& p) {
                   if (!(p.offset >= 0.0) || !std::isfinite(p.offset))
                     throw InvalidInputError("mixture offset must be nonnegative");
                   check_unit(p.direction, "mixture direction");
                   check_covariance(p.covariance, p.direction.size(), "mixture covariance");
                 },
                 [](const ConvolveProbe& p) {
                   if (!p.first || !p.second) throw InvalidInputError("convolve needs two measures");
                   if (p.first->dim() != p.second->dim()) throw DimensionError("convolved measures differ in dimension");
                 },
                 [](const TranslateProbe& p) {
                   if (!p.base) throw InvalidInputError("translate needs a base measure");
                   if (p.shift.size() != p.base->dim()) throw DimensionError("shift dimension differs from measure");
                   require_finite(p.shift, "translate shift");
                 },
                 [](const GaussianSmoothProbe& p) {
                   if (!p.base) throw InvalidInputError("gaussian_smooth needs a base measure");
                   check_covariance(p.covariance, p.base->dim(), "smoothing covariance");
                 },
             },
             v_);
}

double log_sinhc(double u) {
  const double a = std::abs(u);
  if (a < 1e-3) {
    static const std::vector<double> g = log_sinhc_coefficients(6);
    const double u2 = a * a;
    double s = 0.0;
    for (auto it = g.rbegin(); it != g.rend(); ++it) s = (s + *it) * u2;
    return s;
  }
  if (a > 20.0) return a - std::log(2.0 * a) + std::log1p(-std::exp(-2.0 * a));
  return std::log(std::sinh(a) / a);
}

double log_cosh(double u) {
  const double a = std::abs(u);
  return a + std::log1p(std::exp(-2.0 * a)) - std::numbers::ln2;
}

std::vector<double> log_sinhc_coefficients(Index K) {
  std::vector<double> g;
  for (Index k = 1; k <= K; ++k) {
    const double z = k == 1 ? std::numbers::pi * std::numbers::pi / 6.0 : zeta_even(k);
    const double sign = (k % 2 == 1) ? 1.0 : -1.0;
    g.push_back(sign * z / (static_cast<double>(k) * std::pow(std::numbers::pi, 2.0 * static_cast<double>(k))));
  }
  return g;
}

std::vector<double> log_cosh_coefficients(Index K) {
  auto g = log_sinhc_coefficients(K);
  for (Index k = 1; k <= K; ++k) g[k - 1] *= std::pow(4.0, static_cast<double>(k)) - 1.0;
  return g;
}

double cumulant(const ProbeMeasure& measure, const Vec& q) {
  if (q.size() != measure.dim()) throw DimensionError("probe point dimension differs from measure");
  return std::visit(Overloaded{
                        [&](const DiscreteProbe& p) {
                          const Vec s = p.cloud.points.transpose() * q;
                          double m = -kInf;
                          for (Index i = 0; i < s.size(); ++i)
                            if (p.cloud.weights(i) > 0.0) m = std::max(m, s(i));
                          double z = 0.0;
                          for (Index i = 0; i < s.size(); ++i)
                            if (p.cloud.weights(i) > 0.0) z += p.cloud.weights(i) * std::exp(s(i) - m);
                          return m + std::log(z);
                        },
                        [&](const UniformCubeProbe& p) {
                          double s = 0.0;
                          for (Index i = 0; i < q.size(); ++i) s += log_sinhc(p.radius * q(i));
                          return s;
                        },
                        [&](const LaplaceProbe& p) {
                          const double u = 0.5 * quad(p.covariance, q);
                          if (!(u < 1.0))
                            throw DomainError("laplace moment generating function diverges at this probe point");
                          return -std::log1p(-u);
                        },
                        [&](const MixtureProbe& p) {
                          return log_cosh(p.offset * p.direction.dot(q)) + 0.5 * quad(p.covariance, q);
                        },
                        [&](const ConvolveProbe& p) { return cumulant(*p.first, q) + cumulant(*p.second, q); },
                        [&](const TranslateProbe& p) { return cumulant(*p.base, q) - q.dot(p.shift); },
                        [&](const GaussianSmoothProbe& p) { return cumulant(*p.base, q) + 0.5 * quad(p.covariance, q); },
                    },
                    measure.variant());
}

double directional_cumulant(const ProbeMeasure& measure, const Vec& e, double t) {
  check_unit(e, "direction");
  return cumulant(measure, t * e);
}

double mgf_radius(const ProbeMeasure& measure, const Vec& q) {
  return std::visit(Overloaded{
                        [&](const LaplaceProbe& p) {
                          const double u = 0.5 * quad(p.covariance, q);
                          return u > 0.0 ? 1.0 / std::sqrt(u) : kInf;
                        },
                        [&](const ConvolveProbe& p) { return std::min(mgf_radius(*p.first, q), mgf_radius(*p.second, q)); },
                        [&](const TranslateProbe& p) { return mgf_radius(*p.base, q); },
                        [&](const GaussianSmoothProbe& p) { return mgf_radius(*p.base, q); },
                        [](const auto&) { return kInf; },
                    },
                    measure.variant());
}

PairwiseDifferenceReport check_pairwise_difference_condition(std::span<const TokenCloud> samples,
                                                             double rel_tolerance) {
  if (samples.size() < 2) throw InvalidInputError("need at least two clouds");
  const Index d = samples.front().dim();
  PairwiseDifferenceReport r;
  for (const auto& c : samples) {
    c.validate();
    if (c.dim() != d) throw DimensionError("clouds differ in dimension");
    if (c.size() < 2) throw InvalidInputError("every cloud needs at least two points");
    r.scale = std::max(r.scale, c.points.colwise().norm().maxCoeff());
  }
  r.min_gap = kInf;
  const auto ns = static_cast<Index>(samples.size());
  for (Index i = 0; i < ns; ++i)
    for (Index j = i + 1; j < ns; ++j) {
      const Mat& X = samples[i].points;
      const Mat& Y = samples[j].points;
      for (Index p = 0; p < X.cols(); ++p)
        for (Index q = 0; q < X.cols(); ++q) {
          if (p == q) continue;
          const Vec dx = X.col(p) - X.col(q);
          for (Index a = 0; a < Y.cols(); ++a)
            for (Index b = 0; b < Y.cols(); ++b) {
              if (a == b) continue;
              const double g = (dx - (Y.col(a) - Y.col(b))).norm();
              if (g < r.min_gap) {
                r.min_gap = g;
                r.argmin = {i, p, q, j, a, b};
              }
            }
        }
    }
  r.tolerance = rel_tolerance * r.scale;
  r.passed = r.min_gap > r.tolerance;
  return r;
}

namespace {

Index common_dim(std::span<const ProbePtr> measures) {
  if (measures.empty()) throw InvalidInputError("no measures");
  const Index d = measures.front()->dim();
  for (const auto& m : measures) {
    if (!m) throw InvalidInputError("null measure");
    if (m->dim() != d) throw DimensionError("measures differ in dimension");
  }
  return d;
}

// Normalizes columns in place and returns their original norms.
Vec normalize_columns(Mat& G) {
  Vec norms = G.colwise().norm().transpose();
  for (Index j = 0; j < G.cols(); ++j)
    if (norms(j) > 0.0) G.col(j) /= norms(j);
  return norms;
}

void smallest_singular(const Mat& P, double& sigma, Vec& v) {
  Eigen::JacobiSVD<Mat> svd(P, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  const Index k = P.cols();
  sigma = k <= sv.size() ? sv(k - 1) : 0.0;
  v = svd.matrixV().col(k - 1);
}

std::vector<MeasureDiagnostics> base_diagnostics(std::span<const ProbePtr> measures, const Vec& norms, Index offset) {
  std::vector<MeasureDiagnostics> out;
  for (std::size_t j = 0; j < measures.size(); ++j) {
    MeasureDiagnostics m;
    m.name = measures[j]->name();
    m.column_norm = norms(static_cast<Index>(j) + offset);
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace

IndependenceReport independence_sigma_min_weak(std::span<const ProbePtr> measures, const Mat& grid,
                                               double threshold) {
  const Index d = common_dim(measures);
  const auto N = static_cast<Index>(measures.size());
  const Index M = grid.cols();
  if (grid.rows() != d) throw DimensionError("probe grid dimension differs from measures");
  if (M < N + d + 2) throw InvalidInputError("probe grid needs at least N + d + 2 points");

  Mat A(M, d + 1);
  A.col(0).setOnes();
  A.rightCols(d) = grid.transpose();
  Eigen::JacobiSVD<Mat> asvd(A);
  const auto& asv = asvd.singularValues();
  if (!(asv(asv.size() - 1) > 1e-10 * asv(0))) throw InvalidInputError("degenerate probe grid: affine block is rank deficient");

  Mat G(M, N);
  for (Index m = 0; m < M; ++m)
    for (Index j = 0; j < N; ++j) G(m, j) = cumulant(*measures[j], grid.col(m));
  require_finite(G, "cumulant design matrix");
  const Vec norms = normalize_columns(G);

  const Mat QA = Eigen::HouseholderQR<Mat>(A).householderQ() * Mat::Identity(M, d + 1);
  const Mat P = G - QA * (QA.transpose() * G);

  IndependenceReport r;
  r.mode = IndependenceMode::weak;
  r.threshold = threshold;
  r.grid_points = M;
  r.grid_scale = grid.norm() / std::sqrt(static_cast<double>(M));
  Vec v;
  smallest_singular(P, r.sigma_min, v);
  r.coefficients = Vec::Zero(N);
  for (Index j = 0; j < N; ++j) r.coefficients(j) = norms(j) > 0.0 ? v(j) / norms(j) : v(j);
  r.measures = base_diagnostics(measures, norms, 0);
  r.passed = r.sigma_min > threshold;
  return r;
}

IndependenceReport independence_sigma_min_strong(std::span<const ProbePtr> measures, const Vec& e, const Vec& t,
                                                 double threshold) {
  const Index d = common_dim(measures);
  check_unit(e, "direction");
  if (e.size() != d) throw DimensionError("direction dimension differs from measures");
  const auto N = static_cast<Index>(measures.size());
  const Index M = t.size();
  if (M < N + d + 2) throw InvalidInputError("probe grid needs at least N + d + 2 points");
  if (!(t.maxCoeff() > t.minCoeff())) throw InvalidInputError("degenerate probe grid: t values coincide");

  Mat G(M, N + 1);
  G.col(0) = t;
  for (Index m = 0; m < M; ++m)
    for (Index j = 0; j < N; ++j) G(m, j + 1) = directional_cumulant(*measures[j], e, t(m));
  require_finite(G, "cumulant design matrix");
  const Vec norms = normalize_columns(G);

  IndependenceReport r;
  r.mode = IndependenceMode::strong;
  r.direction = e;
  r.threshold = threshold;
  r.grid_points = M;
  r.grid_scale = t.cwiseAbs().maxCoeff();
  Vec v;
  smallest_singular(G, r.sigma_min, v);
  r.coefficients = Vec::Zero(N);
  for (Index j = 0; j < N; ++j) r.coefficients(j) = norms(j + 1) > 0.0 ? v(j + 1) / norms(j + 1) : v(j + 1);
  r.measures = base_diagnostics(measures, norms, 1);
  r.passed = r.sigma_min > threshold;

  for (Index j = 0; j < N; ++j) {
    const auto* disc = std::get_if<DiscreteProbe>(&measures[j]->variant());
    if (!disc) continue;
    std::vector<double> scores;
    for (Index i = 0; i < disc->cloud.size(); ++i)
      if (disc->cloud.weights(i) > 0.0) scores.push_back(e.dot(disc->cloud.points.col(i)));
    std::sort(scores.begin(), scores.end(), std::greater<>());
    auto& diag = r.measures[j];
    diag.top_score = scores.front();
    if (scores.size() > 1) {
      diag.top_gap = scores[0] - scores[1];
      diag.tie = *diag.top_gap <= 1e-12 * std::max(1.0, std::abs(scores[0]));
    }
    if (diag.tie) {
      r.passed = false;
      if (r.message.empty()) r.message = "tied top score along the direction for measure " + std::to_string(j);
    }
  }
  return r;
}

IndependenceReport independence_sigma_min(std::span<const ProbePtr> measures, const IndependenceOptions& options) {
  const Index d = common_dim(measures);
  if (!(options.scale > 0.0)) throw InvalidInputError("grid scale must be positive");
  if (options.mode == IndependenceMode::weak) {
    const Index M = options.points > 0 ? options.points : 64;
    Rng rng(options.seed);
    Mat grid = rng.normal_mat(d, M, options.scale);
    for (Index m = 0; m < M; ++m) {
      double radius = kInf;
      for (const auto& mu : measures) radius = std::min(radius, mgf_radius(*mu, grid.col(m)));
      if (0.9 * radius < 1.0) grid.col(m) *= 0.9 * radius;
    }
    auto r = independence_sigma_min_weak(measures, grid, options.threshold);
    r.seed = options.seed;
    return r;
  }
  if (options.direction.size() != d) throw DimensionError("strong mode needs a direction of dimension d");
  check_unit(options.direction, "direction");
  const Index M = options.points > 0 ? options.points : 41;
  if (M < 2) throw InvalidInputError("strong grid needs at least two points");
  double T = options.scale;
  for (const auto& mu : measures) T = std::min(T, 0.9 * mgf_radius(*mu, options.direction));
  const Vec t = Vec::LinSpaced(M, -T, T);
  auto r = independence_sigma_min_strong(measures, options.direction, t, options.threshold);
  r.seed = options.seed;
  return r;
}

namespace {

struct SeriesForm {
  double s = 0.0;
  std::vector<double> alpha;  // alpha_1 .. alpha_K
  bool quadratic = false;
};

SeriesForm series_form(const ProbeMeasure& m, const Vec& e, Index K) {
  return std::visit(Overloaded{
                        [&](const UniformCubeProbe& p) {
                          SeriesForm f;
                          f.s = p.radius * p.radius;
                          f.alpha = log_sinhc_coefficients(K);
                          for (Index k = 1; k <= K; ++k)
                            f.alpha[k - 1] *= e.array().pow(2.0 * static_cast<double>(k)).sum();
                          return f;
                        },
                        [&](const LaplaceProbe& p) {
                          SeriesForm f;
                          f.s = 0.5 * quad(p.covariance, e);
                          for (Index k = 1; k <= K; ++k) f.alpha.push_back(1.0 / static_cast<double>(k));
                          return f;
                        },
                        [&](const MixtureProbe& p) {
                          SeriesForm f;
                          const double c = p.direction.dot(e);
                          f.s = p.offset * p.offset * c * c;
                          f.alpha = log_cosh_coefficients(K);
                          f.quadratic = quad(p.covariance, e) > 0.0;
                          return f;
                        },
                        [&](const GaussianSmoothProbe& p) {
                          SeriesForm f = series_form(*p.base, e, K);
                          f.quadratic = true;
                          return f;
                        },
                        [&](const auto&) -> SeriesForm {
                          throw InvalidInputError("series check does not support " + m.name());
                        },
                    },
                    m.variant());
}

}  // namespace

SeriesReport series_independence_check(std::span<const ProbePtr> family, const Vec& e, Index terms) {
  const Index d = common_dim(family);
  if (e.size() != d) throw DimensionError("direction dimension differs from measures");
  check_unit(e, "direction");
  const auto N = static_cast<Index>(family.size());
  if (terms <= 0) terms = N;
  const Index K = terms + 1;
  std::vector<SeriesForm> forms;
  bool quadratic = false;
  for (const auto& m : family) {
    forms.push_back(series_form(*m, e, K));
    quadratic = quadratic || forms.back().quadratic;
  }
  for (const auto& f : forms)
    for (Index k = 0; k < K; ++k) {
      const double a = forms.front().alpha[k];
      if (std::abs(f.alpha[k] - a) > 1e-12 * std::max(std::abs(a), std::abs(f.alpha[k])))
        throw InvalidInputError("series coefficients differ across the family");
    }

  SeriesReport r;
  r.start_order = quadratic ? 2 : 1;
  for (const auto& f : forms) r.s.push_back(f.s);
  r.alpha.assign(forms.front().alpha.begin() + (r.start_order - 1),
                 forms.front().alpha.begin() + (r.start_order - 1) + terms);
  r.nonzero_s = std::all_of(r.s.begin(), r.s.end(), [](double s) { return s != 0.0; });
  r.alphas_nonzero = std::all_of(r.alpha.begin(), r.alpha.end(), [](double a) { return a != 0.0; });
  r.distinct = true;
  double det = 1.0;
  for (Index j = 0; j < N; ++j) {
    det *= std::pow(r.s[j], static_cast<double>(r.start_order));
    for (Index i = 0; i < j; ++i) {
      det *= r.s[j] - r.s[i];
      if (std::abs(r.s[j] - r.s[i]) <= 1e-12 * std::max(std::abs(r.s[i]), std::abs(r.s[j]))) r.distinct = false;
    }
  }
  r.vandermonde_determinant = det;
  r.passed = r.distinct && r.nonzero_s && r.alphas_nonzero;
  if (!r.distinct) r.message = "s values coincide";
  else if (!r.nonzero_s) r.message = "some s value is zero";
  else if (!r.alphas_nonzero) r.message = "vanishing series coefficient";
  return r;
}

double softmax_max_gap(const TokenCloud& cloud, const Vec& e, double s) {
  cloud.validate();
  if (e.size() != cloud.dim()) throw DimensionError("direction dimension differs from cloud");
  check_unit(e, "direction");
  if (!(s >= 0.0)) throw InvalidInputError("s must be nonnegative");
  const Vec score = cloud.points.transpose() * e;
  double h = -kInf;
  for (Index i = 0; i < score.size(); ++i)
    if (cloud.weights(i) > 0.0) h = std::max(h, score(i));
  double z = 0.0, num = 0.0;
  for (Index i = 0; i < score.size(); ++i) {
    if (!(cloud.weights(i) > 0.0)) continue;
    const double w = cloud.weights(i) * std::exp(s * (score(i) - h));
    z += w;
    num += w * (h - score(i));
  }
  return num / z;
}

namespace {

Index find_token(const Mat& tokens, const Vec& x) {
  const double tol = 1e-12 * (1.0 + x.norm());
  for (Index i = 0; i < tokens.cols(); ++i)
    if ((tokens.col(i) - x).norm() <= tol) return i;
  return -1;
}

}  // namespace

WitnessReport null_direction_witness(std::span<const CoupledState> samples, const Vec& x1, const Vec& x2,
                                     const Vec& coefficients, const WitnessOptions& options) {
  if (samples.empty()) throw InvalidInputError("no samples");
  const Index d = samples.front().dim();
  if (x1.size() != d || x2.size() != d) throw DimensionError("witness points differ in dimension");
  if (coefficients.size() != static_cast<Index>(samples.size()))
    throw DimensionError("one coefficient per sample is required");
  if ((x1 - x2).norm() <= 1e-12 * (1.0 + x1.norm())) throw InvalidInputError("witness points must be distinct");
  if (options.coordinate < 0 || options.coordinate >= d) throw InvalidInputError("coordinate out of range");
  if (options.probes < 1) throw InvalidInputError("need at least one probe head");

  WitnessReport r;
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const auto& s = samples[j];
    s.validate();
    if (s.dim() != d) throw DimensionError("samples differ in dimension");
    const Mat X = s.tokens();
    const Index i1 = find_token(X, x1);
    const Index i2 = find_token(X, x2);
    if (i1 < 0 || i2 < 0)
      throw InvalidInputError("witness points are not common to every token set (sample " + std::to_string(j) + ")");
    Mat m = Mat::Zero(d, X.cols());
    m(options.coordinate, i1) += coefficients(static_cast<Index>(j));
    m(options.coordinate, i2) -= coefficients(static_cast<Index>(j));
    r.adjoints.push_back(std::move(m));
    r.x1_index.push_back(i1);
    r.x2_index.push_back(i2);
  }

  Rng rng(options.seed);
  for (Index k = 0; k < options.probes; ++k) {
    const Mat Q = rng.normal_mat(d, d, options.scale);
    const Vec q = rng.normal_vec(d, options.scale);
    Vec total = Vec::Zero(d);
    double norm = 0.0;
    for (std::size_t j = 0; j < samples.size(); ++j) {
      const double c = coefficients(static_cast<Index>(j));
      if (c == 0.0) continue;
      const Vec m1 = moment_maps(Q, q, samples[j].context, x1).mean();
      const Vec m2 = moment_maps(Q, q, samples[j].context, x2).mean();
      total += c * (m1 - m2);
      norm += std::abs(c) * (m1.norm() + m2.norm());
    }
    if (norm > 0.0) r.residual = std::max(r.residual, total.norm() / norm);
  }
  return r;
}

}  // namespace mftlab
