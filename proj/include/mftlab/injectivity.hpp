#pragma once

// Cumulant generating functions g_mu(q) = log E_mu exp<q, y> of token
// distributions and numerical tests of their linear independence modulo
// affine functions.

#include "mftlab/core.hpp"

#include <array>
#include <memory>
#include <optional>
#include <span>
#include <variant>

namespace mftlab {

class ProbeMeasure;
using ProbePtr = std::shared_ptr<const ProbeMeasure>;

struct DiscreteProbe {
  TokenCloud cloud;
};
/// Uniform law on [-radius, radius]^dim.
struct UniformCubeProbe {
  double radius = 1.0;
  Index dim = 1;
};
/// Centered symmetric multivariate Laplace law, characteristic function
/// 1 / (1 + t^T Sigma t / 2).
struct LaplaceProbe {
  Mat covariance;
};
/// (N(a e, Sigma) + N(-a e, Sigma)) / 2 with unit e.
struct MixtureProbe {
  double offset = 1.0;
  Vec direction;
  Mat covariance;
};
struct ConvolveProbe {
  ProbePtr first;
  ProbePtr second;
};
/// Law of X - shift for X ~ base.
struct TranslateProbe {
  ProbePtr base;
  Vec shift;
};
/// base convolved with N(0, covariance).
struct GaussianSmoothProbe {
  ProbePtr base;
  Mat covariance;
};

class ProbeMeasure {
 public:
  using Variant = std::variant<DiscreteProbe, UniformCubeProbe, LaplaceProbe, MixtureProbe, ConvolveProbe,
                               TranslateProbe, GaussianSmoothProbe>;
  static constexpr int kMaxDepth = 8;

  static ProbePtr discrete(TokenCloud cloud);
  static ProbePtr dirac(const Vec& x);
  static ProbePtr uniform_cube(double radius, Index dim);
  static ProbePtr laplace(Mat covariance);
  static ProbePtr mixture(double offset, Vec direction, Mat covariance);
  static ProbePtr convolve(ProbePtr first, ProbePtr second);
  static ProbePtr translate(ProbePtr base, Vec shift);
  static ProbePtr gaussian_smooth(ProbePtr base, Mat covariance);
  /// N(mean, covariance), built as a smoothed Dirac.
  static ProbePtr gaussian(const Vec& mean, Mat covariance);

  const Variant& variant() const { return v_; }
  Index dim() const;
  int depth() const;
  std::string name() const;
  void validate() const;

 private:
  explicit ProbeMeasure(Variant v) : v_(std::move(v)) {}
  static ProbePtr make(Variant v);
  Variant v_;
};

double cumulant(const ProbeMeasure& measure, const Vec& q);
double directional_cumulant(const ProbeMeasure& measure, const Vec& e, double t);

/// Largest c > 0 with c q inside the domain of the moment generating
/// function (+inf when unbounded).
double mgf_radius(const ProbeMeasure& measure, const Vec& q);

/// log(sinh u / u) and log cosh u, evaluated stably for all u.
double log_sinhc(double u);
double log_cosh(double u);

/// Coefficients of the even series log(sinh u / u) = sum_k gamma_k u^{2k}
/// and log cosh u = sum_k beta_k u^{2k}, k = 1..K.
std::vector<double> log_sinhc_coefficients(Index K);
std::vector<double> log_cosh_coefficients(Index K);

struct PairwiseDifferenceReport {
  double min_gap = 0.0;
  double tolerance = 0.0;
  double scale = 0.0;
  bool passed = false;
  // Indices (cloud i, p, q, cloud j, r, s) of the minimizing combination.
  std::array<Index, 6> argmin{};
};

/// min |(x_p - x_q) - (x_r - x_s)| over clouds i != j, p != q, r != s;
/// passes when above rel_tolerance * scale (scale = largest point norm).
PairwiseDifferenceReport check_pairwise_difference_condition(std::span<const TokenCloud> samples,
                                                             double rel_tolerance = 1e-9);

enum class IndependenceMode { weak, strong };

struct IndependenceOptions {
  IndependenceMode mode = IndependenceMode::weak;
  Vec direction;        // strong mode, unit vector
  Index points = 0;     // 0 picks 64 (weak) or 41 (strong)
  double scale = 2.0;   // Gaussian scale (weak) or half width in t (strong)
  std::uint64_t seed = 0;
  double threshold = 1e-8;
};

struct MeasureDiagnostics {
  std::string name;
  double column_norm = 0.0;
  // Discrete measures in strong mode: top score h_j(e), gap to the
  // runner-up alpha_j, and whether the top score is tied.
  std::optional<double> top_score;
  std::optional<double> top_gap;
  bool tie = false;
};

struct IndependenceReport {
  IndependenceMode mode = IndependenceMode::weak;
  Vec direction;
  double sigma_min = 0.0;
  double threshold = 0.0;
  bool passed = false;
  Index grid_points = 0;
  double grid_scale = 0.0;
  std::uint64_t seed = 0;
  /// Right singular vector of sigma_min mapped back to raw cumulant
  /// scale: coefficients C_j of the nearest dependence.
  Vec coefficients;
  std::vector<MeasureDiagnostics> measures;
  std::string message;
};

/// Builds the probe grid from options and delegates to the explicit-grid
/// overloads below.
IndependenceReport independence_sigma_min(std::span<const ProbePtr> measures, const IndependenceOptions& options);

/// Weak mode on explicit probe points (d x M).
IndependenceReport independence_sigma_min_weak(std::span<const ProbePtr> measures, const Mat& grid,
                                               double threshold = 1e-8);

/// Strong mode along unit e on an explicit t grid.
IndependenceReport independence_sigma_min_strong(std::span<const ProbePtr> measures, const Vec& e, const Vec& t,
                                                 double threshold = 1e-8);

struct SeriesReport {
  std::vector<double> s;
  std::vector<double> alpha;  // alpha_k for k = start_order .. start_order + terms - 1
  Index start_order = 1;
  double vandermonde_determinant = 0.0;
  bool distinct = false;
  bool nonzero_s = false;
  bool alphas_nonzero = false;
  bool passed = false;
  std::string message;
};

/// Even-series families g_{mu_j,e}(t) = sum_k alpha_k s_j^k t^{2k} (plus an
/// optional quadratic shift, in which case orders start at k = 2).
SeriesReport series_independence_check(std::span<const ProbePtr> family, const Vec& e, Index terms = 0);

/// h - ratio(s) with ratio the softmax(s <e, y>)-weighted mean of <e, y>
/// and h = max <e, y_i>; nonnegative and nonincreasing in s.
double softmax_max_gap(const TokenCloud& cloud, const Vec& e, double s);

struct WitnessOptions {
  Index probes = 64;
  double scale = 1.0;
  std::uint64_t seed = 0;
  Index coordinate = 0;
};

struct WitnessReport {
  /// m^(j) per sample, d x (n_j + 1) in token order, C_j e_l at x1 and
  /// -C_j e_l at x2.
  std::vector<Mat> adjoints;
  std::vector<Index> x1_index;
  std::vector<Index> x2_index;
  double residual = 0.0;
};

/// Max over random heads (Q, q) of |sum_j C_j (M^j(x1) - M^j(x2))|,
/// normalized by sum_j |C_j| (|M^j(x1)| + |M^j(x2)|), where M^j is the
/// softmax mean of sample j's context.
WitnessReport null_direction_witness(std::span<const CoupledState> samples, const Vec& x1, const Vec& x2,
                                     const Vec& coefficients, const WitnessOptions& options = {});

}  // namespace mftlab
