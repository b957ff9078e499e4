#pragma once

// Domain types shared by every module: tokens, clouds, attention heads and
// the error hierarchy.

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mftlab {

using Index = Eigen::Index;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class InvalidInputError : public Error {
 public:
  using Error::Error;
};

/// Raised when the numerical integration produces a non-finite value.
class DivergenceError : public Error {
 public:
  DivergenceError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Evaluation outside the domain of a moment generating function.
class DomainError : public Error {
 public:
  using Error::Error;
};

class SizeGateError : public Error {
 public:
  using Error::Error;
};

/// One attention head theta = (Q, q, V), key matrix fixed to the identity.
///
/// The same triple doubles as a tangent vector in parameter space
/// (gradients, velocities, perturbations).
struct AttentionParams {
  Mat Q;
  Vec q;
  Mat V;

  static AttentionParams zeros(Index d);

  Index dim() const { return q.size(); }
  void validate() const;
  bool is_finite() const;

  /// ||Q||_F^2 + ||q||^2 + ||V||_F^2
  double squared_norm() const;

  AttentionParams& operator+=(const AttentionParams& other);
  AttentionParams& operator-=(const AttentionParams& other);
  AttentionParams& operator*=(double s);
};

AttentionParams operator+(AttentionParams a, const AttentionParams& b);
AttentionParams operator-(AttentionParams a, const AttentionParams& b);
AttentionParams operator*(double s, AttentionParams a);

double squared_distance(const AttentionParams& a, const AttentionParams& b);

/// Weighted empirical measure sum_l w_l delta_{y_l}. Points are columns.
struct TokenCloud {
  Mat points;
  Vec weights;

  static TokenCloud uniform(Mat points);
  static TokenCloud dirac(const Vec& y);

  Index dim() const { return points.rows(); }
  Index size() const { return points.cols(); }
  Vec mean() const { return points * weights; }

  void validate() const;
};

/// Query token x_0 together with the context cloud x_1..x_n it attends to.
///
/// Token index 0 is the query; index i >= 1 is context column i - 1.
struct CoupledState {
  Vec query;
  TokenCloud context;

  Index dim() const { return query.size(); }
  Index num_tokens() const { return context.size() + 1; }

  /// d x (n+1) matrix, column 0 is the query.
  Mat tokens() const;
  void set_tokens(const Mat& tokens);

  /// Token-major stacking [x_0; x_1; ...; x_n] of length (n+1) d.
  Vec stacked() const;
  void set_stacked(const Vec& stacked);

  void validate() const;
  bool is_finite() const;
};

/// Weighted ensemble of heads; a discrete parameter distribution.
struct HeadEnsemble {
  std::vector<AttentionParams> heads;
  std::vector<double> weights;

  static HeadEnsemble uniform(std::vector<AttentionParams> heads);

  Index size() const { return static_cast<Index>(heads.size()); }
  Index dim() const { return heads.empty() ? 0 : heads.front().dim(); }
  void validate() const;
};

/// Seeded Gaussian source. std::mt19937_64 is fully specified by the
/// standard; normal variates come from the library's normal_distribution,
/// which is deterministic for a fixed toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  Vec normal_vec(Index n, double scale = 1.0);
  Mat normal_mat(Index rows, Index cols, double scale = 1.0);
  Vec unit_vec(Index n);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

void require_finite(const Vec& v, const char* what);
void require_finite(const Mat& m, const char* what);

}  // namespace mftlab
