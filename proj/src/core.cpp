#include "mftlab/core.hpp"

#include <cmath>
#include <sstream>

namespace mftlab {

namespace {

std::string shape(Index r, Index c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

}  // namespace

void require_finite(const Vec& v, const char* what) {
  if (!v.allFinite()) throw InvalidInputError(std::string(what) + " has non-finite entries");
}

void require_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw InvalidInputError(std::string(what) + " has non-finite entries");
}

AttentionParams AttentionParams::zeros(Index d) {
  return {Mat::Zero(d, d), Vec::Zero(d), Mat::Zero(d, d)};
}

void AttentionParams::validate() const {
  const Index d = q.size();
  if (d == 0) throw DimensionError("attention head has zero dimension");
  if (Q.rows() != d || Q.cols() != d)
    throw DimensionError("Q is " + shape(Q.rows(), Q.cols()) + ", expected " + shape(d, d));
  if (V.rows() != d || V.cols() != d)
    throw DimensionError("V is " + shape(V.rows(), V.cols()) + ", expected " + shape(d, d));
  require_finite(Q, "Q");
  require_finite(q, "q");
  require_finite(V, "V");
}

bool AttentionParams::is_finite() const { return Q.allFinite() && q.allFinite() && V.allFinite(); }

double AttentionParams::squared_norm() const {
  return Q.squaredNorm() + q.squaredNorm() + V.squaredNorm();
}

AttentionParams& AttentionParams::operator+=(const AttentionParams& other) {
  Q += other.Q;
  q += other.q;
  V += other.V;
  return *this;
}

AttentionParams& AttentionParams::operator-=(const AttentionParams& other) {
  Q -= other.Q;
  q -= other.q;
  V -= other.V;
  return *this;
}

AttentionParams& AttentionParams::operator*=(double s) {
  Q *= s;
  q *= s;
  V *= s;
  return *this;
}

AttentionParams operator+(AttentionParams a, const AttentionParams& b) { return a += b; }
AttentionParams operator-(AttentionParams a, const AttentionParams& b) { return a -= b; }
AttentionParams operator*(double s, AttentionParams a) { return a *= s; }

double squared_distance(const AttentionParams& a, const AttentionParams& b) {
  return (a.Q - b.Q).squaredNorm() + (a.q - b.q).squaredNorm() + (a.V - b.V).squaredNorm();
}

TokenCloud TokenCloud::uniform(Mat points) {
  const Index n = points.cols();
  Vec w = Vec::Constant(n, n > 0 ? 1.0 / static_cast<double>(n) : 0.0);
  return {std::move(points), std::move(w)};
}

TokenCloud TokenCloud::dirac(const Vec& y) { return {Mat(y), Vec::Ones(1)}; }

void TokenCloud::validate() const {
  if (points.cols() < 1) throw InvalidInputError("token cloud is empty");
  if (points.rows() < 1) throw DimensionError("token cloud has zero dimension");
  if (weights.size() != points.cols())
    throw DimensionError("token cloud has " + std::to_string(points.cols()) + " points but " +
                         std::to_string(weights.size()) + " weights");
  require_finite(points, "token cloud points");
  require_finite(weights, "token cloud weights");
  if ((weights.array() < 0.0).any()) throw InvalidInputError("token cloud has negative weights");
  if (std::abs(weights.sum() - 1.0) > 1e-12)
    throw InvalidInputError("token cloud weights do not sum to one");
}

Mat CoupledState::tokens() const {
  Mat t(dim(), num_tokens());
  t.col(0) = query;
  t.rightCols(context.size()) = context.points;
  return t;
}

void CoupledState::set_tokens(const Mat& t) {
  query = t.col(0);
  context.points = t.rightCols(t.cols() - 1);
}

Vec CoupledState::stacked() const {
  const Mat t = tokens();
  return Eigen::Map<const Vec>(t.data(), t.size());
}

void CoupledState::set_stacked(const Vec& stacked) {
  if (stacked.size() != dim() * num_tokens())
    throw DimensionError("stacked token vector has wrong length");
  set_tokens(Eigen::Map<const Mat>(stacked.data(), dim(), num_tokens()));
}

void CoupledState::validate() const {
  context.validate();
  if (query.size() != context.dim())
    throw DimensionError("query has dimension " + std::to_string(query.size()) +
                         " but context has dimension " + std::to_string(context.dim()));
  require_finite(query, "query token");
}

bool CoupledState::is_finite() const { return query.allFinite() && context.points.allFinite(); }

HeadEnsemble HeadEnsemble::uniform(std::vector<AttentionParams> heads) {
  const auto h = heads.size();
  std::vector<double> w(h, h > 0 ? 1.0 / static_cast<double>(h) : 0.0);
  return {std::move(heads), std::move(w)};
}

void HeadEnsemble::validate() const {
  if (heads.empty()) throw InvalidInputError("head ensemble is empty");
  if (weights.size() != heads.size())
    throw DimensionError("head ensemble weights do not match head count");
  double total = 0.0;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    heads[h].validate();
    if (heads[h].dim() != heads.front().dim())
      throw DimensionError("heads in an ensemble have different dimensions");
    if (!(weights[h] >= 0.0)) throw InvalidInputError("head ensemble weight is negative");
    total += weights[h];
  }
  if (std::abs(total - 1.0) > 1e-12) throw InvalidInputError("head ensemble weights do not sum to one");
}

Vec Rng::normal_vec(Index n, double scale) {
  Vec v(n);
  for (Index i = 0; i < n; ++i) v(i) = scale * normal();
  return v;
}

Mat Rng::normal_mat(Index rows, Index cols, double scale) {
  Mat m(rows, cols);
  // column-major fill keeps draw order identical to normal_vec on vec(m)
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = scale * normal();
  return m;
}

Vec Rng::unit_vec(Index n) {
  Vec v = normal_vec(n);
  while (v.norm() < 1e-12) v = normal_vec(n);
  return v.normalized();
}

}  // namespace mftlab
