#include "mftlab/io.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mftlab {

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void require_finite_output(const Mat& m, const std::string& stage) {
  if (!m.allFinite()) throw DivergenceError(stage, "non-finite value in output");
}

void write_trajectory_csv(std::ostream& os, std::span<const Trajectory> trajectories) {
  os << "sample,depth_index,token_index,coordinate_index,value\n";
  for (std::size_t j = 0; j < trajectories.size(); ++j) {
    const auto& states = trajectories[j].states;
    for (std::size_t l = 0; l < states.size(); ++l) {
      const Mat X = states[l].tokens();
      require_finite_output(X, "trajectory");
      for (Index i = 0; i < X.cols(); ++i)
        for (Index c = 0; c < X.rows(); ++c)
          os << j << ',' << l << ',' << i << ',' << c << ',' << format_double(X(c, i)) << '\n';
    }
  }
}

namespace {

void write_block(std::ostream& os, Index l, Index h, char name, const Mat& m) {
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c)
      os << l << ',' << h << ',' << name << ',' << r << ',' << c << ',' << format_double(m(r, c)) << '\n';
}

}  // namespace

void write_gradient_csv(std::ostream& os, const GradientField& field) {
  if (!field.is_finite()) throw DivergenceError("gradient", "non-finite value in output");
  os << "layer,head,component,row,col,value\n";
  for (Index l = 0; l < field.num_layers(); ++l)
    for (Index h = 0; h < static_cast<Index>(field.blocks[l].size()); ++h) {
      const auto& g = field.blocks[l][h];
      write_block(os, l, h, 'Q', g.Q);
      write_block(os, l, h, 'q', g.q);
      write_block(os, l, h, 'V', g.V);
    }
}

void write_layer_matrices_csv(std::ostream& os, std::span<const Mat> matrices) {
  os << "layer,row,col,value\n";
  for (std::size_t l = 0; l < matrices.size(); ++l) {
    const Mat& m = matrices[l];
    require_finite_output(m, "ntk");
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) os << l << ',' << r << ',' << c << ',' << format_double(m(r, c)) << '\n';
  }
}

void write_loss_trace_csv(std::ostream& os, const TrainReport& report) {
  os << "step,flow_time,loss,upper_gradient,v_only_gradient,cot_displacement,eta,lambda0\n";
  for (std::size_t k = 0; k < report.steps.size(); ++k) {
    const double vals[] = {report.flow_time[k], report.loss[k], report.upper_gradient[k], report.v_only_gradient[k],
                           report.cot_displacement[k], report.eta[k]};
    os << report.steps[k];
    for (double v : vals) {
      if (!std::isfinite(v)) throw DivergenceError("train", "non-finite value in loss trace");
      os << ',' << format_double(v);
    }
    // lambda0 is left empty at log points where it was not evaluated.
    os << ',';
    if (!std::isnan(report.lambda0[k])) os << format_double(report.lambda0[k]);
    os << '\n';
  }
}

Json vec_to_json(const Vec& v) {
  Json j = Json::array();
  for (Index i = 0; i < v.size(); ++i) j.push_back(v(i));
  return j;
}

Json mat_to_json(const Mat& m) {
  Json j = Json::array();
  for (Index r = 0; r < m.rows(); ++r) j.push_back(vec_to_json(m.row(r).transpose()));
  return j;
}

Vec json_to_vec(const Json& j) {
  if (!j.is_array()) throw InvalidInputError("expected an array of numbers");
  Vec v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw InvalidInputError("expected an array of numbers");
    v(static_cast<Index>(i)) = j[i].get<double>();
  }
  return v;
}

Mat json_to_mat(const Json& j) {
  if (!j.is_array() || j.empty()) throw InvalidInputError("expected a nonempty list of rows");
  const auto cols = j.front().is_array() ? j.front().size() : 0;
  Mat m(static_cast<Index>(j.size()), static_cast<Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    const Vec row = json_to_vec(j[r]);
    if (row.size() != m.cols()) throw InvalidInputError("rows differ in length");
    m.row(static_cast<Index>(r)) = row.transpose();
  }
  return m;
}

Json number_or_null(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

namespace {

Json list(const std::vector<double>& v) {
  Json j = Json::array();
  for (double x : v) j.push_back(number_or_null(x));
  return j;
}

}  // namespace

Json to_json(const TrainReport& r) {
  Json j;
  j["status"] = r.status == TrainStatus::completed ? "completed" : "diverged";
  j["message"] = r.message;
  j["log_points"] = r.steps.size();
  j["initial_loss"] = r.loss.empty() ? Json(nullptr) : number_or_null(r.loss.front());
  j["final_loss"] = r.loss.empty() ? Json(nullptr) : number_or_null(r.loss.back());
  j["final_flow_time"] = r.flow_time.empty() ? 0.0 : r.flow_time.back();
  j["rate"] = number_or_null(r.rate);
  j["r_squared"] = number_or_null(r.r_squared);
  j["fit_points"] = r.fit_points;
  j["monotone"] = r.monotone;
  j["halvings"] = r.halvings;
  j["violations"] = r.violations;
  j["path_length"] = number_or_null(r.path_length);
  j["final_eta"] = r.eta.empty() ? Json(nullptr) : number_or_null(r.eta.back());
  return j;
}

Json to_json(const NTKReport& r) {
  Json j;
  j["n_total"] = r.n_total;
  j["depth"] = list(r.depth);
  j["lambda0"] = number_or_null(r.lambda0);
  j["lambda_min_v"] = list(r.lambda_min_v);
  j["lambda_max_v"] = list(r.lambda_max_v);
  j["condition_v"] = list(r.cond_v);
  const bool full = !r.lambda_min_full.empty();
  j["full_computed"] = full;
  if (full) {
    j["lambda0_full"] = number_or_null(r.lambda0_full);
    j["lambda_min_full"] = list(r.lambda_min_full);
    j["lambda_max_full"] = list(r.lambda_max_full);
    j["condition_full"] = list(r.cond_full);
  }
  return j;
}

Json to_json(const IndependenceReport& r) {
  Json j;
  j["mode"] = r.mode == IndependenceMode::weak ? "weak" : "strong";
  if (r.mode == IndependenceMode::strong) j["direction"] = vec_to_json(r.direction);
  j["sigma_min"] = r.sigma_min;
  j["threshold"] = r.threshold;
  j["passed"] = r.passed;
  j["grid"] = {{"points", r.grid_points}, {"scale", r.grid_scale}, {"seed", r.seed}};
  j["coefficients"] = vec_to_json(r.coefficients);
  Json ms = Json::array();
  for (const auto& m : r.measures) {
    Json e{{"name", m.name}, {"column_norm", m.column_norm}};
    if (m.top_score) e["top_score"] = *m.top_score;
    if (m.top_gap) e["top_gap"] = *m.top_gap;
    e["tie"] = m.tie;
    ms.push_back(std::move(e));
  }
  j["measures"] = std::move(ms);
  j["message"] = r.message;
  return j;
}

Json to_json(const SeriesReport& r) {
  return {{"s", list(r.s)},
          {"alpha", list(r.alpha)},
          {"start_order", r.start_order},
          {"vandermonde_determinant", r.vandermonde_determinant},
          {"distinct", r.distinct},
          {"nonzero_s", r.nonzero_s},
          {"alphas_nonzero", r.alphas_nonzero},
          {"passed", r.passed},
          {"message", r.message}};
}

Json to_json(const PairwiseDifferenceReport& r) {
  return {{"min_gap", r.min_gap},
          {"tolerance", r.tolerance},
          {"scale", r.scale},
          {"passed", r.passed},
          {"argmin", std::vector<Index>(r.argmin.begin(), r.argmin.end())}};
}

Json to_json(const WitnessReport& r) {
  return {{"residual", r.residual}, {"x1_index", r.x1_index}, {"x2_index", r.x2_index}};
}

Json to_json(const PerturbationResult& r) {
  return {{"delta", r.delta},
          {"lambda0", r.lambda0},
          {"lambda0_perturbed", r.lambda0_perturbed},
          {"abs_change", r.abs_change},
          {"cot_distance", r.cot_distance},
          {"ratio", r.ratio}};
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

void write_text_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << contents;
  if (!os) throw Error("failed writing " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace mftlab
