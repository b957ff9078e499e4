#pragma once

// CSV and JSON serialization of trajectories, gradients, kernels and
// reports. Every CSV has a header row and a fixed column order; floating
// point values are printed with 17 significant digits.

#include "mftlab/adjoint.hpp"
#include "mftlab/injectivity.hpp"
#include "mftlab/ntk.hpp"
#include "mftlab/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>

namespace mftlab {

using Json = nlohmann::json;

std::string format_double(double x);

/// Throws DivergenceError(stage, ...) if any value is non-finite.
void require_finite_output(const Mat& m, const std::string& stage);

void write_trajectory_csv(std::ostream& os, std::span<const Trajectory> trajectories);
void write_gradient_csv(std::ostream& os, const GradientField& field);
/// Rows (layer, row, col, value) for a list of per-layer matrices.
void write_layer_matrices_csv(std::ostream& os, std::span<const Mat> matrices);
void write_loss_trace_csv(std::ostream& os, const TrainReport& report);

Json vec_to_json(const Vec& v);
Json mat_to_json(const Mat& m);  // list of rows
Vec json_to_vec(const Json& j);
Mat json_to_mat(const Json& j);  // list of rows

/// Non-finite doubles become null.
Json number_or_null(double x);

Json to_json(const TrainReport& report);
Json to_json(const NTKReport& report);
Json to_json(const IndependenceReport& report);
Json to_json(const SeriesReport& report);
Json to_json(const PairwiseDifferenceReport& report);
Json to_json(const WitnessReport& report);
Json to_json(const PerturbationResult& result);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

void write_text_file(const std::filesystem::path& path, const std::string& contents);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace mftlab
