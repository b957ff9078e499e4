#include "mftlab/adjoint.hpp"
#include "mftlab/attention.hpp"
#include "mftlab/experiment.hpp"
#include "mftlab/flow.hpp"
#include "mftlab/injectivity.hpp"
#include "mftlab/io.hpp"
#include "mftlab/ntk.hpp"
#include "mftlab/trainer.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace mftlab;

namespace {

// Reports cross the boundary as JSON text; the Python package decodes them.
std::string dump(const Json& j) { return j.dump(); }

IndependenceOptions independence_options(const std::string& mode, const std::optional<Vec>& direction,
                                         Index points, double scale, std::uint64_t seed, double threshold) {
  IndependenceOptions o;
  if (mode == "weak") o.mode = IndependenceMode::weak;
  else if (mode == "strong") o.mode = IndependenceMode::strong;
  else throw InvalidInputError("mode must be \"weak\" or \"strong\"");
  if (direction) o.direction = *direction;
  o.points = points;
  o.scale = scale;
  o.seed = seed;
  o.threshold = threshold;
  return o;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Mean-field transformer dynamics: attention flow, adjoint gradients, NTK and injectivity checks";

  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", error.ptr());
  py::register_exception<InvalidInputError>(m, "InvalidInputError", error.ptr());
  py::register_exception<DivergenceError>(m, "DivergenceError", error.ptr());
  py::register_exception<DomainError>(m, "DomainError", error.ptr());
  py::register_exception<SizeGateError>(m, "SizeGateError", error.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", error.ptr());

  py::class_<AttentionParams>(m, "AttentionParams")
      .def(py::init([](Mat Q, Vec q, Mat V) {
             AttentionParams p{std::move(Q), std::move(q), std::move(V)};
             p.validate();
             return p;
           }),
           py::arg("Q"), py::arg("q"), py::arg("V"))
      .def_static("zeros", &AttentionParams::zeros, py::arg("d"))
      .def_readwrite("Q", &AttentionParams::Q)
      .def_readwrite("q", &AttentionParams::q)
      .def_readwrite("V", &AttentionParams::V)
      .def_property_readonly("dim", &AttentionParams::dim)
      .def("squared_norm", &AttentionParams::squared_norm);

  py::class_<TokenCloud>(m, "TokenCloud")
      .def(py::init([](Mat points, std::optional<Vec> weights) {
             TokenCloud c = TokenCloud::uniform(std::move(points));
             if (weights) c.weights = *weights;
             c.validate();
             return c;
           }),
           py::arg("points"), py::arg("weights") = std::nullopt)
      .def_static("dirac", &TokenCloud::dirac, py::arg("y"))
      .def_readwrite("points", &TokenCloud::points)
      .def_readwrite("weights", &TokenCloud::weights)
      .def_property_readonly("dim", &TokenCloud::dim)
      .def_property_readonly("size", &TokenCloud::size)
      .def("mean", &TokenCloud::mean);

  py::class_<Sample>(m, "Sample")
      .def(py::init([](TokenCloud cloud, Vec input, Vec target) {
             Sample s{std::move(cloud), std::move(input), std::move(target)};
             s.validate();
             return s;
           }),
           py::arg("cloud"), py::arg("input"), py::arg("target"))
      .def_readwrite("cloud", &Sample::cloud)
      .def_readwrite("input", &Sample::input)
      .def_readwrite("target", &Sample::target);

  py::class_<DepthParameterization>(m, "DepthParameterization")
      .def(py::init(&DepthParameterization::from_heads), py::arg("heads"))
      .def_property_readonly("num_layers", &DepthParameterization::num_layers)
      .def_property_readonly("num_heads", &DepthParameterization::num_heads)
      .def_property_readonly("dim", &DepthParameterization::dim)
      .def("head", py::overload_cast<Index, Index>(&DepthParameterization::head, py::const_), py::arg("layer"),
           py::arg("index"))
      .def("heads", [](const DepthParameterization& rho) {
        std::vector<std::vector<AttentionParams>> out;
        for (const auto& layer : rho.layers) out.push_back(layer.heads);
        return out;
      });

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("eta", &TrainConfig::eta)
      .def_readwrite("steps", &TrainConfig::steps)
      .def_readwrite("fixup", &TrainConfig::fixup)
      .def_readwrite("init_scale", &TrainConfig::init_scale)
      .def_readwrite("v_perturbation", &TrainConfig::v_perturbation)
      .def_readwrite("v_clamp", &TrainConfig::v_clamp)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("log_every", &TrainConfig::log_every)
      .def_readwrite("lambda_every", &TrainConfig::lambda_every)
      .def_readwrite("max_halvings", &TrainConfig::max_halvings);

  py::class_<ProbeMeasure, std::shared_ptr<ProbeMeasure>>(m, "ProbeMeasure")
      .def_property_readonly("dim", &ProbeMeasure::dim)
      .def_property_readonly("name", &ProbeMeasure::name)
      .def_static("discrete", [](const TokenCloud& c) { return std::const_pointer_cast<ProbeMeasure>(ProbeMeasure::discrete(c)); })
      .def_static("dirac", [](const Vec& x) { return std::const_pointer_cast<ProbeMeasure>(ProbeMeasure::dirac(x)); })
      .def_static("uniform_cube", [](double r, Index d) { return std::const_pointer_cast<ProbeMeasure>(ProbeMeasure::uniform_cube(r, d)); },
                  py::arg("radius"), py::arg("dim"))
      .def_static("laplace", [](const Mat& s) { return std::const_pointer_cast<ProbeMeasure>(ProbeMeasure::laplace(s)); })
      .def_static("gaussian", [](const Vec& mu, const Mat& s) {
        return std::const_pointer_cast<ProbeMeasure>(ProbeMeasure::gaussian(mu, s));
      })
      .def_static("mixture", [](double a, const Vec& e, const Mat& s) {
        return std::const_pointer_cast<ProbeMeasure>(ProbeMeasure::mixture(a, e, s));
      })
      .def_static("convolve", [](std::shared_ptr<ProbeMeasure> a, std::shared_ptr<ProbeMeasure> b) {
        return std::const_pointer_cast<ProbeMeasure>(ProbeMeasure::convolve(a, b));
      })
      .def_static("translate", [](std::shared_ptr<ProbeMeasure> a, const Vec& b) {
        return std::const_pointer_cast<ProbeMeasure>(ProbeMeasure::translate(a, b));
      })
      .def_static("gaussian_smooth", [](std::shared_ptr<ProbeMeasure> a, const Mat& s) {
        return std::const_pointer_cast<ProbeMeasure>(ProbeMeasure::gaussian_smooth(a, s));
      });

  m.def("softmax_weights", &softmax_weights, py::arg("Q"), py::arg("q"), py::arg("cloud"), py::arg("x"));
  m.def("attention_single", &attention_single, py::arg("head"), py::arg("cloud"), py::arg("x"));
  m.def(
      "attention_meanfield",
      [](std::vector<AttentionParams> heads, const TokenCloud& cloud, const Vec& x) {
        return attention_meanfield(HeadEnsemble::uniform(std::move(heads)), cloud, x);
      },
      py::arg("heads"), py::arg("cloud"), py::arg("x"));

  m.def(
      "forward_tokens",
      [](const DepthParameterization& rho, const Sample& sample, const std::string& integrator) {
        if (integrator != "euler" && integrator != "rk4") throw InvalidInputError("integrator must be euler or rk4");
        const auto traj =
            forward_trajectory(rho, sample, integrator == "rk4" ? Integrator::rk4 : Integrator::euler);
        std::vector<Mat> out;
        for (const auto& s : traj.states) out.push_back(s.tokens());
        return out;
      },
      py::arg("rho"), py::arg("sample"), py::arg("integrator") = "euler",
      "Token matrices (query first) at every layer boundary.");
  m.def("risk", &risk, py::arg("rho"), py::arg("dataset"));
  m.def(
      "param_gradient",
      [](const DepthParameterization& rho, const Dataset& ds) { return param_gradient(rho, ds).blocks; },
      py::arg("rho"), py::arg("dataset"));
  m.def(
      "upper_gradient_norm",
      [](const DepthParameterization& rho, const Dataset& ds, bool v_only) {
        return upper_gradient_norm(param_gradient(rho, ds), v_only);
      },
      py::arg("rho"), py::arg("dataset"), py::arg("v_only") = false);
  m.def("cot_distance", &cot_distance, py::arg("a"), py::arg("b"));
  m.def("refine_depth", &refine_depth, py::arg("rho"), py::arg("factor"));

  m.def("init_parameterization", &init_parameterization, py::arg("L"), py::arg("H"), py::arg("d"),
        py::arg("config"));
  m.def(
      "_train",
      [](const DepthParameterization& rho0, const Dataset& ds, const TrainConfig& cfg) {
        auto rep = train(rho0, ds, cfg);
        py::dict traces;
        traces["step"] = rep.steps;
        traces["flow_time"] = rep.flow_time;
        traces["loss"] = rep.loss;
        traces["upper_gradient"] = rep.upper_gradient;
        traces["v_only_gradient"] = rep.v_only_gradient;
        traces["cot_displacement"] = rep.cot_displacement;
        traces["eta"] = rep.eta;
        traces["lambda0"] = rep.lambda0;
        return py::make_tuple(dump(to_json(rep)), traces, std::move(rep.final_rho));
      },
      py::arg("rho0"), py::arg("dataset"), py::arg("config"));

  m.def(
      "ntk_v_matrix",
      [](const DepthParameterization& rho, const Dataset& ds, Index layer) {
        return ntk_v_matrix(rho, forward_all(rho, ds), layer);
      },
      py::arg("rho"), py::arg("dataset"), py::arg("layer"));
  m.def(
      "ntk_full_matrix",
      [](const DepthParameterization& rho, const Dataset& ds, Index layer, Index size_gate) {
        return ntk_full_matrix(rho, forward_all(rho, ds), layer, size_gate);
      },
      py::arg("rho"), py::arg("dataset"), py::arg("layer"), py::arg("size_gate") = 512);
  m.def(
      "_lambda_min_profile",
      [](const DepthParameterization& rho, const Dataset& ds, bool full, Index size_gate) {
        NTKOptions o;
        o.full = full;
        o.size_gate = size_gate;
        o.keep_matrices = false;
        return dump(to_json(lambda_min_profile(rho, forward_all(rho, ds), o)));
      },
      py::arg("rho"), py::arg("dataset"), py::arg("full") = false, py::arg("size_gate") = 512);

  m.def(
      "cumulant", [](const ProbeMeasure& mu, const Vec& q) { return cumulant(mu, q); }, py::arg("measure"),
      py::arg("q"));
  m.def(
      "mgf_radius", [](const ProbeMeasure& mu, const Vec& q) { return mgf_radius(mu, q); }, py::arg("measure"),
      py::arg("q"));
  m.def(
      "_independence_sigma_min",
      [](const std::vector<std::shared_ptr<ProbeMeasure>>& measures, const std::string& mode,
         std::optional<Vec> direction, Index points, double scale, std::uint64_t seed, double threshold) {
        const std::vector<ProbePtr> fam(measures.begin(), measures.end());
        return dump(to_json(
            independence_sigma_min(fam, independence_options(mode, direction, points, scale, seed, threshold))));
      },
      py::arg("measures"), py::arg("mode") = "weak", py::arg("direction") = std::nullopt, py::arg("points") = 0,
      py::arg("scale") = 2.0, py::arg("seed") = 0, py::arg("threshold") = 1e-8);
  m.def(
      "_series_independence_check",
      [](const std::vector<std::shared_ptr<ProbeMeasure>>& measures, const Vec& e, Index terms) {
        const std::vector<ProbePtr> fam(measures.begin(), measures.end());
        return dump(to_json(series_independence_check(fam, e, terms)));
      },
      py::arg("measures"), py::arg("direction"), py::arg("terms") = 0);
  m.def(
      "_pairwise_difference_condition",
      [](const std::vector<TokenCloud>& clouds) { return dump(to_json(check_pairwise_difference_condition(clouds))); },
      py::arg("clouds"));
  m.def("softmax_max_gap", &softmax_max_gap, py::arg("cloud"), py::arg("direction"), py::arg("s"));

  m.def(
      "_run_config",
      [](const std::string& path, const std::string& out_dir, Index workers) {
        const auto cfg = load_config(path);
        RunOptions o;
        o.out_dir = out_dir;
        o.workers = workers;
        return dump(run(cfg, o).to_json());
      },
      py::arg("config_path"), py::arg("out_dir"), py::arg("workers") = 1, py::call_guard<py::gil_scoped_release>());

  m.attr("__version__") = version_string();
}
