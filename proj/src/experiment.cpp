#include "mftlab/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#ifndef MFTLAB_VERSION
#define MFTLAB_VERSION "unknown"
#endif

namespace mftlab {

const char* version_string() { return MFTLAB_VERSION; }

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::forward: return "forward";
    case ExperimentKind::train: return "train";
    case ExperimentKind::ntk: return "ntk";
    case ExperimentKind::injectivity: return "injectivity";
    case ExperimentKind::convergence_sweep: return "convergence-sweep";
  }
  return "unknown";
}

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

const Json& require_object(const Json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
  return j;
}

void reject_unknown(const Json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(join(path, key), "unknown field");
  }
}

double get_number(const Json& j, const std::string& path, const char* key, std::optional<double> fallback = {}) {
  if (!j.contains(key)) {
    if (fallback) return *fallback;
    throw ConfigError(join(path, key), "required field is missing");
  }
  const auto& v = j.at(key);
  if (!v.is_number()) throw ConfigError(join(path, key), "expected a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw ConfigError(join(path, key), "expected a finite number");
  return x;
}

Index get_index(const Json& j, const std::string& path, const char* key, std::optional<Index> fallback = {},
                Index min_value = 0) {
  if (!j.contains(key)) {
    if (fallback) return *fallback;
    throw ConfigError(join(path, key), "required field is missing");
  }
  const auto& v = j.at(key);
  if (!v.is_number_integer()) throw ConfigError(join(path, key), "expected an integer");
  const auto x = v.get<std::int64_t>();
  if (x < min_value) throw ConfigError(join(path, key), "must be >= " + std::to_string(min_value));
  return static_cast<Index>(x);
}

std::uint64_t get_seed(const Json& j, const std::string& path) {
  if (!j.contains("seed")) throw ConfigError(join(path, "seed"), "seed is mandatory for randomized generators");
  const auto& v = j.at("seed");
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
    throw ConfigError(join(path, "seed"), "expected a nonnegative integer");
  return v.get<std::uint64_t>();
}

bool get_bool(const Json& j, const std::string& path, const char* key, bool fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_boolean()) throw ConfigError(join(path, key), "expected a boolean");
  return j.at(key).get<bool>();
}

Vec get_vec(const Json& j, const std::string& path) {
  try {
    return json_to_vec(j);
  } catch (const InvalidInputError& e) {
    throw ConfigError(path, e.what());
  }
}

Mat get_mat(const Json& j, const std::string& path) {
  try {
    return json_to_mat(j);
  } catch (const InvalidInputError& e) {
    throw ConfigError(path, e.what());
  }
}

std::vector<double> get_number_list(const Json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) throw ConfigError(path, "expected a nonempty array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(path + "[" + std::to_string(i) + "]", "expected a number");
    out.push_back(j[i].get<double>());
  }
  return out;
}

ExperimentKind parse_kind(const Json& j) {
  if (!j.contains("kind")) throw ConfigError("kind", "required field is missing");
  if (!j.at("kind").is_string()) throw ConfigError("kind", "expected a string");
  const auto k = j.at("kind").get<std::string>();
  if (k == "forward") return ExperimentKind::forward;
  if (k == "train") return ExperimentKind::train;
  if (k == "ntk") return ExperimentKind::ntk;
  if (k == "injectivity") return ExperimentKind::injectivity;
  if (k == "convergence-sweep") return ExperimentKind::convergence_sweep;
  throw ConfigError("kind", "unknown experiment kind '" + k + "'");
}

Sample parse_sample(const Json& j, const std::string& path) {
  require_object(j, path);
  reject_unknown(j, path, {"cloud", "weights", "input", "target"});
  for (const char* key : {"cloud", "input", "target"})
    if (!j.contains(key)) throw ConfigError(join(path, key), "required field is missing");
  const Mat rows = get_mat(j.at("cloud"), join(path, "cloud"));
  Sample s;
  s.cloud.points = rows.transpose();
  s.cloud.weights = j.contains("weights") ? get_vec(j.at("weights"), join(path, "weights"))
                                          : Vec::Constant(rows.rows(), 1.0 / static_cast<double>(rows.rows()));
  s.input = get_vec(j.at("input"), join(path, "input"));
  s.target = get_vec(j.at("target"), join(path, "target"));
  try {
    s.validate();
  } catch (const Error& e) {
    throw ConfigError(path, e.what());
  }
  return s;
}

}  // namespace

ProbePtr parse_measure(const Json& j, const std::string& path) {
  require_object(j, path);
  if (!j.contains("type") || !j.at("type").is_string()) throw ConfigError(join(path, "type"), "expected a string");
  const auto type = j.at("type").get<std::string>();
  try {
    if (type == "discrete") {
      reject_unknown(j, path, {"type", "points", "weights"});
      const Mat rows = get_mat(j.at("points"), join(path, "points"));
      TokenCloud c = TokenCloud::uniform(rows.transpose());
      if (j.contains("weights")) c.weights = get_vec(j.at("weights"), join(path, "weights"));
      return ProbeMeasure::discrete(std::move(c));
    }
    if (type == "dirac") {
      reject_unknown(j, path, {"type", "point"});
      return ProbeMeasure::dirac(get_vec(j.at("point"), join(path, "point")));
    }
    if (type == "uniform_cube") {
      reject_unknown(j, path, {"type", "radius", "dim"});
      return ProbeMeasure::uniform_cube(get_number(j, path, "radius"), get_index(j, path, "dim", {}, 1));
    }
    if (type == "laplace") {
      reject_unknown(j, path, {"type", "covariance"});
      return ProbeMeasure::laplace(get_mat(j.at("covariance"), join(path, "covariance")));
    }
    if (type == "mixture") {
      reject_unknown(j, path, {"type", "offset", "direction", "covariance"});
      return ProbeMeasure::mixture(get_number(j, path, "offset"), get_vec(j.at("direction"), join(path, "direction")),
                                   get_mat(j.at("covariance"), join(path, "covariance")));
    }
    if (type == "gaussian") {
      reject_unknown(j, path, {"type", "mean", "covariance"});
      return ProbeMeasure::gaussian(get_vec(j.at("mean"), join(path, "mean")),
                                    get_mat(j.at("covariance"), join(path, "covariance")));
    }
    if (type == "convolve") {
      reject_unknown(j, path, {"type", "first", "second"});
      return ProbeMeasure::convolve(parse_measure(j.at("first"), join(path, "first")),
                                    parse_measure(j.at("second"), join(path, "second")));
    }
    if (type == "translate") {
      reject_unknown(j, path, {"type", "base", "shift"});
      return ProbeMeasure::translate(parse_measure(j.at("base"), join(path, "base")),
                                     get_vec(j.at("shift"), join(path, "shift")));
    }
    if (type == "gaussian_smooth") {
      reject_unknown(j, path, {"type", "base", "covariance"});
      return ProbeMeasure::gaussian_smooth(parse_measure(j.at("base"), join(path, "base")),
                                           get_mat(j.at("covariance"), join(path, "covariance")));
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Json::exception& e) {
    throw ConfigError(path, e.what());
  } catch (const Error& e) {
    throw ConfigError(path, e.what());
  }
  throw ConfigError(join(path, "type"), "unknown measure type '" + type + "'");
}

std::vector<std::string> metric_names(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::forward: return {"status", "risk", "max_displacement", "max_output_norm"};
    case ExperimentKind::train:
      return {"status", "initial_loss", "final_loss", "loss_ratio", "rate", "r_squared",
              "monotone", "halvings", "lambda0_init"};
    case ExperimentKind::ntk: return {"status", "lambda0", "lambda0_full", "min_eigen_ratio", "n_total"};
    case ExperimentKind::injectivity:
      return {"status", "passed", "sigma_min", "series_passed", "pairwise_passed", "witness_residual"};
    case ExperimentKind::convergence_sweep: return {"status", "cells", "completed_cells", "converged_cells"};
  }
  return {};
}

ExperimentConfig parse_config(const Json& j) {
  require_object(j, "");
  reject_unknown(j, "", {"kind", "dims", "integrator", "model", "dataset", "train", "ntk", "injectivity", "sweep",
                         "checks", "output_dir", "description"});
  ExperimentConfig c;
  c.source = j;
  c.kind = parse_kind(j);
  const bool needs_model = c.kind != ExperimentKind::injectivity;

  if (j.contains("output_dir")) {
    if (!j.at("output_dir").is_string()) throw ConfigError("output_dir", "expected a string");
    c.output_dir = j.at("output_dir").get<std::string>();
  }

  if (j.contains("integrator")) {
    const auto& v = j.at("integrator");
    if (v == "euler") c.integrator = Integrator::euler;
    else if (v == "rk4") c.integrator = Integrator::rk4;
    else throw ConfigError("integrator", "expected \"euler\" or \"rk4\"");
  }

  if (needs_model) {
    if (!j.contains("dims")) throw ConfigError("dims", "required field is missing");
    const Json& dims = require_object(j.at("dims"), "dims");
    reject_unknown(dims, "dims", {"d", "L", "H", "N", "n"});
    c.d = get_index(dims, "dims", "d", {}, 1);
    c.L = get_index(dims, "dims", "L", {}, 1);
    c.H = get_index(dims, "dims", "H", {}, 1);

    if (!j.contains("dataset")) throw ConfigError("dataset", "required field is missing");
    const Json& ds = require_object(j.at("dataset"), "dataset");
    const std::string gen = ds.contains("generator") && ds.at("generator").is_string()
                                ? ds.at("generator").get<std::string>()
                                : throw ConfigError("dataset.generator", "expected \"gaussian-iid\" or \"inline\"");
    if (gen == "gaussian-iid") {
      reject_unknown(ds, "dataset", {"generator", "seed", "scale", "target_offset", "duplicate_first"});
      c.dataset.source = DatasetSpec::Source::gaussian_iid;
      c.dataset.seed = get_seed(ds, "dataset");
      c.dataset.scale = get_number(ds, "dataset", "scale", 1.0);
      if (!(c.dataset.scale > 0.0)) throw ConfigError("dataset.scale", "must be positive");
      c.dataset.target_offset = get_number(ds, "dataset", "target_offset", 1e-2);
      c.dataset.duplicate_first = get_bool(ds, "dataset", "duplicate_first", false);
      c.N = get_index(dims, "dims", "N", {}, 1);
      if (!dims.contains("n")) throw ConfigError("dims.n", "required field is missing");
      if (dims.at("n").is_array()) {
        for (std::size_t i = 0; i < dims.at("n").size(); ++i) {
          const auto& v = dims.at("n")[i];
          if (!v.is_number_integer() || v.get<std::int64_t>() < 1)
            throw ConfigError("dims.n[" + std::to_string(i) + "]", "expected a positive integer");
          c.n.push_back(v.get<Index>());
        }
        if (static_cast<Index>(c.n.size()) != c.N) throw ConfigError("dims.n", "needs one entry per sample");
      } else {
        c.n.assign(static_cast<std::size_t>(c.N), get_index(dims, "dims", "n", {}, 1));
      }
    } else if (gen == "inline") {
      reject_unknown(ds, "dataset", {"generator", "samples"});
      c.dataset.source = DatasetSpec::Source::inline_samples;
      if (!ds.contains("samples") || !ds.at("samples").is_array() || ds.at("samples").empty())
        throw ConfigError("dataset.samples", "expected a nonempty array");
      for (std::size_t i = 0; i < ds.at("samples").size(); ++i) {
        const std::string p = "dataset.samples[" + std::to_string(i) + "]";
        Sample s = parse_sample(ds.at("samples")[i], p);
        if (s.cloud.dim() != c.d) throw ConfigError(p, "dimension differs from dims.d");
        c.n.push_back(s.cloud.size());
        c.dataset.samples.push_back(std::move(s));
      }
      c.N = static_cast<Index>(c.dataset.samples.size());
      if (dims.contains("N") && get_index(dims, "dims", "N") != c.N)
        throw ConfigError("dims.N", "differs from the number of inline samples");
    } else {
      throw ConfigError("dataset.generator", "expected \"gaussian-iid\" or \"inline\"");
    }

    if (!j.contains("model")) throw ConfigError("model", "required field is missing");
    const Json& m = require_object(j.at("model"), "model");
    reject_unknown(m, "model", {"fixup", "init_scale", "v_perturbation", "v_clamp", "seed"});
    c.train.fixup = get_bool(m, "model", "fixup", true);
    c.train.init_scale = get_number(m, "model", "init_scale", 1.0);
    c.train.v_perturbation = get_number(m, "model", "v_perturbation", 0.0);
    if (m.contains("v_clamp") && !m.at("v_clamp").is_null()) c.train.v_clamp = get_number(m, "model", "v_clamp");
    c.train.seed = get_seed(m, "model");
  }

  if (j.contains("train")) {
    const Json& t = require_object(j.at("train"), "train");
    reject_unknown(t, "train", {"eta", "steps", "log_every", "lambda_every", "max_halvings"});
    c.train.eta = get_number(t, "train", "eta", c.train.eta);
    c.train.steps = get_index(t, "train", "steps", c.train.steps, 1);
    c.train.log_every = get_index(t, "train", "log_every", c.train.log_every, 1);
    c.train.lambda_every = get_index(t, "train", "lambda_every", c.train.lambda_every);
    c.train.max_halvings = get_index(t, "train", "max_halvings", c.train.max_halvings);
  } else if (c.kind == ExperimentKind::train || c.kind == ExperimentKind::convergence_sweep) {
    throw ConfigError("train", "required field is missing");
  }
  try {
    c.train.validate();
  } catch (const InvalidInputError& e) {
    throw ConfigError("train", e.what());
  }

  if (j.contains("ntk")) {
    const Json& t = require_object(j.at("ntk"), "ntk");
    reject_unknown(t, "ntk", {"full", "size_gate"});
    c.ntk.full = get_bool(t, "ntk", "full", false);
    c.ntk.size_gate = get_index(t, "ntk", "size_gate", 512, 1);
  }

  if (c.kind == ExperimentKind::injectivity) {
    if (!j.contains("injectivity")) throw ConfigError("injectivity", "required field is missing");
    const Json& t = require_object(j.at("injectivity"), "injectivity");
    reject_unknown(t, "injectivity",
                   {"mode", "direction", "points", "scale", "seed", "threshold", "measures", "series", "witness"});
    auto& spec = c.injectivity;
    const std::string mode = t.contains("mode") && t.at("mode").is_string() ? t.at("mode").get<std::string>() : "weak";
    if (mode == "weak") spec.options.mode = IndependenceMode::weak;
    else if (mode == "strong") spec.options.mode = IndependenceMode::strong;
    else throw ConfigError("injectivity.mode", "expected \"weak\" or \"strong\"");
    if (!t.contains("measures") || !t.at("measures").is_array() || t.at("measures").empty())
      throw ConfigError("injectivity.measures", "expected a nonempty array");
    for (std::size_t i = 0; i < t.at("measures").size(); ++i)
      spec.measures.push_back(
          parse_measure(t.at("measures")[i], "injectivity.measures[" + std::to_string(i) + "]"));
    c.d = spec.measures.front()->dim();
    c.N = static_cast<Index>(spec.measures.size());
    spec.options.points = get_index(t, "injectivity", "points", 0);
    spec.options.scale = get_number(t, "injectivity", "scale", 2.0);
    if (!(spec.options.scale > 0.0)) throw ConfigError("injectivity.scale", "must be positive");
    spec.options.threshold = get_number(t, "injectivity", "threshold", 1e-8);
    if (spec.options.mode == IndependenceMode::weak) {
      spec.options.seed = get_seed(t, "injectivity");
    } else {
      if (!t.contains("direction")) throw ConfigError("injectivity.direction", "strong mode needs a direction");
      spec.options.direction = get_vec(t.at("direction"), "injectivity.direction");
      if (spec.options.direction.size() != c.d) throw ConfigError("injectivity.direction", "dimension differs");
      if (std::abs(spec.options.direction.norm() - 1.0) > 1e-10)
        throw ConfigError("injectivity.direction", "must be a unit vector");
      if (t.contains("seed")) spec.options.seed = get_seed(t, "injectivity");
    }
    spec.series = get_bool(t, "injectivity", "series", false);
    if (spec.series && spec.options.mode != IndependenceMode::strong)
      throw ConfigError("injectivity.series", "series check needs strong mode and a direction");
    if (t.contains("witness")) {
      const Json& w = require_object(t.at("witness"), "injectivity.witness");
      reject_unknown(w, "injectivity.witness", {"x1", "x2", "coefficients", "probes", "scale", "seed", "coordinate"});
      WitnessSpec ws;
      for (const char* key : {"x1", "x2"})
        if (!w.contains(key)) throw ConfigError(join("injectivity.witness", key), "required field is missing");
      ws.x1 = get_vec(w.at("x1"), "injectivity.witness.x1");
      ws.x2 = get_vec(w.at("x2"), "injectivity.witness.x2");
      if (ws.x1.size() != c.d || ws.x2.size() != c.d) throw ConfigError("injectivity.witness", "point dimension differs");
      if (w.contains("coefficients")) {
        ws.coefficients = get_vec(w.at("coefficients"), "injectivity.witness.coefficients");
        if (ws.coefficients->size() != c.N)
          throw ConfigError("injectivity.witness.coefficients", "needs one entry per measure");
      }
      ws.options.probes = get_index(w, "injectivity.witness", "probes", 64, 1);
      ws.options.scale = get_number(w, "injectivity.witness", "scale", 1.0);
      ws.options.seed = get_seed(w, "injectivity.witness");
      ws.options.coordinate = get_index(w, "injectivity.witness", "coordinate", 0);
      if (ws.options.coordinate >= c.d) throw ConfigError("injectivity.witness.coordinate", "out of range");
      for (std::size_t i = 0; i < spec.measures.size(); ++i)
        if (!std::holds_alternative<DiscreteProbe>(spec.measures[i]->variant()))
          throw ConfigError("injectivity.measures[" + std::to_string(i) + "]", "witness needs discrete measures");
      spec.witness = std::move(ws);
    }
  }

  if (c.kind == ExperimentKind::convergence_sweep) {
    if (!j.contains("sweep")) throw ConfigError("sweep", "required field is missing");
    const Json& s = require_object(j.at("sweep"), "sweep");
    reject_unknown(s, "sweep", {"init_scales", "target_offsets", "converge_ratio"});
    if (!s.contains("init_scales")) throw ConfigError("sweep.init_scales", "required field is missing");
    if (!s.contains("target_offsets")) throw ConfigError("sweep.target_offsets", "required field is missing");
    c.sweep.init_scales = get_number_list(s.at("init_scales"), "sweep.init_scales");
    c.sweep.target_offsets = get_number_list(s.at("target_offsets"), "sweep.target_offsets");
    for (double x : c.sweep.init_scales)
      if (!(x >= 0.0)) throw ConfigError("sweep.init_scales", "entries must be nonnegative");
    for (double x : c.sweep.target_offsets)
      if (!(x >= 0.0)) throw ConfigError("sweep.target_offsets", "entries must be nonnegative");
    c.sweep.converge_ratio = get_number(s, "sweep", "converge_ratio", 1e-6);
    if (c.dataset.source != DatasetSpec::Source::gaussian_iid)
      throw ConfigError("dataset.generator", "the sweep needs the gaussian-iid generator");
  }

  if (j.contains("checks")) {
    const Json& ch = require_object(j.at("checks"), "checks");
    const auto names = metric_names(c.kind);
    for (const auto& [metric, spec] : ch.items()) {
      const std::string p = join("checks", metric);
      if (std::find(names.begin(), names.end(), metric) == names.end())
        throw ConfigError(p, "unknown metric for kind " + to_string(c.kind));
      require_object(spec, p);
      reject_unknown(spec, p, {"min", "max", "equals"});
      CheckSpec cs;
      if (spec.contains("min")) cs.min = get_number(spec, p, "min");
      if (spec.contains("max")) cs.max = get_number(spec, p, "max");
      if (spec.contains("equals")) cs.equals = spec.at("equals");
      if (!cs.min && !cs.max && !cs.equals) throw ConfigError(p, "needs min, max or equals");
      c.checks.emplace(metric, std::move(cs));
    }
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const Error& e) {
    throw ConfigError("<file>", e.what());
  }
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(j);
}

Dataset build_dataset(const ExperimentConfig& config, const DepthParameterization& rho) {
  if (config.dataset.source == DatasetSpec::Source::inline_samples) return config.dataset.samples;
  Rng rng(config.dataset.seed);
  const Index d = config.d;
  Dataset ds;
  for (Index j = 0; j < config.N; ++j) {
    if (config.dataset.duplicate_first && j > 0) {
      ds.push_back(ds.front());
      continue;
    }
    Sample s;
    s.cloud = TokenCloud::uniform(rng.normal_mat(d, config.n[static_cast<std::size_t>(j)], config.dataset.scale));
    s.input = rng.normal_vec(d, config.dataset.scale);
    s.target = Vec::Zero(d);
    ds.push_back(std::move(s));
  }
  const double offset = config.dataset.target_offset;
  for (Index j = 0; j < config.N; ++j) {
    auto& s = ds[static_cast<std::size_t>(j)];
    if (config.dataset.duplicate_first && j > 0) {
      s.target = ds.front().target;
      continue;
    }
    if (offset >= 0.0) {
      const Vec out = forward_trajectory(rho, s, config.integrator).output();
      s.target = out + offset * rng.unit_vec(d);
    } else {
      s.target = rng.normal_vec(d, config.dataset.scale);
    }
  }
  return ds;
}

namespace {

class OutputWriter {
 public:
  OutputWriter(std::filesystem::path dir, std::vector<OutputFile>& files) : dir_(std::move(dir)), files_(files) {}

  void write(const std::string& name, const std::string& contents) {
    write_text_file(dir_ / name, contents);
    files_.push_back({name, sha256_hex(contents), contents.size()});
  }

 private:
  std::filesystem::path dir_;
  std::vector<OutputFile>& files_;
};

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

void log_line(const RunOptions& o, const std::string& msg) {
  if (o.verbose && o.log) *o.log << "[mftlab] " << msg << '\n';
}

void run_forward(const ExperimentConfig& c, OutputWriter& out, RunManifest& m) {
  const auto rho = init_parameterization(c.L, c.H, c.d, c.train);
  const auto ds = build_dataset(c, rho);
  std::vector<Trajectory> trajs;
  for (const auto& s : ds) trajs.push_back(forward_trajectory(rho, s, c.integrator));
  std::ostringstream csv;
  write_trajectory_csv(csv, trajs);
  out.write("trajectory.csv", csv.str());
  double disp = 0.0, out_norm = 0.0, total = 0.0;
  for (std::size_t j = 0; j < trajs.size(); ++j) {
    const Mat X0 = trajs[j].states.front().tokens();
    for (const auto& st : trajs[j].states) disp = std::max(disp, (st.tokens() - X0).colwise().norm().maxCoeff());
    out_norm = std::max(out_norm, trajs[j].output().norm());
    total += 0.5 * (trajs[j].output() - ds[j].target).squaredNorm();
  }
  m.summary["risk"] = total / static_cast<double>(ds.size());
  m.summary["max_displacement"] = disp;
  m.summary["max_output_norm"] = out_norm;
}

void run_train(const ExperimentConfig& c, OutputWriter& out, RunManifest& m) {
  const auto rho = init_parameterization(c.L, c.H, c.d, c.train);
  const auto ds = build_dataset(c, rho);
  const double lambda0 = lambda_min_profile(rho, forward_all(rho, ds), {false, 0, false}).lambda0;
  const TrainReport report = train(rho, ds, c.train);
  Json rj = to_json(report);
  rj["lambda0_init"] = lambda0;
  out.write("train_report.json", dump(rj));
  std::ostringstream trace;
  write_loss_trace_csv(trace, report);
  out.write("loss_trace.csv", trace.str());
  if (report.status == TrainStatus::completed) {
    std::ostringstream grad;
    write_gradient_csv(grad, param_gradient(report.final_rho, ds));
    out.write("gradient.csv", grad.str());
  }
  const double l0 = report.loss.front();
  const double l1 = report.loss.back();
  m.summary["initial_loss"] = l0;
  m.summary["final_loss"] = l1;
  m.summary["loss_ratio"] = l0 > 0.0 ? Json(l1 / l0) : Json(0.0);
  m.summary["rate"] = number_or_null(report.rate);
  m.summary["r_squared"] = number_or_null(report.r_squared);
  m.summary["monotone"] = report.monotone;
  m.summary["halvings"] = report.halvings;
  m.summary["lambda0_init"] = lambda0;
  if (report.status == TrainStatus::diverged) {
    m.status = "diverged";
    m.message = report.message;
  }
}

void run_ntk(const ExperimentConfig& c, OutputWriter& out, RunManifest& m) {
  const auto rho = init_parameterization(c.L, c.H, c.d, c.train);
  const auto ds = build_dataset(c, rho);
  const auto trajs = forward_all(rho, ds);
  NTKOptions opts = c.ntk;
  opts.keep_matrices = true;
  const auto report = lambda_min_profile(rho, trajs, opts);
  std::ostringstream kv;
  write_layer_matrices_csv(kv, report.k1);
  out.write("ntk_v.csv", kv.str());
  if (!report.full.empty()) {
    std::ostringstream kf;
    write_layer_matrices_csv(kf, report.full);
    out.write("ntk_full.csv", kf.str());
  }
  Json summary = to_json(report);
  summary["full_requested"] = c.ntk.full;
  summary["size_gate"] = c.ntk.size_gate;
  out.write("ntk_summary.json", dump(summary));
  double ratio = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < report.lambda_min_v.size(); ++l)
    ratio = std::min(ratio, report.lambda_max_v[l] > 0.0 ? report.lambda_min_v[l] / report.lambda_max_v[l] : 0.0);
  m.summary["lambda0"] = report.lambda0;
  m.summary["lambda0_full"] = report.full.empty() ? Json(nullptr) : Json(report.lambda0_full);
  m.summary["min_eigen_ratio"] = ratio;
  m.summary["n_total"] = report.n_total;
}

void run_injectivity(const ExperimentConfig& c, OutputWriter& out, RunManifest& m) {
  const auto& spec = c.injectivity;
  const auto report = independence_sigma_min(spec.measures, spec.options);
  Json rj;
  rj["independence"] = to_json(report);
  m.summary["passed"] = report.passed;
  m.summary["sigma_min"] = report.sigma_min;
  m.summary["series_passed"] = nullptr;
  m.summary["pairwise_passed"] = nullptr;
  m.summary["witness_residual"] = nullptr;

  if (spec.series) {
    const auto sr = series_independence_check(spec.measures, spec.options.direction);
    rj["series"] = to_json(sr);
    m.summary["series_passed"] = sr.passed;
  }
  std::vector<TokenCloud> clouds;
  for (const auto& mu : spec.measures)
    if (const auto* p = std::get_if<DiscreteProbe>(&mu->variant()); p && p->cloud.size() >= 2) clouds.push_back(p->cloud);
  if (clouds.size() == spec.measures.size() && clouds.size() >= 2) {
    const auto pr = check_pairwise_difference_condition(clouds);
    rj["pairwise_difference"] = to_json(pr);
    m.summary["pairwise_passed"] = pr.passed;
  }
  if (spec.witness) {
    const auto& w = *spec.witness;
    std::vector<CoupledState> samples;
    for (const auto& mu : spec.measures) samples.push_back({w.x1, std::get<DiscreteProbe>(mu->variant()).cloud});
    const Vec coeffs = w.coefficients ? *w.coefficients : report.coefficients;
    const auto wr = null_direction_witness(samples, w.x1, w.x2, coeffs, w.options);
    Json wj = to_json(wr);
    wj["coefficients"] = vec_to_json(coeffs);
    rj["witness"] = std::move(wj);
    m.summary["witness_residual"] = wr.residual;
  }
  out.write("injectivity_report.json", dump(rj));
}

void run_sweep(const ExperimentConfig& c, const RunOptions& o, OutputWriter& out, RunManifest& m) {
  const auto cells = convergence_sweep(c, o.workers);
  std::ostringstream csv;
  write_sweep_csv(csv, cells);
  out.write("sweep_summary.csv", csv.str());
  Index completed = 0, converged = 0;
  for (const auto& cell : cells) {
    completed += cell.status == "completed";
    converged += cell.converged;
  }
  m.summary["cells"] = cells.size();
  m.summary["completed_cells"] = completed;
  m.summary["converged_cells"] = converged;
}

bool evaluate_check(const CheckSpec& spec, const Json& value) {
  if (value.is_null()) return false;
  if (spec.equals && value != *spec.equals) return false;
  if (spec.min || spec.max) {
    if (!value.is_number()) return false;
    const double x = value.get<double>();
    if (spec.min && !(x >= *spec.min)) return false;
    if (spec.max && !(x <= *spec.max)) return false;
  }
  return true;
}

}  // namespace

bool RunManifest::checks_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

Json RunManifest::to_json() const {
  Json j;
  j["kind"] = to_string(kind);
  j["version"] = version;
  j["config"] = config;
  j["seeds"] = seeds;
  j["wall_clock_seconds"] = wall_clock_seconds;
  j["status"] = status;
  j["message"] = message;
  j["summary"] = summary;
  Json fs = Json::array();
  for (const auto& f : files) fs.push_back({{"path", f.path}, {"sha256", f.sha256}, {"bytes", f.bytes}});
  j["files"] = std::move(fs);
  Json cs = Json::array();
  for (const auto& c : checks) cs.push_back({{"metric", c.metric}, {"value", c.value}, {"passed", c.passed}});
  j["checks"] = std::move(cs);
  return j;
}

RunManifest run(const ExperimentConfig& config, const RunOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  std::filesystem::create_directories(options.out_dir);
  RunManifest m;
  m.kind = config.kind;
  m.config = config.source;
  m.version = version_string();
  m.summary = Json::object();
  Json seeds = Json::object();
  if (config.kind != ExperimentKind::injectivity) {
    seeds["model"] = config.train.seed;
    if (config.dataset.source == DatasetSpec::Source::gaussian_iid) seeds["dataset"] = config.dataset.seed;
  } else {
    seeds["grid"] = config.injectivity.options.seed;
    if (config.injectivity.witness) seeds["witness"] = config.injectivity.witness->options.seed;
  }
  m.seeds = seeds;

  OutputWriter out(options.out_dir, m.files);
  log_line(options, "running " + to_string(config.kind) + " into " + options.out_dir.string());
  try {
    switch (config.kind) {
      case ExperimentKind::forward: run_forward(config, out, m); break;
      case ExperimentKind::train: run_train(config, out, m); break;
      case ExperimentKind::ntk: run_ntk(config, out, m); break;
      case ExperimentKind::injectivity: run_injectivity(config, out, m); break;
      case ExperimentKind::convergence_sweep: run_sweep(config, options, out, m); break;
    }
  } catch (const DivergenceError& e) {
    m.status = "diverged";
    m.message = e.what();
  }
  m.summary["status"] = m.status;
  for (const auto& [metric, spec] : config.checks) {
    const Json value = m.summary.contains(metric) ? m.summary.at(metric) : Json(nullptr);
    m.checks.push_back({metric, value, evaluate_check(spec, value)});
    log_line(options, "check " + metric + ": " + (m.checks.back().passed ? "pass" : "FAIL"));
  }
  m.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_text_file(options.out_dir / "manifest.json", dump(m.to_json()));
  log_line(options, "status " + m.status + ", " + std::to_string(m.files.size()) + " files");
  return m;
}

std::vector<SweepCell> convergence_sweep(const ExperimentConfig& base, Index workers) {
  std::vector<SweepCell> cells;
  for (double s : base.sweep.init_scales)
    for (double o : base.sweep.target_offsets) {
      SweepCell c;
      c.init_scale = s;
      c.target_offset = o;
      cells.push_back(c);
    }
  auto run_cell = [&base](SweepCell& cell) {
    try {
      ExperimentConfig cfg = base;
      cfg.train.init_scale = cell.init_scale;
      cfg.dataset.target_offset = cell.target_offset;
      const auto rho = init_parameterization(cfg.L, cfg.H, cfg.d, cfg.train);
      const auto ds = build_dataset(cfg, rho);
      cell.lambda0 = lambda_min_profile(rho, forward_all(rho, ds), {false, 0, false}).lambda0;
      const auto report = train(rho, ds, cfg.train);
      cell.initial_loss = report.loss.front();
      cell.final_loss = report.loss.back();
      cell.rate = report.rate;
      cell.r_squared = report.r_squared;
      cell.status = report.status == TrainStatus::completed ? "completed" : "diverged";
      cell.message = report.message;
      cell.converged = report.status == TrainStatus::completed &&
                       (cell.initial_loss == 0.0 || cell.final_loss <= base.sweep.converge_ratio * cell.initial_loss);
    } catch (const std::exception& e) {
      cell.status = "error";
      cell.message = e.what();
    }
  };
  const auto n = static_cast<Index>(cells.size());
  const Index k = std::clamp<Index>(workers, 1, std::max<Index>(n, 1));
  std::atomic<Index> next{0};
  auto worker = [&] {
    for (Index i = next++; i < n; i = next++) run_cell(cells[static_cast<std::size_t>(i)]);
  };
  std::vector<std::thread> pool;
  for (Index t = 1; t < k; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return cells;
}

void write_sweep_csv(std::ostream& os, std::span<const SweepCell> cells) {
  os << "init_scale,target_offset,lambda0,initial_loss,final_loss,rate,r_squared,converged,status\n";
  for (const auto& c : cells)
    os << format_double(c.init_scale) << ',' << format_double(c.target_offset) << ',' << format_double(c.lambda0) << ','
       << format_double(c.initial_loss) << ',' << format_double(c.final_loss) << ',' << format_double(c.rate) << ','
       << format_double(c.r_squared) << ',' << (c.converged ? 1 : 0) << ',' << c.status << '\n';
}

}  // namespace mftlab
