#pragma once

// Batch front door: strict JSON scenario configurations, a validator that
// reports every violation with its key path, and a runner that emits
// deterministic artifacts (analysis.json, timeseries.csv, histogram.csv,
// manifest.json). Re-running a config byte-reproduces everything except the
// manifest's wall time.

#include <mnl/composite.hpp>
#include <mnl/hopf.hpp>
#include <mnl/linear.hpp>
#include <mnl/report_io.hpp>
#include <mnl/sde.hpp>
#include <mnl/version.hpp>

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mnl {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& message)
      : std::runtime_error(path + ": " + message), path_(std::move(path)) {}

  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct Diagnostic {
  std::string path;
  std::string message;
};

using Json = nlohmann::json;

namespace config_detail {

class Checker {
 public:
  std::vector<Diagnostic> diagnostics;

  void fail(const std::string& path, const std::string& message) {
    diagnostics.push_back({path, message});
  }

  bool require_object(const Json& j, const std::string& path) {
    if (!j.is_object()) {
      fail(path, "expected an object");
      return false;
    }
    return true;
  }

  void check_keys(const Json& obj, const std::string& path,
                  const std::set<std::string>& allowed) {
    for (const auto& [key, value] : obj.items())
      if (!allowed.count(key))
        fail(path.empty() ? key : path + "." + key,
             "unknown key (strict configuration, typos are errors)");
  }

  const Json* get(const Json& obj, const std::string& path,
                  const std::string& key, bool required) {
    if (auto it = obj.find(key); it != obj.end()) return &*it;
    if (required) fail(join(path, key), "required key is missing");
    return nullptr;
  }

  std::optional<double> number(const Json& obj, const std::string& path,
                               const std::string& key, bool required) {
    const Json* j = get(obj, path, key, required);
    if (!j) return std::nullopt;
    if (!j->is_number()) {
      fail(join(path, key), "expected a number");
      return std::nullopt;
    }
    return j->get<double>();
  }

  std::optional<std::string> text(const Json& obj, const std::string& path,
                                  const std::string& key, bool required) {
    const Json* j = get(obj, path, key, required);
    if (!j) return std::nullopt;
    if (!j->is_string()) {
      fail(join(path, key), "expected a string");
      return std::nullopt;
    }
    return j->get<std::string>();
  }

  static std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
  }
};

inline std::optional<Eigen::MatrixXd> parse_matrix(Checker& ck, const Json& j,
                                                   const std::string& path,
                                                   int rows, int cols) {
  if (!j.is_array() || static_cast<int>(j.size()) != rows) {
    ck.fail(path, "expected a " + std::to_string(rows) + "x" +
                      std::to_string(cols) + " array of numbers");
    return std::nullopt;
  }
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const Json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<int>(row.size()) != cols) {
      ck.fail(path + "[" + std::to_string(r) + "]",
              "expected " + std::to_string(cols) + " numbers");
      return std::nullopt;
    }
    for (int c = 0; c < cols; ++c) {
      const Json& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) {
        ck.fail(path + "[" + std::to_string(r) + "][" + std::to_string(c) + "]",
                "expected a number");
        return std::nullopt;
      }
      m(r, c) = v.get<double>();
    }
  }
  return m;
}

inline std::optional<Eigen::VectorXd> parse_vector(Checker& ck, const Json& j,
                                                   const std::string& path,
                                                   int size) {
  if (!j.is_array() || static_cast<int>(j.size()) != size) {
    ck.fail(path, "expected an array of " + std::to_string(size) + " numbers");
    return std::nullopt;
  }
  Eigen::VectorXd v(size);
  for (int i = 0; i < size; ++i) {
    const Json& x = j[static_cast<std::size_t>(i)];
    if (!x.is_number()) {
      ck.fail(path + "[" + std::to_string(i) + "]", "expected a number");
      return std::nullopt;
    }
    v[i] = x.get<double>();
  }
  return v;
}

}  // namespace config_detail

enum class ScenarioKind { kLinear, kComposite, kHopf, kFreeMeasurement };

struct ScenarioOutputs {
  std::filesystem::path dir = "out";
  bool csv = true;
  bool json = true;
};

struct ScenarioConfig {
  Json doc;  // verbatim configuration echo
  ScenarioKind kind = ScenarioKind::kLinear;

  // linear / composite / free-measurement
  std::optional<Expr> observable;
  double kappa = 0.0;
  int n_dof = 1;

  std::optional<LinearSystem2> linear_system;
  std::optional<OscillatorPair> pair;
  std::optional<HopfParams> hopf;

  std::optional<InitialCondition> initial;
  EnsembleConfig ensemble;
  int threads = 1;

  // hopf histogram controls
  int bins = 32;
  double burn_in = 0.0;
  double sample_stride = 0.5;

  ScenarioOutputs outputs;
};

namespace config_detail {

inline void parse_ensemble(Checker& ck, const Json& doc, ScenarioConfig& out) {
  const Json* ens = ck.get(doc, "", "ensemble", true);
  if (!ens) return;
  if (!ck.require_object(*ens, "ensemble")) return;
  ck.check_keys(*ens, "ensemble",
                {"n_traj", "dt", "t_final", "seed", "record_times",
                 "record_every", "threads"});

  if (auto v = ck.number(*ens, "ensemble", "n_traj", true)) {
    if (*v < 1 || *v != std::floor(*v))
      ck.fail("ensemble.n_traj", "must be a positive integer");
    else
      out.ensemble.n_traj = static_cast<std::int64_t>(*v);
  }
  if (auto v = ck.number(*ens, "ensemble", "dt", true)) {
    if (!(*v > 0))
      ck.fail("ensemble.dt", "must be positive");
    else
      out.ensemble.dt = *v;
  }
  if (auto v = ck.number(*ens, "ensemble", "t_final", true)) {
    if (!(*v > 0))
      ck.fail("ensemble.t_final", "must be positive");
    else
      out.ensemble.t_final = *v;
  }
  if (auto v = ck.number(*ens, "ensemble", "seed", true)) {
    if (*v < 0 || *v != std::floor(*v))
      ck.fail("ensemble.seed", "must be a nonnegative integer");
    else
      out.ensemble.seed = static_cast<std::uint64_t>(*v);
  }
  if (auto v = ck.number(*ens, "ensemble", "threads", false)) {
    if (*v < 1 || *v != std::floor(*v))
      ck.fail("ensemble.threads", "must be a positive integer");
    else
      out.threads = static_cast<int>(*v);
  }

  const bool has_times = ens->contains("record_times");
  const bool has_every = ens->contains("record_every");
  if (has_times == has_every) {
    ck.fail("ensemble", "exactly one of record_times or record_every is required");
    return;
  }
  if (has_every) {
    if (auto v = ck.number(*ens, "ensemble", "record_every", true)) {
      if (!(*v > 0)) {
        ck.fail("ensemble.record_every", "must be positive");
        return;
      }
      for (double t = *v; t <= out.ensemble.t_final + 1e-12; t += *v)
        out.ensemble.record_times.push_back(
            std::min(t, out.ensemble.t_final));
    }
  } else {
    const Json& times = (*ens)["record_times"];
    if (!times.is_array() || times.empty()) {
      ck.fail("ensemble.record_times", "expected a non-empty array of times");
      return;
    }
    double prev = -1.0;
    for (std::size_t i = 0; i < times.size(); ++i) {
      if (!times[i].is_number()) {
        ck.fail("ensemble.record_times[" + std::to_string(i) + "]",
                "expected a number");
        return;
      }
      const double t = times[i].get<double>();
      if (t < 0 || t > out.ensemble.t_final)
        ck.fail("ensemble.record_times[" + std::to_string(i) + "]",
                "must lie in [0, t_final]");
      if (t <= prev)
        ck.fail("ensemble.record_times[" + std::to_string(i) + "]",
                "must be strictly increasing");
      prev = t;
      out.ensemble.record_times.push_back(t);
    }
  }
}

inline void parse_initial(Checker& ck, const Json& doc, int dim,
                          ScenarioConfig& out) {
  const Json* init = ck.get(doc, "", "initial", true);
  if (!init) return;
  if (!ck.require_object(*init, "initial")) return;
  const auto type = ck.text(*init, "initial", "type", true);
  if (!type) return;
  if (*type == "point") {
    ck.check_keys(*init, "initial", {"type", "x"});
    const Json* x = ck.get(*init, "initial", "x", true);
    if (!x) return;
    if (auto v = parse_vector(ck, *x, "initial.x", dim))
      out.initial = InitialCondition::point(*v);
  } else if (*type == "gaussian") {
    ck.check_keys(*init, "initial", {"type", "mean", "cov"});
    const Json* mean = ck.get(*init, "initial", "mean", true);
    const Json* cov = ck.get(*init, "initial", "cov", true);
    if (!mean || !cov) return;
    const auto m = parse_vector(ck, *mean, "initial.mean", dim);
    const auto c = parse_matrix(ck, *cov, "initial.cov", dim, dim);
    if (m && c) {
      try {
        out.initial = InitialCondition::gaussian(*m, *c);
      } catch (const std::invalid_argument& e) {
        ck.fail("initial.cov", e.what());
      }
    }
  } else {
    ck.fail("initial.type", "must be 'point' or 'gaussian'");
  }
}

inline void parse_outputs(Checker& ck, const Json& doc, ScenarioConfig& out) {
  const Json* o = ck.get(doc, "", "outputs", false);
  if (!o) return;
  if (!ck.require_object(*o, "outputs")) return;
  ck.check_keys(*o, "outputs", {"dir", "csv", "json"});
  if (auto dir = ck.text(*o, "outputs", "dir", false)) out.outputs.dir = *dir;
  for (const char* key : {"csv", "json"}) {
    if (auto it = o->find(key); it != o->end()) {
      if (!it->is_boolean())
        ck.fail(std::string("outputs.") + key, "expected a boolean");
      else
        (std::string(key) == "csv" ? out.outputs.csv : out.outputs.json) =
            it->get<bool>();
    }
  }
}

inline void parse_observable_field(Checker& ck, const Json& doc, int n_dof,
                                   ScenarioConfig& out) {
  const auto text = ck.text(doc, "", "observable", true);
  if (!text) return;
  try {
    out.observable = mnl::parse_observable(*text, n_dof);
  } catch (const ParseError& e) {
    ck.fail("observable", e.what());
  }
}

inline void parse_kappa(Checker& ck, const Json& doc, ScenarioConfig& out) {
  if (auto v = ck.number(doc, "", "kappa", true)) {
    if (!(*v >= 0))
      ck.fail("kappa", "must be nonnegative");
    else
      out.kappa = *v;
  }
}

}  // namespace config_detail

// Validates the whole document and returns every violation found; an empty
// list means the configuration is runnable.
inline std::vector<Diagnostic> validate_config(const Json& doc,
                                               ScenarioConfig* parsed = nullptr) {
  using namespace config_detail;
  Checker ck;
  ScenarioConfig out;
  out.doc = doc;

  if (!doc.is_object()) {
    ck.fail("", "configuration must be a JSON object");
    return ck.diagnostics;
  }
  const auto scenario = ck.text(doc, "", "scenario", true);
  if (!scenario) return ck.diagnostics;

  if (*scenario == "linear") {
    out.kind = ScenarioKind::kLinear;
    ck.check_keys(doc, "",
                  {"scenario", "observable", "kappa", "drift", "initial",
                   "ensemble", "outputs"});
    out.n_dof = 1;
    parse_observable_field(ck, doc, 1, out);
    parse_kappa(ck, doc, out);

    if (const Json* drift = ck.get(doc, "", "drift", true)) {
      if (ck.require_object(*drift, "drift")) {
        ck.check_keys(*drift, "drift", {"matrix"});
        if (const Json* m = ck.get(*drift, "drift", "matrix", true)) {
          if (auto mat = parse_matrix(ck, *m, "drift.matrix", 2, 2)) {
            try {
              out.linear_system =
                  LinearSystem2((*mat)(0, 0), (*mat)(0, 1), (*mat)(1, 0),
                                (*mat)(1, 1));
            } catch (const std::invalid_argument& e) {
              ck.fail("drift.matrix",
                      std::string(e.what()) +
                          " (stability needs trace < 0 and determinant > 0)");
            }
          }
        }
      }
    }
    if (out.observable) {
      const CompiledField noise =
          CompiledField::from_exprs(noise_vector_exprs(*out.observable));
      if (noise.kind() != CompiledField::Kind::kConstant &&
          noise.kind() != CompiledField::Kind::kZero)
        ck.fail("observable",
                "the linear scenario needs an observable with constant "
                "gradient so the diffusion matrix is state independent");
    }
    parse_initial(ck, doc, 2, out);
    parse_ensemble(ck, doc, out);
  } else if (*scenario == "free-measurement") {
    out.kind = ScenarioKind::kFreeMeasurement;
    ck.check_keys(doc, "",
                  {"scenario", "observable", "kappa", "n_dof", "initial",
                   "ensemble", "outputs"});
    out.n_dof = 1;
    if (auto v = ck.number(doc, "", "n_dof", false)) {
      if (*v < 1 || *v != std::floor(*v))
        ck.fail("n_dof", "must be a positive integer");
      else
        out.n_dof = static_cast<int>(*v);
    }
    parse_observable_field(ck, doc, out.n_dof, out);
    parse_kappa(ck, doc, out);
    if (out.observable) {
      const CompiledField noise =
          CompiledField::from_exprs(noise_vector_exprs(*out.observable));
      if (noise.kind() != CompiledField::Kind::kConstant &&
          noise.kind() != CompiledField::Kind::kZero)
        ck.fail("observable",
                "the free-measurement scenario analyzes observables with "
                "constant gradient (conjugate-variable diffusion)");
    }
    parse_initial(ck, doc, 2 * out.n_dof, out);
    parse_ensemble(ck, doc, out);
  } else if (*scenario == "composite") {
    out.kind = ScenarioKind::kComposite;
    ck.check_keys(doc, "",
                  {"scenario", "observable", "kappa", "drift", "initial",
                   "ensemble", "outputs"});
    out.n_dof = 2;
    parse_observable_field(ck, doc, 2, out);
    parse_kappa(ck, doc, out);

    double m = 1.0, k = 1.0;
    if (const Json* drift = ck.get(doc, "", "drift", true)) {
      if (ck.require_object(*drift, "drift")) {
        ck.check_keys(*drift, "drift", {"hamiltonian", "m", "k"});
        if (auto name = ck.text(*drift, "drift", "hamiltonian", true))
          if (*name != "oscillator-pair")
            ck.fail("drift.hamiltonian",
                    "only 'oscillator-pair' is available");
        if (auto v = ck.number(*drift, "drift", "m", true)) {
          if (!(*v > 0))
            ck.fail("drift.m", "mass must be positive");
          else
            m = *v;
        }
        if (auto v = ck.number(*drift, "drift", "k", true)) {
          if (!(*v > 0))
            ck.fail("drift.k", "stiffness must be positive");
          else
            k = *v;
        }
      }
    }
    if (ck.diagnostics.empty()) out.pair = OscillatorPair(m, k, out.kappa);

    // The validated composite scenario measures the angular momentum.
    if (out.observable) {
      const Expr mz = angular_momentum_observable();
      std::vector<double> scratch;
      for (int i = 0; i < 8; ++i) {
        Eigen::Vector4d y;
        y << 0.3 * i - 1.1, 0.7 - 0.2 * i, 0.4 * i - 0.9, 1.3 - 0.3 * i;
        const std::span<const double> pt(y.data(), 4);
        if (std::fabs(out.observable->evaluate(pt, scratch) -
                      mz.evaluate(pt, scratch)) > 1e-12) {
          ck.fail("observable",
                  "the composite scenario measures the angular momentum "
                  "x1*p2 - x2*p1 (alias q<i> = x<i>)");
          break;
        }
      }
    }

    parse_initial(ck, doc, 4, out);
    parse_ensemble(ck, doc, out);

    // Admissibility of the implied stationary state.
    if (out.initial && out.pair) {
      const Eigen::Matrix4d raw = out.initial->raw_second_moment();
      const SecondMoments4 s(raw);
      const double E = 0.5 * (s.energy1(*out.pair) + s.energy2(*out.pair));
      const double M = s.angular_momentum();
      if (!(E > 0)) {
        ck.fail("initial", "initial moments must carry positive energy");
      } else if (!(std::fabs(M) < 2.0 * E / out.pair->omega0())) {
        ck.fail("initial",
                "initial moments give |M| = " + std::to_string(std::fabs(M)) +
                    " >= 2E/omega0 = " +
                    std::to_string(2.0 * E / out.pair->omega0()) +
                    "; the stationary covariance is only positive definite "
                    "below that bound");
      }
    }
  } else if (*scenario == "hopf") {
    out.kind = ScenarioKind::kHopf;
    ck.check_keys(doc, "", {"scenario", "drift", "ensemble", "histogram",
                            "outputs"});
    double omega = 0, eps = 0, c = 0, dj = 0;
    if (const Json* drift = ck.get(doc, "", "drift", true)) {
      if (ck.require_object(*drift, "drift")) {
        ck.check_keys(*drift, "drift", {"omega", "epsilon", "c", "Dj"});
        if (auto v = ck.number(*drift, "drift", "omega", true)) omega = *v;
        if (auto v = ck.number(*drift, "drift", "epsilon", true)) {
          if (!(*v > 0))
            ck.fail("drift.epsilon",
                    "stationary analysis requires epsilon > 0");
          else
            eps = *v;
        }
        if (auto v = ck.number(*drift, "drift", "c", true)) {
          if (!(*v > 0))
            ck.fail("drift.c", "saturation must be positive");
          else
            c = *v;
        }
        if (auto v = ck.number(*drift, "drift", "Dj", true)) {
          if (!(*v > 0))
            ck.fail("drift.Dj", "action diffusion must be positive");
          else
            dj = *v;
        }
      }
    }
    if (ck.diagnostics.empty()) out.hopf = HopfParams(omega, eps, c, dj);

    if (const Json* h = ck.get(doc, "", "histogram", false)) {
      if (ck.require_object(*h, "histogram")) {
        ck.check_keys(*h, "histogram", {"bins", "burn_in", "sample_stride"});
        if (auto v = ck.number(*h, "histogram", "bins", false)) {
          if (*v < 2 || *v != std::floor(*v))
            ck.fail("histogram.bins", "must be an integer >= 2");
          else
            out.bins = static_cast<int>(*v);
        }
        if (auto v = ck.number(*h, "histogram", "burn_in", false)) {
          if (!(*v > 0))
            ck.fail("histogram.burn_in", "must be positive");
          else
            out.burn_in = *v;
        }
        if (auto v = ck.number(*h, "histogram", "sample_stride", false)) {
          if (!(*v > 0))
            ck.fail("histogram.sample_stride", "must be positive");
          else
            out.sample_stride = *v;
        }
      }
    }
    parse_ensemble(ck, doc, out);
    if (out.hopf && ck.diagnostics.empty()) {
      const double burn =
          out.burn_in > 0 ? out.burn_in : 10.0 / out.hopf->epsilon;
      if (burn >= out.ensemble.t_final)
        ck.fail("ensemble.t_final",
                "must exceed the burn-in (" + std::to_string(burn) + ")");
    }
  } else {
    ck.fail("scenario",
            "must be one of 'linear', 'composite', 'hopf', 'free-measurement'");
    return ck.diagnostics;
  }

  parse_outputs(ck, doc, out);
  if (parsed && ck.diagnostics.empty()) *parsed = std::move(out);
  return ck.diagnostics;
}

inline ScenarioConfig parse_config(const Json& doc) {
  ScenarioConfig out;
  const auto diags = validate_config(doc, &out);
  if (!diags.empty())
    throw ConfigError(diags.front().path, diags.front().message);
  return out;
}

inline Json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError(path.string(), "cannot open configuration file");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string(), e.what());
  }
}

// Applies key=value overrides with dotted paths; every key must already
// exist so typos cannot silently add configuration.
inline Json apply_overrides(Json doc, const std::vector<std::string>& sets) {
  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError(kv, "override must look like key.path=value");
    const std::string path = kv.substr(0, eq);
    const std::string value_text = kv.substr(eq + 1);

    Json* node = &doc;
    std::size_t start = 0;
    std::vector<std::string> parts;
    while (true) {
      const auto dot = path.find('.', start);
      parts.push_back(path.substr(start, dot - start));
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node->is_object() || !node->contains(parts[i]))
        throw ConfigError(path, "override references a missing key");
      node = &(*node)[parts[i]];
    }
    if (!node->is_object() || !node->contains(parts.back()))
      throw ConfigError(path, "override references a missing key");

    Json parsed = Json::parse(value_text, nullptr, false);
    (*node)[parts.back()] = parsed.is_discarded() ? Json(value_text) : parsed;
  }
  return doc;
}

struct ScenarioArtifacts {
  Json analysis;
  std::string timeseries_csv;
  std::optional<std::string> histogram_csv;
  Json manifest;
  std::filesystem::path dir;
  std::vector<std::string> files;
};

namespace scenario_detail {

inline Json correlation_json(const CorrelationResult& corr) {
  Json j;
  j["degenerate"] = corr.degenerate;
  if (!corr.degenerate) j["value"] = corr.eta;
  return j;
}

inline Json linear_analysis(const ScenarioConfig& cfg) {
  const LinearSystem2& sys = *cfg.linear_system;
  const Eigen::VectorXd w =
      noise_vector(*cfg.observable, PhasePoint::zero(1));
  const DiffusionMatrix2 dm =
      DiffusionMatrix2::measurement(w[0], w[1], cfg.kappa);
  const StationaryMoments2 m = closed_form_moments(sys, dm);
  const Eigen::Matrix2d lyap = solve_lyapunov(sys.matrix(), dm.matrix());
  const Eigen::Matrix2d L = kinetic_matrix(sys, dm);
  const double residual = onsager_residual(sys, dm);

  Json a;
  a["drift"] = matrix_to_json(sys.matrix());
  a["diffusion"] = matrix_to_json(dm.matrix());
  a["m11"] = m.m11();
  a["m12"] = m.m12();
  a["m22"] = m.m22();
  a["lyapunov_max_diff"] =
      (m.covariance() - lyap).cwiseAbs().maxCoeff();
  a["kinetic_matrix"] = matrix_to_json(L);
  a["fluctuation_residual"] =
      (L + L.transpose() - 2.0 * dm.matrix()).cwiseAbs().maxCoeff();
  a["onsager_residual"] = residual;
  const auto corr = m.correlation();
  a["eta"] = corr.degenerate ? Json() : Json(corr.eta);
  a["eta_degenerate"] = corr.degenerate;
  a["covariance_det"] = m.det();
  a["covariance_det_identity"] =
      residual * residual / (sys.trace() * sys.trace() * sys.det());
  if (!m.singular()) a["entropy_matrix"] = matrix_to_json(m.entropy_matrix());
  if (sys.b == 0.0 && dm.D1 == 0.0 && dm.D == 0.0 && dm.D2 > 0.0) {
    const ZenoStationary z = zeno_stationary(sys, dm);
    Json zj;
    zj["frozen_value"] = z.frozen_value;
    zj["otilde_variance"] = z.otilde_variance;
    zj["normalization"] = z.normalization;
    a["zeno"] = zj;
  }
  return a;
}

inline Json free_measurement_analysis(const ScenarioConfig& cfg) {
  Json a;
  a["kappa"] = cfg.kappa;
  a["observable"] = cfg.observable->to_string();
  a["conjugate"] = conjugate_observable(*cfg.observable).to_string();
  a["conjugate_variance_rate"] = 2.0 * cfg.kappa;
  if (cfg.kappa > 0.0)
    a["kernel_value_origin_t1"] = measurement_kernel(0.0, 0.0, 1.0, cfg.kappa);
  return a;
}

inline Json moments4_json(const SecondMoments4& s) {
  return matrix_to_json(s.matrix());
}

struct CompositeDerived {
  double e1_0 = 0, e2_0 = 0, energy = 0, angular_momentum = 0;
};

inline CompositeDerived composite_initial(const ScenarioConfig& cfg) {
  const SecondMoments4 s(cfg.initial->raw_second_moment());
  CompositeDerived d;
  d.e1_0 = s.energy1(*cfg.pair);
  d.e2_0 = s.energy2(*cfg.pair);
  d.energy = 0.5 * (d.e1_0 + d.e2_0);
  d.angular_momentum = s.angular_momentum();
  return d;
}

inline Json composite_analysis(const ScenarioConfig& cfg,
                               const CompositeDerived& d) {
  Json a;
  a["initial"] = {{"E1", d.e1_0},
                  {"E2", d.e2_0},
                  {"E", d.energy},
                  {"M", d.angular_momentum}};
  a["predicted_relaxation_rate"] = 4.0 * cfg.kappa;
  const SecondMoments4 stat =
      stationary_moments(d.energy, d.angular_momentum, *cfg.pair);
  a["stationary_moments"] = moments4_json(stat);
  const auto [beta_inv, beta] =
      beta_matrices(d.energy, d.angular_momentum, *cfg.pair);
  a["beta_inverse"] = matrix_to_json(beta_inv);
  a["beta"] = matrix_to_json(beta);
  a["beta_product_error"] =
      (beta * beta_inv - Eigen::Matrix4d::Identity()).cwiseAbs().maxCoeff();
  const GibbsParams g =
      gibbs_parameters(d.energy, d.angular_momentum, *cfg.pair);
  a["gibbs"] = {{"beta", g.beta},
                {"Omega", g.Omega},
                {"KT_eff", g.KT_eff},
                {"E", g.E},
                {"M", g.M}};
  return a;
}

inline std::string composite_csv(const MomentReport& rep,
                                 const OscillatorPair& pair) {
  static constexpr const char* kNames[10] = {
      "x1x1", "x1p1", "x1x2", "x1p2", "p1p1",
      "p1x2", "p1p2", "x2x2", "x2p2", "p2p2"};
  std::string out = "t,E1,E2,x1p2,x2p1,e_total,mz";
  for (const char* n : kNames) out += std::string(",m_") + n;
  for (const char* n : kNames) out += std::string(",se_") + n;
  out += '\n';
  for (const MomentRecord& r : rep.records) {
    const SecondMoments4 s(r.second_moment);
    const double e1 = s.energy1(pair), e2 = s.energy2(pair);
    out += format_double(r.t);
    out += ',' + format_double(e1);
    out += ',' + format_double(e2);
    out += ',' + format_double(r.second_moment(0, 3));
    out += ',' + format_double(r.second_moment(2, 1));
    out += ',' + format_double(e1 + e2);
    out += ',' + format_double(s.angular_momentum());
    for (int i = 0; i < 4; ++i)
      for (int j = i; j < 4; ++j)
        out += ',' + format_double(r.second_moment(i, j));
    for (int i = 0; i < 4; ++i)
      for (int j = i; j < 4; ++j)
        out += ',' + format_double(r.stderr_second(i, j));
    out += '\n';
  }
  return out;
}

// Log-linear fit of the energy gap over the decade above 10% of the initial
// gap; null when the gap starts at the noise floor.
inline Json composite_rate_fit(const MomentReport& rep,
                               const OscillatorPair& pair) {
  std::vector<double> ts, gaps;
  for (const MomentRecord& r : rep.records) {
    const SecondMoments4 s(r.second_moment);
    ts.push_back(r.t);
    gaps.push_back(s.energy1(pair) - s.energy2(pair));
  }
  Json j;
  if (gaps.empty()) return j;
  const double g0 = gaps.front();
  const double sign = g0 >= 0 ? 1.0 : -1.0;
  std::vector<double> fit_t, fit_v;
  for (std::size_t i = 0; i < gaps.size(); ++i) {
    const double g = sign * gaps[i];
    if (g >= 0.1 * sign * g0 && g > 0) {
      fit_t.push_back(ts[i]);
      fit_v.push_back(g);
    }
  }
  if (fit_t.size() < 3 || std::fabs(g0) < 1e-9) return j;
  const RelaxationFit fit = estimate_relaxation_rate(fit_t, fit_v, 0.0);
  j["rate"] = fit.rate;
  j["r_squared"] = fit.r_squared;
  j["reliable"] = fit.reliable;
  j["points_used"] = fit_t.size();
  return j;
}

inline std::string hopf_timeseries_csv(const HopfRunResult& run) {
  std::string out = "t,mean_j,var_j,stderr_mean_j\n";
  for (const ActionMomentRecord& m : run.moments) {
    out += format_double(m.t);
    out += ',' + format_double(m.mean_j);
    out += ',' + format_double(m.var_j);
    out += ',' + format_double(m.stderr_mean);
    out += '\n';
  }
  return out;
}

inline std::string hopf_histogram_csv(const Histogram& h) {
  std::string out = "bin_left,bin_right,count,model_density\n";
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    const double lo = h.edges[b];
    const double hi = h.edges[b + 1];
    out += format_double(lo);
    out += ',' + format_double(hi);
    out += ',' + std::to_string(h.counts[b]);
    out += ',' + format_double(h.model_mass[b] / (hi - lo));
    out += '\n';
  }
  return out;
}

}  // namespace scenario_detail

// Runs the configured scenario and writes its artifacts. Returns everything
// that was written so callers can assert on values without re-reading files.
inline ScenarioArtifacts run_scenario(
    const Json& doc,
    std::optional<std::filesystem::path> out_dir_override = std::nullopt) {
  using namespace scenario_detail;
  const auto start = std::chrono::steady_clock::now();
  const ScenarioConfig cfg = parse_config(doc);

  ScenarioArtifacts art;
  art.dir = out_dir_override.value_or(cfg.outputs.dir);

  switch (cfg.kind) {
    case ScenarioKind::kLinear: {
      art.analysis = linear_analysis(cfg);
      const auto sys = SdeSystem::linear(
          cfg.linear_system->matrix(),
          MeasurementSpec(*cfg.observable, cfg.kappa));
      const MomentReport rep =
          simulate_ensemble(sys, *cfg.initial, cfg.ensemble, cfg.threads);
      art.timeseries_csv = to_csv(rep);
      const auto& last = rep.records.back();
      art.analysis["ensemble_final"] = {
          {"t", last.t},
          {"covariance", matrix_to_json(last.covariance)},
          {"stderr", matrix_to_json(last.stderr_second)}};
      break;
    }
    case ScenarioKind::kFreeMeasurement: {
      art.analysis = free_measurement_analysis(cfg);
      const auto sys =
          SdeSystem::drift_free(MeasurementSpec(*cfg.observable, cfg.kappa));
      const MomentReport rep =
          simulate_ensemble(sys, *cfg.initial, cfg.ensemble, cfg.threads);
      art.timeseries_csv = to_csv(rep);
      break;
    }
    case ScenarioKind::kComposite: {
      const CompositeDerived derived = composite_initial(cfg);
      art.analysis = composite_analysis(cfg, derived);
      const auto sys = SdeSystem::hamiltonian(
          pair_hamiltonian(*cfg.pair),
          MeasurementSpec(*cfg.observable, cfg.kappa));
      const MomentReport rep =
          simulate_ensemble(sys, *cfg.initial, cfg.ensemble, cfg.threads);
      art.timeseries_csv = composite_csv(rep, *cfg.pair);
      art.analysis["relaxation_fit"] = composite_rate_fit(rep, *cfg.pair);
      break;
    }
    case ScenarioKind::kHopf: {
      HopfRunConfig hc;
      hc.n_traj = cfg.ensemble.n_traj;
      hc.dt = cfg.ensemble.dt;
      hc.t_final = cfg.ensemble.t_final;
      hc.seed = cfg.ensemble.seed;
      hc.burn_in = cfg.burn_in;
      hc.sample_stride = cfg.sample_stride;
      hc.bins = cfg.bins;
      hc.record_times = cfg.ensemble.record_times;
      const HopfRunResult run = run_hopf_ensemble(*cfg.hopf, hc);

      const double ratio_closed = extremum_ratio(*cfg.hopf);
      const ActionDensity density(*cfg.hopf);
      const double ratio_density =
          density(cfg.hopf->limit_cycle_action()) / density(0.0);
      art.analysis["mode_action"] = cfg.hopf->limit_cycle_action();
      art.analysis["extremum_ratio"] = ratio_closed;
      art.analysis["extremum_ratio_density"] = ratio_density;
      art.analysis["l1_distance"] = run.action_histogram.l1_distance();
      art.analysis["samples"] = run.samples;
      art.timeseries_csv = hopf_timeseries_csv(run);
      art.histogram_csv = hopf_histogram_csv(run.action_histogram);
      break;
    }
  }

  std::filesystem::create_directories(art.dir);
  if (cfg.outputs.json) {
    write_text_file(art.dir / "analysis.json", art.analysis.dump(2) + "\n");
    art.files.push_back("analysis.json");
  }
  if (cfg.outputs.csv) {
    write_text_file(art.dir / "timeseries.csv", art.timeseries_csv);
    art.files.push_back("timeseries.csv");
    if (art.histogram_csv) {
      write_text_file(art.dir / "histogram.csv", *art.histogram_csv);
      art.files.push_back("histogram.csv");
    }
  }

  const auto stop = std::chrono::steady_clock::now();
  art.manifest["config"] = doc;
  art.manifest["seed"] = cfg.ensemble.seed;
  art.manifest["version"] = version_string();
  art.manifest["wall_time_seconds"] =
      std::chrono::duration<double>(stop - start).count();
  art.manifest["artifacts"] = art.files;
  write_text_file(art.dir / "manifest.json", art.manifest.dump(2) + "\n");
  art.files.push_back("manifest.json");
  return art;
}

}  // namespace mnl
