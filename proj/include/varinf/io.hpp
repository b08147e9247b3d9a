#pragma once

// JSON and CSV encodings for family states, Gaussian distributions, training
// configurations and traces, and synthetic datasets.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "varinf/elbo.hpp"
#include "varinf/families.hpp"
#include "varinf/metric.hpp"
#include "varinf/models.hpp"
#include "varinf/oracle.hpp"

namespace varinf {

using Json = nlohmann::json;

/// Shortest round-trippable text for a double.
inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline Json vector_to_json(const Vector<double>& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Vector<double> vector_from_json(const Json& j) {
  if (!j.is_array()) throw ConfigError("expected a numeric array");
  Vector<double> v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Index>(i)] = j[i].get<double>();
  return v;
}

inline Json metric_to_json(const Metric& m) {
  if (m.is_finite()) return m.value();
  return m.to_cell();
}

inline Metric metric_from_json(const Json& j) {
  if (j.is_number()) return Metric::finite(j.get<double>());
  const auto s = j.get<std::string>();
  if (s == "inf") return Metric::pos_inf();
  if (s == "-inf") return Metric::neg_inf();
  if (s == "na") return Metric::na();
  throw ConfigError("bad metric value '" + s + "'");
}

inline void to_json(Json& j, const FamilyState& s) {
  j = Json{{"family", std::string(to_string(s.tag))},
           {"dim", s.dim},
           {"rank", s.rank},
           {"components", s.components},
           {"psi", vector_to_json(s.psi)}};
  if (s.tag == FamilyTag::kMcDropout) {
    j["keep_prob"] = s.keep_prob;
    Json mask = Json::array();
    for (auto d : s.droppable) mask.push_back(static_cast<int>(d));
    j["droppable"] = mask;
  }
}

inline void from_json(const Json& j, FamilyState& s) {
  s.tag = parse_family_tag(j.at("family").get<std::string>());
  s.dim = j.at("dim").get<Index>();
  s.rank = j.value("rank", Index{0});
  s.components = j.value("components", Index{1});
  s.psi = vector_from_json(j.at("psi"));
  s.keep_prob = j.value("keep_prob", 1.0);
  s.droppable.clear();
  if (j.contains("droppable")) {
    for (const auto& d : j.at("droppable")) s.droppable.push_back(static_cast<std::uint8_t>(d.get<int>()));
  }
  s.validate();
}

inline void to_json(Json& j, const GaussianDist& g) {
  Json cov = Json::array();
  for (Index r = 0; r < g.covariance.rows(); ++r) {
    for (Index c = 0; c < g.covariance.cols(); ++c) cov.push_back(g.covariance(r, c));
  }
  j = Json{{"dim", g.dim()}, {"mean", vector_to_json(g.mean)}, {"covariance", cov}};
}

inline void from_json(const Json& j, GaussianDist& g) {
  g.mean = vector_from_json(j.at("mean"));
  const Index p = g.mean.size();
  const Vector<double> flat = vector_from_json(j.at("covariance"));
  if (flat.size() != p * p) throw ShapeError("GaussianDist: covariance has wrong length");
  g.covariance = Matrix<double>(p, p);
  for (Index r = 0; r < p; ++r) {
    for (Index c = 0; c < p; ++c) g.covariance(r, c) = flat[r * p + c];
  }
}

inline void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"steps", c.steps},
           {"learning_rate", Json{{"initial", c.learning_rate.initial},
                                  {"final", c.learning_rate.final}}},
           {"mc_samples", c.mc_samples},
           {"minibatch_size", c.minibatch_size},
           {"mode", std::string(to_string(c.mode))},
           {"seed", c.seed},
           {"convergence_window", c.convergence_window},
           {"convergence_tolerance", c.convergence_tolerance},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"epsilon", c.epsilon},
           {"max_grad_norm", c.max_grad_norm}};
}

/// Reject keys outside `allowed` so typos in config files surface.
inline void check_keys(const Json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

/// Fields absent from `j` keep the values already in `c`.
inline void from_json(const Json& j, TrainConfig& c) {
  check_keys(j,
             {"steps", "learning_rate", "mc_samples", "minibatch_size", "mode", "seed",
              "convergence_window", "convergence_tolerance", "beta1", "beta2", "epsilon",
              "max_grad_norm"},
             "train config");
  try {
    c.steps = j.value("steps", c.steps);
    if (j.contains("learning_rate")) {
      const Json& lr = j.at("learning_rate");
      if (lr.is_number()) {
        c.learning_rate.initial = c.learning_rate.final = lr.get<double>();
      } else {
        check_keys(lr, {"initial", "final"}, "learning_rate");
        c.learning_rate.initial = lr.value("initial", c.learning_rate.initial);
        c.learning_rate.final = lr.value("final", c.learning_rate.initial);
      }
    }
    c.mc_samples = j.value("mc_samples", c.mc_samples);
    c.minibatch_size = j.value("minibatch_size", c.minibatch_size);
    if (j.contains("mode")) c.mode = parse_sampling_mode(j.at("mode").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.convergence_window = j.value("convergence_window", c.convergence_window);
    c.convergence_tolerance = j.value("convergence_tolerance", c.convergence_tolerance);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Json read_json(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

/// step,elbo,grad_norm
inline std::string trace_to_csv(const TrainTrace& trace) {
  std::string out = "step,elbo,grad_norm\n";
  for (std::size_t i = 0; i < trace.elbo.size(); ++i) {
    out += std::to_string(i) + "," + format_double(trace.elbo[i]) + "," +
           format_double(trace.grad_norm[i]) + "\n";
  }
  return out;
}

/// x,t,y_clean
inline std::string dataset_to_csv(const RegressionProblem& problem, const SyntheticTruth& truth) {
  std::string out = "x,t,y_clean\n";
  for (Index n = 0; n < problem.size(); ++n) {
    out += format_double(problem.inputs[n]) + "," + format_double(problem.targets[n]) + "," +
           format_double(truth.clean[n]) + "\n";
  }
  return out;
}

inline Json rbf_spec_to_json(const RbfModelSpec& spec) {
  return Json{{"centers", spec.centers},
              {"bandwidth", spec.bandwidth},
              {"noise", spec.noise},
              {"interval", {spec.lower, spec.upper}}};
}

inline Json dataset_sidecar(const RbfModelSpec& spec, Index n, std::uint64_t seed,
                            const SyntheticTruth& truth) {
  return Json{{"spec", rbf_spec_to_json(spec)},
              {"n", n},
              {"seed", seed},
              {"theta_star", vector_to_json(truth.theta)}};
}

}  // namespace varinf
