#pragma once

// Experiment harness: Gaussian fit, RBF regression and MC-dropout audit,
// each producing an ExperimentReport that `emit_report` writes as JSON, CSV
// and SVG.
//
// Every random stream is derived from the master seed and a stable label, so
// a report is reproducible from its config echo alone.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "varinf/elbo.hpp"
#include "varinf/families.hpp"
#include "varinf/io.hpp"
#include "varinf/metric.hpp"
#include "varinf/models.hpp"
#include "varinf/oracle.hpp"
#include "varinf/svg.hpp"

namespace varinf::bench {

/// FNV-1a, used to turn labels into seed streams that do not depend on
/// enumeration order.
inline std::uint64_t stream_id(std::string_view label) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t label_seed(std::uint64_t master, std::string_view label,
                                std::string_view purpose) {
  return derive_seed(master, stream_id(std::string(label) + "/" + std::string(purpose)));
}

struct FamilyMetrics {
  std::string label;
  std::string family;
  Index rank = 0;
  Index components = 1;
  Metric kl_p_q;
  Metric kl_q_p;
  Metric logq_theta_star;
  Metric elbo;
  Metric evidence_gap;
  double runtime_s = 0.0;
  Index steps_run = 0;
  std::string error;  // empty on success

  friend bool operator==(const FamilyMetrics&, const FamilyMetrics&) = default;
};

/// A file produced alongside the report (trace, final state, figure data).
struct Attachment {
  std::string path;    // relative to the output directory
  std::string format;  // "json", "csv" or "svg"; emitted only if requested
  std::string content;
};

struct ExperimentReport {
  std::string experiment;
  std::uint64_t seed = 0;
  Json config;   // resolved config; feeding it back reruns the experiment
  std::vector<FamilyMetrics> families;
  Json details = Json::object();
  bool record_runtime = false;
  std::vector<Attachment> attachments;  // not part of report.json

  const FamilyMetrics* find(std::string_view label) const {
    for (const auto& f : families) {
      if (f.label == label) return &f;
    }
    return nullptr;
  }
};

inline void to_json(Json& j, const FamilyMetrics& m) {
  j = Json{{"label", m.label},
           {"family", m.family},
           {"rank", m.rank},
           {"components", m.components},
           {"kl_p_q", metric_to_json(m.kl_p_q)},
           {"kl_q_p", metric_to_json(m.kl_q_p)},
           {"logq_theta_star", metric_to_json(m.logq_theta_star)},
           {"elbo", metric_to_json(m.elbo)},
           {"evidence_gap", metric_to_json(m.evidence_gap)},
           {"runtime_s", m.runtime_s},
           {"steps_run", m.steps_run},
           {"error", m.error}};
}

inline void from_json(const Json& j, FamilyMetrics& m) {
  m.label = j.at("label").get<std::string>();
  m.family = j.at("family").get<std::string>();
  m.rank = j.at("rank").get<Index>();
  m.components = j.at("components").get<Index>();
  m.kl_p_q = metric_from_json(j.at("kl_p_q"));
  m.kl_q_p = metric_from_json(j.at("kl_q_p"));
  m.logq_theta_star = metric_from_json(j.at("logq_theta_star"));
  m.elbo = metric_from_json(j.at("elbo"));
  m.evidence_gap = metric_from_json(j.at("evidence_gap"));
  m.runtime_s = j.at("runtime_s").get<double>();
  m.steps_run = j.at("steps_run").get<Index>();
  m.error = j.at("error").get<std::string>();
}

inline Json report_to_json(const ExperimentReport& r) {
  Json families = Json::array();
  for (const auto& f : r.families) families.push_back(f);
  return Json{{"experiment", r.experiment}, {"seed", r.seed},
              {"config", r.config},         {"families", families},
              {"details", r.details},       {"record_runtime", r.record_runtime}};
}

inline ExperimentReport report_from_json(const Json& j) {
  ExperimentReport r;
  r.experiment = j.at("experiment").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config = j.at("config");
  for (const auto& f : j.at("families")) r.families.push_back(f.get<FamilyMetrics>());
  r.details = j.at("details");
  r.record_runtime = j.at("record_runtime").get<bool>();
  return r;
}

/// One row per family. Runtime is "na" unless the report opted into
/// recording it, which keeps the table byte-identical across reruns.
inline std::string tables_csv(const ExperimentReport& r) {
  std::string out = "family,rank,kl_p_q,kl_q_p,logq_theta_star,elbo,runtime_s\n";
  for (const auto& f : r.families) {
    const Metric runtime = r.record_runtime ? Metric::finite(f.runtime_s) : Metric::na();
    out += f.label + "," + std::to_string(f.rank) + "," + f.kl_p_q.to_cell() + "," +
           f.kl_q_p.to_cell() + "," + f.logq_theta_star.to_cell() + "," + f.elbo.to_cell() + "," +
           runtime.to_cell() + "\n";
  }
  return out;
}

inline std::set<std::string> parse_formats(std::string_view list) {
  std::set<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    if (cur != "json" && cur != "csv" && cur != "svg") {
      throw ConfigError("unknown output format '" + cur + "'");
    }
    out.insert(cur);
    cur.clear();
  };
  for (char c : list) {
    if (c == ',') {
      flush();
    } else if (c != ' ') {
      cur += c;
    }
  }
  flush();
  if (out.empty()) throw ConfigError("no output formats requested");
  return out;
}

/// Writes report.json, tables.csv and the attachments whose format was
/// requested. Returns the paths written.
inline std::vector<std::filesystem::path> emit_report(const ExperimentReport& report,
                                                      const std::set<std::string>& formats,
                                                      const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::filesystem::path& rel, const std::string& content) {
    const auto path = dir / rel;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    write_text(path, content);
    written.push_back(path);
  };
  if (formats.count("json")) put("report.json", report_to_json(report).dump(2) + "\n");
  if (formats.count("csv")) put("tables.csv", tables_csv(report));
  for (const auto& a : report.attachments) {
    if (formats.count(a.format)) put(a.path, a.content);
  }
  return written;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Median where +inf counts as larger than any finite value and n/a entries
/// are skipped.
inline Metric median_metric(const std::vector<Metric>& values) {
  std::vector<double> v;
  for (const auto& m : values) {
    if (m.kind() != Metric::Kind::kNotAvailable) v.push_back(m.value());
  }
  if (v.empty()) return Metric::na();
  return Metric::from_double(median(v));
}

namespace detail {

inline TrainConfig default_train(Index steps, double lr0, double lr1, SamplingMode mode) {
  TrainConfig c;
  c.steps = steps;
  c.learning_rate = {lr0, lr1};
  c.mc_samples = 8;
  c.mode = mode;
  return c;
}

/// Train config echo without the seed, which is derived per family.
inline Json train_echo(const TrainConfig& c) {
  Json j = c;
  j.erase("seed");
  return j;
}

template <typename T>
T get_or(const Json& j, const char* key, T fallback) {
  try {
    return j.value(key, fallback);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline void attach_training(ExperimentReport& r, const std::string& label, const TrainTrace& t) {
  r.attachments.push_back({"traces/" + label + ".csv", "csv", trace_to_csv(t)});
  r.attachments.push_back({"states/" + label + ".json", "json", Json(t.final_state).dump(2) + "\n"});
}

inline FamilyMetrics failed_row(FamilyMetrics m, const std::string& why) {
  m.kl_p_q = m.kl_q_p = m.logq_theta_star = m.elbo = m.evidence_gap = Metric::na();
  m.error = why;
  return m;
}

inline FamilyMetrics atomic_row(FamilyMetrics m, bool has_truth) {
  m.kl_p_q = Metric::pos_inf();
  m.kl_q_p = Metric::pos_inf();
  m.logq_theta_star = has_truth ? Metric::neg_inf() : Metric::na();
  m.elbo = Metric::neg_inf();
  m.evidence_gap = Metric::pos_inf();
  return m;
}

struct FamilySpec {
  std::string label;
  FamilyTag tag;
  FamilyOptions options;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// fit-gaussian

struct FitGaussianConfig {
  std::uint64_t seed = 0;
  Index dim = 8;
  std::vector<Index> ranks{0, 1, 2, 4, 8};
  double eigen_min = 0.1;
  double eigen_max = 10.0;
  TrainConfig train = detail::default_train(4000, 0.02, 0.001, SamplingMode::kPaired);
  Index kl_mc_samples = 20000;
  bool record_runtime = false;
  // Optional multimodal section: a two-mode 2D target fitted by unimodal sN
  // and a Gaussian mixture.
  bool mixture = false;
  double bimodal_separation = 2.0;  // modes at +-s (1, 1)
  std::vector<Index> bimodal_ranks{0, 1, 2};
  Index mixture_components = 2;
  Index mixture_rank = 1;
  double mixture_perturbation = 2.0;
  Index restarts = 3;
  TrainConfig bimodal_train = detail::default_train(3000, 0.02, 0.001, SamplingMode::kPaired);
};

inline void to_json(Json& j, const FitGaussianConfig& c) {
  j = Json{{"seed", c.seed},
           {"dim", c.dim},
           {"ranks", c.ranks},
           {"eigen_range", {c.eigen_min, c.eigen_max}},
           {"train", detail::train_echo(c.train)},
           {"kl_mc_samples", c.kl_mc_samples},
           {"record_runtime", c.record_runtime},
           {"mixture", c.mixture},
           {"bimodal_separation", c.bimodal_separation},
           {"bimodal_ranks", c.bimodal_ranks},
           {"mixture_components", c.mixture_components},
           {"mixture_rank", c.mixture_rank},
           {"mixture_perturbation", c.mixture_perturbation},
           {"restarts", c.restarts},
           {"bimodal_train", detail::train_echo(c.bimodal_train)}};
}

inline void from_json(const Json& j, FitGaussianConfig& c) {
  check_keys(j,
             {"seed", "dim", "ranks", "eigen_range", "train", "kl_mc_samples", "record_runtime",
              "mixture", "bimodal_separation", "bimodal_ranks", "mixture_components",
              "mixture_rank", "mixture_perturbation", "restarts", "bimodal_train"},
             "fit-gaussian config");
  using detail::get_or;
  c.seed = get_or(j, "seed", c.seed);
  c.dim = get_or(j, "dim", c.dim);
  c.ranks = get_or(j, "ranks", c.ranks);
  if (j.contains("eigen_range")) {
    const auto r = get_or(j, "eigen_range", std::vector<double>{});
    if (r.size() != 2) throw ConfigError("eigen_range must be [min, max]");
    c.eigen_min = r[0];
    c.eigen_max = r[1];
  }
  if (j.contains("train")) from_json(j.at("train"), c.train);
  c.kl_mc_samples = get_or(j, "kl_mc_samples", c.kl_mc_samples);
  c.record_runtime = get_or(j, "record_runtime", c.record_runtime);
  c.mixture = get_or(j, "mixture", c.mixture);
  c.bimodal_separation = get_or(j, "bimodal_separation", c.bimodal_separation);
  c.bimodal_ranks = get_or(j, "bimodal_ranks", c.bimodal_ranks);
  c.mixture_components = get_or(j, "mixture_components", c.mixture_components);
  c.mixture_rank = get_or(j, "mixture_rank", c.mixture_rank);
  c.mixture_perturbation = get_or(j, "mixture_perturbation", c.mixture_perturbation);
  c.restarts = get_or(j, "restarts", c.restarts);
  if (j.contains("bimodal_train")) from_json(j.at("bimodal_train"), c.bimodal_train);
}

inline void validate(const FitGaussianConfig& c) {
  if (c.dim < 1) throw ConfigError("fit-gaussian: dim must be positive");
  for (Index k : c.ranks) {
    if (k < 0 || k > c.dim) throw ConfigError("fit-gaussian: rank outside [0, dim]");
  }
  if (!(c.eigen_min > 0 && c.eigen_max >= c.eigen_min)) {
    throw ConfigError("fit-gaussian: eigen_range must satisfy 0 < min <= max");
  }
  if (c.kl_mc_samples < 1) throw ConfigError("fit-gaussian: kl_mc_samples must be positive");
  if (c.mixture) {
    for (Index k : c.bimodal_ranks) {
      if (k < 0 || k > 2) throw ConfigError("fit-gaussian: bimodal rank outside [0, 2]");
    }
    if (c.mixture_components < 1 || c.mixture_rank < 0 || c.mixture_rank > 2) {
      throw ConfigError("fit-gaussian: bad mixture shape");
    }
    if (c.restarts < 1) throw ConfigError("fit-gaussian: restarts must be positive");
  }
}

/// Sigma0 = Q diag(lambda) Q^T with Q Haar and lambda log-uniform, mu0 ~ N(0, I).
inline GaussianDist random_spd_target(Index dim, double eigen_min, double eigen_max, Rng& rng) {
  const Matrix<double> q = haar_orthogonal(dim, rng);
  Vector<double> lambda(dim);
  for (Index i = 0; i < dim; ++i) {
    lambda[i] = std::exp(uniform(std::log(eigen_min), std::log(eigen_max), rng));
  }
  GaussianDist p;
  p.covariance = q * lambda.asDiagonal() * q.transpose();
  p.covariance = 0.5 * (p.covariance + p.covariance.transpose()).eval();
  p.mean = standard_normal(dim, rng);
  return p;
}

namespace detail {

inline Json dist_json(const GaussianDist& g) { return Json(g); }

/// Fit-quality metrics of a trained state against a normalized Gaussian p.
inline FamilyMetrics gaussian_fit_row(FamilyMetrics m, const FamilyState& q, const GaussianDist& p,
                                      Index n_mc, std::uint64_t eval_seed) {
  if (q.is_atomic()) return atomic_row(std::move(m), false);
  Rng rng(eval_seed);
  const KlReport pq = kl_p_to_family(p, q, n_mc, rng);
  const KlReport qp = kl_family_to_p(q, p, n_mc, rng);
  m.kl_p_q = pq.value;
  m.kl_q_p = qp.value;
  m.logq_theta_star = Metric::na();
  // log Z = 0, so ELBO = -KL[q||p] and the evidence gap is KL[q||p].
  m.elbo = qp.value.is_finite() ? Metric::finite(-qp.value.value()) : Metric::neg_inf();
  m.evidence_gap = qp.value;
  return m;
}

inline SvgCanvas marginal_canvas(const GaussianDist& p) {
  const double r0 = 3.0 * std::sqrt(p.covariance(0, 0));
  const double r1 = 3.0 * std::sqrt(p.covariance(1, 1));
  return SvgCanvas(520, 520, p.mean[0] - r0, p.mean[0] + r0, p.mean[1] - r1, p.mean[1] + r1);
}

}  // namespace detail

inline ExperimentReport cmd_fit_gaussian(const FitGaussianConfig& config) {
  validate(config);
  ExperimentReport r;
  r.experiment = "fit-gaussian";
  r.seed = config.seed;
  r.config = config;
  r.record_runtime = config.record_runtime;

  Rng target_rng(derive_seed(config.seed, stream_id("target")));
  const GaussianDist p = random_spd_target(config.dim, config.eigen_min, config.eigen_max, target_rng);
  const GaussianTarget target(p.mean, p.covariance);

  std::vector<detail::FamilySpec> specs;
  specs.push_back({"map", FamilyTag::kMap, {}});
  specs.push_back({"mean_field", FamilyTag::kMeanField, {}});
  for (Index k : config.ranks) {
    FamilyOptions o;
    o.rank = k;
    specs.push_back({"sn_r" + std::to_string(k), FamilyTag::kStructuredNormal, o});
  }

  std::vector<std::pair<std::string, FamilyState>> fitted;
  for (const auto& s : specs) {
    FamilyMetrics m;
    m.label = s.label;
    m.family = std::string(to_string(s.tag));
    m.rank = s.tag == FamilyTag::kStructuredNormal ? s.options.rank : 0;
    try {
      Rng init_rng(label_seed(config.seed, s.label, "init"));
      const FamilyState init = init_family(s.tag, target.shape(), s.options, init_rng);
      TrainConfig tc = config.train;
      tc.seed = label_seed(config.seed, s.label, "train");
      const TrainTrace trace = train(init, target, tc);
      m.runtime_s = trace.wall_seconds;
      m.steps_run = trace.steps();
      detail::attach_training(r, s.label, trace);
      m = detail::gaussian_fit_row(std::move(m), trace.final_state, p, config.kl_mc_samples,
                                   label_seed(config.seed, s.label, "eval"));
      fitted.emplace_back(s.label, trace.final_state);
    } catch (const Error& e) {
      m = detail::failed_row(std::move(m), e.what());
    }
    r.families.push_back(std::move(m));
  }
  {
    FamilyMetrics m;
    m.label = "mc_dropout";
    m.family = "mc_dropout";
    m = detail::failed_row(std::move(m), "");
    r.families.push_back(std::move(m));
  }

  r.details["target"] = detail::dist_json(p);
  r.details["flagged_choices"] = Json::array(
      {"target covariance Q diag(lambda) Q^T with Haar Q and log-uniform lambda in eigen_range",
       "target mean drawn from N(0, I)",
       "training budget (steps, learning-rate schedule, sample count, sampling mode)",
       "mc_dropout has no protocol for a distribution fit and is reported as na"});

  // Figure: 2-sigma contours of the (0, 1) marginal of p and of each fit.
  if (config.dim >= 2) {
    SvgCanvas svg = detail::marginal_canvas(p);
    svg.frame();
    const std::vector<Index> idx{0, 1};
    auto marginal = [&](const GaussianDist& g) {
      GaussianDist m2;
      m2.mean = g.mean(idx);
      m2.covariance = g.covariance(idx, idx);
      return m2;
    };
    const GaussianDist pm = marginal(p);
    svg.ellipse(pm.mean, pm.covariance, 2.0, "#000", 2.5);
    std::size_t color = 0;
    double label_y = p.mean[1] + 2.7 * std::sqrt(p.covariance(1, 1));
    const double label_x = p.mean[0] - 2.8 * std::sqrt(p.covariance(0, 0));
    svg.text(label_x, label_y, "target (black)");
    for (const auto& [label, state] : fitted) {
      if (!state.is_gaussian()) continue;
      const GaussianDist qm = marginal(to_gaussian(state));
      svg.ellipse(qm.mean, qm.covariance, 2.0, series_color(color), 1.5);
      label_y -= 0.25 * std::sqrt(p.covariance(1, 1));
      svg.text(label_x, label_y, "<tspan fill=\"" + series_color(color) + "\">" + label + "</tspan>");
      ++color;
    }
    r.attachments.push_back({"fit_gaussian_marginal.svg", "svg", svg.str()});
  }

  if (config.mixture) {
    const double s = config.bimodal_separation;
    Vector<double> m1(2);
    Vector<double> m2(2);
    m1 << s, s;
    m2 << -s, -s;
    const Matrix<double> eye = Matrix<double>::Identity(2, 2);
    const GaussianMixtureTarget bimodal({0.5, 0.5}, {GaussianTarget(m1, eye), GaussianTarget(m2, eye)});
    auto log_p = [&](const Vector<double>& x) { return bimodal.log_density(x); };

    std::vector<detail::FamilySpec> bspecs;
    for (Index k : config.bimodal_ranks) {
      FamilyOptions o;
      o.rank = k;
      bspecs.push_back({"bimodal_sn_r" + std::to_string(k), FamilyTag::kStructuredNormal, o});
    }
    {
      FamilyOptions o;
      o.rank = config.mixture_rank;
      o.components = config.mixture_components;
      o.mixture_perturbation = config.mixture_perturbation;
      bspecs.push_back({"bimodal_mixture_m" + std::to_string(config.mixture_components),
                        FamilyTag::kMixture, o});
    }

    Json restarts_json = Json::object();
    std::vector<std::pair<std::string, FamilyState>> bfitted;
    for (const auto& spec : bspecs) {
      FamilyMetrics m;
      m.label = spec.label;
      m.family = std::string(to_string(spec.tag));
      m.rank = spec.options.rank;
      m.components = spec.tag == FamilyTag::kMixture ? spec.options.components : 1;
      try {
        // Restarts differ only in initialization; the one with the highest
        // ELBO estimate is kept.
        TrainTrace best;
        double best_elbo = -std::numeric_limits<double>::infinity();
        Json elbos = Json::array();
        double total_time = 0.0;
        for (Index rs = 0; rs < config.restarts; ++rs) {
          const std::string tag = spec.label + "#" + std::to_string(rs);
          Rng init_rng(label_seed(config.seed, tag, "init"));
          const FamilyState init = init_family(spec.tag, bimodal.shape(), spec.options, init_rng);
          TrainConfig tc = config.bimodal_train;
          tc.seed = label_seed(config.seed, tag, "train");
          TrainTrace trace = train(init, bimodal, tc);
          total_time += trace.wall_seconds;
          Rng sel_rng(label_seed(config.seed, tag, "select"));
          const KlReport kl = kl_family_to_target_mc(trace.final_state, log_p, 4000, sel_rng);
          const double elbo = -kl.mc_estimate;
          elbos.push_back(elbo);
          if (rs == 0 || elbo > best_elbo) {
            best_elbo = elbo;
            best = std::move(trace);
          }
        }
        restarts_json[spec.label] = elbos;
        m.runtime_s = total_time;
        m.steps_run = best.steps();
        detail::attach_training(r, spec.label, best);
        Rng eval_rng(label_seed(config.seed, spec.label, "eval"));
        const KlReport qp = kl_family_to_target_mc(best.final_state, log_p, config.kl_mc_samples, eval_rng);
        KlReport pq;
        varinf::detail::fill_mc(
            pq, config.kl_mc_samples, [&] { return bimodal.sample(eval_rng); },
            [&](const Vector<double>& x) { return log_p(x) - log_density(best.final_state, x); });
        m.kl_q_p = qp.value;
        m.kl_p_q = Metric::from_double(pq.mc_estimate);
        m.logq_theta_star = Metric::na();
        m.elbo = qp.value.is_finite() ? Metric::finite(-qp.value.value()) : Metric::neg_inf();
        m.evidence_gap = qp.value;
        bfitted.emplace_back(spec.label, best.final_state);
      } catch (const Error& e) {
        m = detail::failed_row(std::move(m), e.what());
      }
      r.families.push_back(std::move(m));
    }
    r.details["bimodal"] = Json{{"modes", {vector_to_json(m1), vector_to_json(m2)}},
                                {"weights", {0.5, 0.5}},
                                {"covariance", "identity"},
                                {"restart_elbos", restarts_json}};
    r.details["flagged_choices"].push_back(
        "bimodal target geometry, mixture perturbation scale and best-of-restarts selection by ELBO");

    // Figure: density heatmap of the target with 2-sigma contours of the fits.
    const double lim = s + 3.5;
    SvgCanvas svg(520, 520, -lim, lim, -lim, lim);
    const int cells = 60;
    const double h = 2.0 * lim / cells;
    double peak = 0.0;
    std::vector<double> dens(static_cast<std::size_t>(cells * cells));
    for (int a = 0; a < cells; ++a) {
      for (int b = 0; b < cells; ++b) {
        Vector<double> x(2);
        x << -lim + (a + 0.5) * h, -lim + (b + 0.5) * h;
        dens[static_cast<std::size_t>(a * cells + b)] = std::exp(log_p(x));
        peak = std::max(peak, dens[static_cast<std::size_t>(a * cells + b)]);
      }
    }
    for (int a = 0; a < cells; ++a) {
      for (int b = 0; b < cells; ++b) {
        const double v = dens[static_cast<std::size_t>(a * cells + b)] / peak;
        if (v < 1e-3) continue;
        svg.rect(-lim + a * h, -lim + b * h, -lim + (a + 1) * h, -lim + (b + 1) * h, "#555", v);
      }
    }
    svg.frame();
    std::size_t color = 0;
    double label_y = lim - 0.6;
    for (const auto& [label, state] : bfitted) {
      const auto& c = series_color(color++);
      if (state.is_gaussian()) {
        const GaussianDist g = to_gaussian(state);
        svg.ellipse(g.mean, g.covariance, 2.0, c, 2.0);
      } else {
        for (Index comp = 0; comp < state.components; ++comp) {
          const GaussianParams<double> gp = gaussian_params(state, state.psi, comp);
          svg.ellipse(gp.mean, dense_covariance(gp.covariance()), 2.0, c, 2.0);
        }
      }
      svg.text(-lim + 0.3, label_y, "<tspan fill=\"" + c + "\">" + label + "</tspan>");
      label_y -= 0.5;
    }
    r.attachments.push_back({"fit_gaussian_bimodal.svg", "svg", svg.str()});
  }
  return r;
}

// ---------------------------------------------------------------------------
// rbf

struct RbfConfig {
  std::uint64_t seed = 0;
  Index centers = 10;
  Index n = 30;
  double noise = 0.25;
  double lower = -1.0;
  double upper = 1.0;
  double prior_precision = 1.0;
  std::vector<Index> ranks{0, 1, 2, 4, 10};
  double keep_prob = 0.5;
  Index grid_points = 101;
  TrainConfig train = detail::default_train(4000, 0.02, 0.001, SamplingMode::kPaired);
  Index kl_mc_samples = 0;  // MC cross-checks of the closed forms; 0 disables
  bool record_runtime = false;
};

inline void to_json(Json& j, const RbfConfig& c) {
  j = Json{{"seed", c.seed},
           {"centers", c.centers},
           {"n", c.n},
           {"noise", c.noise},
           {"interval", {c.lower, c.upper}},
           {"prior_precision", c.prior_precision},
           {"ranks", c.ranks},
           {"keep_prob", c.keep_prob},
           {"grid_points", c.grid_points},
           {"train", detail::train_echo(c.train)},
           {"kl_mc_samples", c.kl_mc_samples},
           {"record_runtime", c.record_runtime}};
}

inline void from_json(const Json& j, RbfConfig& c) {
  check_keys(j,
             {"seed", "centers", "n", "noise", "interval", "prior_precision", "ranks", "keep_prob",
              "grid_points", "train", "kl_mc_samples", "record_runtime"},
             "rbf config");
  using detail::get_or;
  c.seed = get_or(j, "seed", c.seed);
  c.centers = get_or(j, "centers", c.centers);
  c.n = get_or(j, "n", c.n);
  c.noise = get_or(j, "noise", c.noise);
  if (j.contains("interval")) {
    const auto r = get_or(j, "interval", std::vector<double>{});
    if (r.size() != 2) throw ConfigError("interval must be [lower, upper]");
    c.lower = r[0];
    c.upper = r[1];
  }
  c.prior_precision = get_or(j, "prior_precision", c.prior_precision);
  c.ranks = get_or(j, "ranks", c.ranks);
  c.keep_prob = get_or(j, "keep_prob", c.keep_prob);
  c.grid_points = get_or(j, "grid_points", c.grid_points);
  if (j.contains("train")) from_json(j.at("train"), c.train);
  c.kl_mc_samples = get_or(j, "kl_mc_samples", c.kl_mc_samples);
  c.record_runtime = get_or(j, "record_runtime", c.record_runtime);
}

inline void validate(const RbfConfig& c) {
  if (c.centers < 1 || c.n < 1) throw ConfigError("rbf: centers and n must be positive");
  if (c.centers > kMaxEnumeratedDropout) {
    throw GuardError("rbf: " + std::to_string(c.centers) +
                     " droppable weights exceed the enumeration limit");
  }
  if (!(c.noise > 0)) throw ConfigError("rbf: noise must be positive for the exact posterior");
  if (!(c.upper > c.lower)) throw ConfigError("rbf: interval must satisfy lower < upper");
  if (!(c.prior_precision > 0)) throw ConfigError("rbf: prior_precision must be positive");
  for (Index k : c.ranks) {
    if (k < 0 || k > c.centers) throw ConfigError("rbf: rank outside [0, centers]");
  }
  if (!(c.keep_prob >= 0 && c.keep_prob <= 1)) throw ConfigError("rbf: keep_prob outside [0, 1]");
  if (c.grid_points < 2) throw ConfigError("rbf: grid_points must be at least 2");
}

inline RbfModelSpec rbf_spec(const RbfConfig& c) {
  return RbfModelSpec::regular(c.centers, c.noise, c.lower, c.upper);
}

inline ExperimentReport cmd_rbf(const RbfConfig& config) {
  validate(config);
  ExperimentReport r;
  r.experiment = "rbf";
  r.seed = config.seed;
  r.config = config;
  r.record_runtime = config.record_runtime;

  const RbfModelSpec spec = rbf_spec(config);
  auto [problem, truth] = make_rbf_dataset(spec, config.n, derive_seed(config.seed, stream_id("data")));
  problem.prior = GaussianPrior{config.prior_precision};
  const RegressionTarget target(problem);
  const GaussianDist post = exact_linear_posterior(problem);
  const double evidence = log_evidence(problem);

  std::vector<detail::FamilySpec> specs;
  specs.push_back({"map", FamilyTag::kMap, {}});
  specs.push_back({"mean_field", FamilyTag::kMeanField, {}});
  for (Index k : config.ranks) {
    FamilyOptions o;
    o.rank = k;
    specs.push_back({"sn_r" + std::to_string(k), FamilyTag::kStructuredNormal, o});
  }
  {
    FamilyOptions o;
    o.keep_prob = config.keep_prob;
    specs.push_back({"mc_dropout", FamilyTag::kMcDropout, o});
  }

  std::optional<FamilyState> dropout_state;
  std::vector<std::pair<std::string, FamilyState>> fitted;
  for (const auto& s : specs) {
    FamilyMetrics m;
    m.label = s.label;
    m.family = std::string(to_string(s.tag));
    m.rank = s.tag == FamilyTag::kStructuredNormal ? s.options.rank : 0;
    try {
      Rng init_rng(label_seed(config.seed, s.label, "init"));
      const FamilyState init = init_family(s.tag, target.shape(), s.options, init_rng);
      TrainConfig tc = config.train;
      tc.seed = label_seed(config.seed, s.label, "train");
      if (s.tag == FamilyTag::kMcDropout) tc.mode = SamplingMode::kNaive;
      const TrainTrace trace = train(init, target, tc);
      m.runtime_s = trace.wall_seconds;
      m.steps_run = trace.steps();
      detail::attach_training(r, s.label, trace);
      const FamilyState& q = trace.final_state;
      if (q.is_atomic()) {
        m = detail::atomic_row(std::move(m), true);
        // The categorical value is confirmed by evaluating the density.
        m.logq_theta_star = log_density_of_truth(q, truth.theta);
      } else {
        Rng eval_rng(label_seed(config.seed, s.label, "eval"));
        const KlReport pq = kl_p_to_family(post, q, config.kl_mc_samples, eval_rng);
        const GaussianDist qg = to_gaussian(q);
        m.kl_p_q = pq.value;
        m.kl_q_p = Metric::finite(kl_gaussian_gaussian(qg, post));
        m.logq_theta_star = log_density_of_truth(q, truth.theta);
        const double elbo = exact_gaussian_elbo(problem, qg);
        m.elbo = Metric::finite(elbo);
        m.evidence_gap = Metric::finite(evidence - elbo);
      }
      if (s.tag == FamilyTag::kMcDropout) dropout_state = q;
      fitted.emplace_back(s.label, q);
    } catch (const Error& e) {
      m = detail::failed_row(std::move(m), e.what());
    }
    r.families.push_back(std::move(m));
  }

  // Figure data: predictive curves on a grid.
  Vector<double> grid(config.grid_points);
  for (Index i = 0; i < config.grid_points; ++i) {
    grid[i] = config.lower + (config.upper - config.lower) * static_cast<double>(i) /
                                 static_cast<double>(config.grid_points - 1);
  }
  const Matrix<double> phi = rbf_design_matrix(grid, spec);
  const Vector<double> truth_curve = phi * truth.theta;
  const Vector<double> post_mean = phi * post.mean;
  const Vector<double> post_sd =
      (phi * post.covariance * phi.transpose()).diagonal().array().sqrt().matrix();

  Json figure{{"x", vector_to_json(grid)},
              {"truth", vector_to_json(truth_curve)},
              {"posterior_mean", vector_to_json(post_mean)},
              {"posterior_sd", vector_to_json(post_sd)}};
  Json atoms = Json::array();
  Index atoms_equal_truth = 0;
  double weight_sum = 0.0;
  std::vector<std::pair<double, Vector<double>>> curves;
  if (dropout_state) {
    const DropoutMixture mix = enumerate_dropout(*dropout_state);
    for (std::size_t s = 0; s < mix.size(); ++s) {
      const Vector<double> a = mix.atom(s);
      if (a == truth.theta) ++atoms_equal_truth;
      const Vector<double> y = phi * a;
      atoms.push_back(Json{{"mask", mix.masks[s]}, {"weight", mix.weights[s]}, {"y", vector_to_json(y)}});
      weight_sum += mix.weights[s];
      curves.emplace_back(mix.weights[s], y);
    }
  }
  figure["atoms"] = atoms;
  r.attachments.push_back({"figure_rbf.json", "json", figure.dump() + "\n"});

  Json data_json = dataset_sidecar(spec, config.n, derive_seed(config.seed, stream_id("data")), truth);
  data_json["prior_precision"] = config.prior_precision;
  r.attachments.push_back({"dataset.csv", "csv", dataset_to_csv(problem, truth)});
  r.attachments.push_back({"dataset.json", "json", data_json.dump(2) + "\n"});

  r.details["log_evidence"] = evidence;
  r.details["exact_posterior"] = detail::dist_json(post);
  r.details["theta_star"] = vector_to_json(truth.theta);
  r.details["dropout_atoms"] = static_cast<Index>(atoms.size());
  r.details["dropout_weight_sum"] = weight_sum;
  r.details["dropout_atoms_equal_truth"] = atoms_equal_truth;
  r.details["flagged_choices"] = Json::array(
      {"data interval, sample size and RBF bandwidth (equal to the center spacing)",
       "training budget (steps, learning-rate schedule, sample count, sampling mode)",
       "mc_dropout trains with naive sampling"});

  // SVG: dropout atoms weighted by opacity, exact posterior band, truth, data.
  double y_lo = std::min(truth_curve.minCoeff(), problem.targets.minCoeff());
  double y_hi = std::max(truth_curve.maxCoeff(), problem.targets.maxCoeff());
  for (const auto& [w, y] : curves) {
    y_lo = std::min(y_lo, y.minCoeff());
    y_hi = std::max(y_hi, y.maxCoeff());
  }
  const double pad = 0.1 * (y_hi - y_lo + 1e-9);
  SvgCanvas svg(720, 480, config.lower, config.upper, y_lo - pad, y_hi + pad);
  svg.frame();
  const std::vector<double> xs(grid.data(), grid.data() + grid.size());
  double w_max = 0.0;
  for (const auto& c : curves) w_max = std::max(w_max, c.first);
  for (const auto& [w, y] : curves) {
    if (w <= 0.0) continue;
    svg.polyline(xs, std::vector<double>(y.data(), y.data() + y.size()), "#1f77b4", 0.8,
                 std::max(0.02, 0.6 * w / w_max));
  }
  auto curve = [](const Vector<double>& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  svg.polyline(xs, curve(post_mean + 2.0 * post_sd), "#d62728", 1.2);
  svg.polyline(xs, curve(post_mean - 2.0 * post_sd), "#d62728", 1.2);
  svg.polyline(xs, curve(post_mean), "#d62728", 2.0);
  svg.polyline(xs, curve(truth_curve), "#000", 2.0);
  for (Index i = 0; i < problem.size(); ++i) svg.circle(problem.inputs[i], problem.targets[i], 3.0, "#000");
  r.attachments.push_back({"rbf.svg", "svg", svg.str()});
  return r;
}

// ---------------------------------------------------------------------------
// dropout-audit

struct DropoutAuditConfig {
  std::uint64_t seed = 0;
  Index droppable = 10;  // P_d, one RBF weight each
  double keep_prob = 0.5;
  Index n = 30;
  double noise = 0.25;
  double lower = -1.0;
  double upper = 1.0;
  std::vector<double> x_star{-0.8, -0.4, 0.0, 0.4, 0.8};
  Index mc_draws = 100000;
  TrainConfig train = detail::default_train(2000, 0.01, 0.001, SamplingMode::kNaive);
  bool record_runtime = false;
};

inline void to_json(Json& j, const DropoutAuditConfig& c) {
  j = Json{{"seed", c.seed},
           {"droppable", c.droppable},
           {"keep_prob", c.keep_prob},
           {"n", c.n},
           {"noise", c.noise},
           {"interval", {c.lower, c.upper}},
           {"x_star", c.x_star},
           {"mc_draws", c.mc_draws},
           {"train", detail::train_echo(c.train)},
           {"record_runtime", c.record_runtime}};
}

inline void from_json(const Json& j, DropoutAuditConfig& c) {
  check_keys(j,
             {"seed", "droppable", "keep_prob", "n", "noise", "interval", "x_star", "mc_draws",
              "train", "record_runtime"},
             "dropout-audit config");
  using detail::get_or;
  c.seed = get_or(j, "seed", c.seed);
  c.droppable = get_or(j, "droppable", c.droppable);
  c.keep_prob = get_or(j, "keep_prob", c.keep_prob);
  c.n = get_or(j, "n", c.n);
  c.noise = get_or(j, "noise", c.noise);
  if (j.contains("interval")) {
    const auto r = get_or(j, "interval", std::vector<double>{});
    if (r.size() != 2) throw ConfigError("interval must be [lower, upper]");
    c.lower = r[0];
    c.upper = r[1];
  }
  c.x_star = get_or(j, "x_star", c.x_star);
  c.mc_draws = get_or(j, "mc_draws", c.mc_draws);
  if (j.contains("train")) from_json(j.at("train"), c.train);
  c.record_runtime = get_or(j, "record_runtime", c.record_runtime);
}

inline void validate(const DropoutAuditConfig& c) {
  if (c.droppable < 1) throw ConfigError("dropout-audit: droppable must be positive");
  if (c.droppable > kMaxEnumeratedDropout) {
    throw GuardError("dropout-audit: " + std::to_string(c.droppable) +
                     " droppable weights exceed the enumeration limit of " +
                     std::to_string(kMaxEnumeratedDropout));
  }
  if (!(c.keep_prob >= 0 && c.keep_prob <= 1)) throw ConfigError("dropout-audit: keep_prob outside [0, 1]");
  if (c.n < 1 || !(c.noise > 0) || !(c.upper > c.lower)) {
    throw ConfigError("dropout-audit: bad dataset settings");
  }
  if (c.mc_draws < 2) throw ConfigError("dropout-audit: mc_draws must be at least 2");
}

struct PredictiveCheck {
  double x = 0.0;
  double exact_mean = 0.0;
  double exact_variance = 0.0;
  double mc_mean = 0.0;
  double mc_mean_se = 0.0;
  double mc_variance = 0.0;
  double mc_variance_se = 0.0;

  double mean_z() const { return (mc_mean - exact_mean) / mc_mean_se; }
  double variance_z() const { return (mc_variance - exact_variance) / mc_variance_se; }
  bool within(double k) const { return std::abs(mean_z()) <= k && std::abs(variance_z()) <= k; }
};

/// Monte Carlo predictive at x*: z ~ Bernoulli(p) on droppable weights,
/// y = phi(x*) . (theta_hat * z) + sigma * eps.
inline PredictiveCheck mc_dropout_predictive(const FamilyState& state, const RegressionProblem& problem,
                                             double x_star, Index draws, Rng& rng) {
  const PredictiveMixture exact = dropout_predictive_exact(state, problem, x_star);
  const Vector<double> phi = rbf_features(problem, x_star);
  std::bernoulli_distribution keep(state.keep_prob);
  std::normal_distribution<double> normal(0.0, 1.0);
  double mean = 0.0;
  double m2 = 0.0;
  std::vector<double> ys(static_cast<std::size_t>(draws));
  for (Index d = 0; d < draws; ++d) {
    double f = 0.0;
    for (Index i = 0; i < state.dim; ++i) {
      const bool on = state.droppable[static_cast<std::size_t>(i)] ? keep(rng) : true;
      if (on) f += phi[i] * state.psi[i];
    }
    const double y = f + problem.noise * normal(rng);
    ys[static_cast<std::size_t>(d)] = y;
    const double delta = y - mean;
    mean += delta / static_cast<double>(d + 1);
    m2 += delta * (y - mean);
  }
  const auto n = static_cast<double>(draws);
  const double var = m2 / (n - 1.0);
  double m4 = 0.0;
  for (double y : ys) m4 += std::pow(y - mean, 4);
  m4 /= n;
  PredictiveCheck c;
  c.x = x_star;
  c.exact_mean = exact.mean();
  c.exact_variance = exact.variance();
  c.mc_mean = mean;
  c.mc_mean_se = std::sqrt(var / n);
  c.mc_variance = var;
  c.mc_variance_se = std::sqrt(std::max(m4 - var * var, 0.0) / n);
  return c;
}

inline ExperimentReport cmd_dropout_audit(const DropoutAuditConfig& config) {
  validate(config);
  ExperimentReport r;
  r.experiment = "dropout-audit";
  r.seed = config.seed;
  r.config = config;
  r.record_runtime = config.record_runtime;

  const RbfModelSpec spec = RbfModelSpec::regular(config.droppable, config.noise, config.lower, config.upper);
  const auto [problem, truth] =
      make_rbf_dataset(spec, config.n, derive_seed(config.seed, stream_id("data")));
  const RegressionTarget target(problem);

  FamilyOptions o;
  o.keep_prob = config.keep_prob;
  Rng init_rng(label_seed(config.seed, "mc_dropout", "init"));
  const FamilyState init = init_family(FamilyTag::kMcDropout, target.shape(), o, init_rng);
  TrainConfig tc = config.train;
  tc.seed = label_seed(config.seed, "mc_dropout", "train");
  const TrainTrace trace = train(init, target, tc);
  detail::attach_training(r, "mc_dropout", trace);
  const FamilyState& q = trace.final_state;

  FamilyMetrics m;
  m.label = "mc_dropout";
  m.family = "mc_dropout";
  m.runtime_s = trace.wall_seconds;
  m.steps_run = trace.steps();
  m = detail::atomic_row(std::move(m), true);
  m.logq_theta_star = log_density_of_truth(q, truth.theta);
  r.families.push_back(m);

  const DropoutMixture mix = enumerate_dropout(q);
  double weight_sum = 0.0;
  Index equal_truth = 0;
  for (std::size_t s = 0; s < mix.size(); ++s) {
    weight_sum += mix.weights[s];
    if (mix.atom(s) == truth.theta) ++equal_truth;
  }
  const std::size_t all_on = mix.size() - 1;

  Json checks = Json::array();
  Rng mc_rng(derive_seed(config.seed, stream_id("mc_predictive")));
  bool all_within = true;
  for (double x : config.x_star) {
    const PredictiveCheck c = mc_dropout_predictive(q, problem, x, config.mc_draws, mc_rng);
    all_within = all_within && c.within(3.0);
    checks.push_back(Json{{"x", c.x},
                          {"exact_mean", c.exact_mean},
                          {"exact_variance", c.exact_variance},
                          {"mc_mean", c.mc_mean},
                          {"mc_mean_se", c.mc_mean_se},
                          {"mc_variance", c.mc_variance},
                          {"mc_variance_se", c.mc_variance_se},
                          {"mean_z", c.mean_z()},
                          {"variance_z", c.variance_z()},
                          {"within_3se", c.within(3.0)}});
  }

  // Degenerate keep probabilities collapse to a single atom.
  auto reduction = [&](double p) {
    FamilyState s = q;
    s.keep_prob = p;
    Json out = Json::array();
    bool exact = true;
    Index atoms = 0;
    for (double x : config.x_star) {
      const PredictiveMixture pm = dropout_predictive_exact(s, problem, x);
      atoms = pm.size();
      const double expected = p == 1.0 ? rbf_features(problem, x).dot(q.psi) : 0.0;
      exact = exact && pm.size() == 1 && pm.means[0] == expected && pm.weights[0] == 1.0;
    }
    return Json{{"keep_prob", p}, {"atoms", atoms}, {"exact", exact}};
  };

  r.details["atom_count"] = static_cast<Index>(mix.size());
  r.details["weight_sum"] = weight_sum;
  r.details["map_atom_weight"] = mix.weights[all_on];
  r.details["expected_map_atom_weight"] = std::pow(config.keep_prob, static_cast<double>(config.droppable));
  r.details["atoms_equal_truth"] = equal_truth;
  r.details["predictive"] = checks;
  r.details["predictive_within_3se"] = all_within;
  r.details["reductions"] = Json::array({reduction(1.0), reduction(0.0)});
  r.details["theta_hat"] = vector_to_json(q.psi);
  r.details["theta_star"] = vector_to_json(truth.theta);
  r.details["flagged_choices"] = Json::array(
      {"audited model is an RBF regression with one droppable weight per center",
       "test inputs, Monte Carlo draw count and training budget"});
  return r;
}

}  // namespace varinf::bench
