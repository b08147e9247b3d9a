// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Usage: varinf_acceptance <path-to-varinf_bench>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>

#include "test_support.hpp"
#include "varinf/bench.hpp"

using namespace varinf;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

double max_rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// Criterion 1
Outcome woodbury_correctness() {
  Rng rng(20240601);
  double worst_solve = 0.0;
  double worst_logdet = 0.0;
  double worst_logpdf = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Index p = 1 + static_cast<Index>(rng() % 32);
    const Index k = static_cast<Index>(rng() % (std::min<Index>(8, p) + 1));
    const auto c = vtest::random_cov(p, k, rng);
    const Matrix<double> s = vtest::dense(c);
    const Vector<double> v = standard_normal(p, rng);
    const Vector<double> mean = standard_normal(p, rng);
    const Vector<double> x = standard_normal(p, rng);
    const Vector<double> ref = vtest::dense_solve(s, v);
    worst_solve = std::max(worst_solve, (woodbury_solve(c, v) - ref).norm() / ref.norm());
    worst_logdet = std::max(worst_logdet, vtest::rel_err(woodbury_logdet(c), vtest::dense_logdet(s)));
    worst_logpdf =
        std::max(worst_logpdf, vtest::rel_err(structured_logpdf(x, mean, c), vtest::dense_logpdf(x, mean, s)));
  }
  return {worst_solve < 1e-10 && worst_logdet < 1e-10 && worst_logpdf < 1e-9,
          "max rel err solve " + fmt(worst_solve) + ", logdet " + fmt(worst_logdet) + ", logpdf " +
              fmt(worst_logpdf)};
}

// Criterion 2
Outcome gradient_fidelity() {
  const auto prob = vtest::linear_problem(8, 20, 0.7, 31);
  const RegressionTarget target(prob);
  struct Case {
    std::string name;
    FamilyTag tag;
    Index rank;
  };
  const std::vector<Case> cases{{"map", FamilyTag::kMap, 0},
                                {"mean_field", FamilyTag::kMeanField, 0},
                                {"sn_r1", FamilyTag::kStructuredNormal, 1},
                                {"sn_r4", FamilyTag::kStructuredNormal, 4},
                                {"mixture_m2", FamilyTag::kMixture, 1}};
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : cases) {
    Rng rng(32);
    FamilyOptions o;
    o.rank = c.rank;
    o.components = 2;
    FamilyState s = init_family(c.tag, target.shape(), o, rng);
    s.psi = vtest::generic_psi(s, rng);
    const auto noise = draw_noise(s, SamplingMode::kNaive, 4, rng);
    const Minibatch batch;
    const auto f = elbo_objective(s, target, noise, batch);
    const auto rev = evaluate_with_gradient(f, s.psi);
    const auto fd = finite_difference_gradient<long double>(f, s.psi, 1e-5);
    for (Index i = 0; i < s.psi.size(); ++i) {
      if (std::abs(fd[i]) <= 1e-8) continue;
      const double e = max_rel(rev.gradient[i], fd[i]);
      if (e > worst) {
        worst = e;
        worst_name = c.name;
      }
    }
  }
  return {worst < 1e-5, "max rel err " + fmt(worst) + (worst_name.empty() ? "" : " (" + worst_name + ")")};
}

// Criterion 3
Outcome sampling_moments() {
  Rng rng(41);
  const Index p = 6;
  const Index k = 2;
  FamilyState s;
  s.tag = FamilyTag::kStructuredNormal;
  s.dim = p;
  s.rank = k;
  s.psi = Vector<double>(s.expected_psi_size());
  s.psi.head(p) = standard_normal(p, rng);
  for (Index i = 0; i < p; ++i) s.psi[p + i] = uniform(-1.0, 0.5, rng);
  s.psi.tail(p * k) = standard_normal(p * k, rng);
  const GaussianParams<double> g = gaussian_params(s, s.psi);
  const Matrix<double> sigma = dense_covariance(g.covariance());

  auto moments = [&](SamplingMode mode, Index n) {
    const SampleBatch b = sample(s, mode, n, rng);
    Vector<double> mean = Vector<double>::Zero(p);
    for (const auto& d : b.draws) mean += d;
    mean /= static_cast<double>(n);
    Matrix<double> cov = Matrix<double>::Zero(p, p);
    for (const auto& d : b.draws) cov += (d - g.mean) * (d - g.mean).transpose();
    cov /= static_cast<double>(n);
    return std::make_pair((mean - g.mean).norm() / std::sqrt(sigma.trace()),
                          (cov - sigma).norm() / sigma.norm());
  };
  const auto [mean_err, cov_err] = moments(SamplingMode::kNaive, 200000);

  // Paired twins: perturbations are exact negatives, so the twin average is
  // mu up to the rounding of the final addition.
  const SampleBatch pb = sample(s, SamplingMode::kPaired, 2000, rng);
  double twin_ulps = 0.0;
  bool negated = true;
  for (Index i = 0; i < pb.size(); i += 2) {
    const Vector<double>& a = pb.draws[static_cast<std::size_t>(i)];
    const Vector<double>& b = pb.draws[static_cast<std::size_t>(i + 1)];
    const double scale = 1.0 + a.cwiseAbs().maxCoeff() + b.cwiseAbs().maxCoeff();
    twin_ulps = std::max(twin_ulps, (0.5 * (a + b) - g.mean).cwiseAbs().maxCoeff() /
                                        (std::numeric_limits<double>::epsilon() * scale));
    const Vector<double> da = structured_sample(Vector<double>(Vector<double>::Zero(p)), g.covariance(),
                                                pb.noise[static_cast<std::size_t>(i)].diag,
                                                pb.noise[static_cast<std::size_t>(i)].lowrank);
    const Vector<double> db = structured_sample(Vector<double>(Vector<double>::Zero(p)), g.covariance(),
                                                pb.noise[static_cast<std::size_t>(i + 1)].diag,
                                                pb.noise[static_cast<std::size_t>(i + 1)].lowrank);
    negated = negated && (da == -db);
  }

  // Unscented groups: (1/2K) sum z z^T over a group is the identity.
  double group_err = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto noise = draw_noise(s, SamplingMode::kUnscented, 2 * k, rng);
    Matrix<double> outer = Matrix<double>::Zero(k, k);
    for (const auto& z : noise) outer += z.lowrank * z.lowrank.transpose();
    outer /= static_cast<double>(2 * k);
    group_err = std::max(group_err, (outer - Matrix<double>::Identity(k, k)).norm());
  }
  const auto [umean_err, ucov_err] = moments(SamplingMode::kUnscented, 200000);

  const bool pass = mean_err < 2e-2 && cov_err < 2e-2 && negated && twin_ulps <= 4.0 &&
                    group_err < 2e-2 && umean_err < 2e-2 && ucov_err < 2e-2;
  return {pass, "naive mean " + fmt(mean_err) + " cov " + fmt(cov_err) + "; paired twins negated " +
                    (negated ? "yes" : "no") + ", twin mean off by " + fmt(twin_ulps) +
                    " ulp; unscented group " + fmt(group_err) + ", cov " + fmt(ucov_err)};
}

// Criterion 4
Outcome conjugate_recovery() {
  const auto prob = vtest::linear_problem(5, 40, 0.5, 51);
  const RegressionTarget target(prob);
  const auto post = exact_linear_posterior(prob);
  const double log_z = log_evidence(prob);
  FamilyOptions o;
  o.rank = 5;
  Rng rng(52);
  const FamilyState init = init_family(FamilyTag::kStructuredNormal, target.shape(), o, rng);
  TrainConfig tc;
  tc.steps = 6000;
  tc.learning_rate = {0.02, 0.0005};
  tc.mc_samples = 16;
  tc.mode = SamplingMode::kPaired;
  tc.seed = 53;
  const auto trace = train(init, target, tc);
  const GaussianDist q = to_gaussian(trace.final_state);
  const double elbo = exact_gaussian_elbo(prob, q);
  const double kl = kl_gaussian_gaussian(q, post);
  return {std::abs(log_z - elbo) < 0.1 && kl < 0.05,
          "log evidence " + fmt(log_z) + ", ELBO " + fmt(elbo) + ", KL[q||p*] " + fmt(kl)};
}

std::map<std::string, Metric> median_by_label(const std::vector<bench::ExperimentReport>& runs,
                                              Metric bench::FamilyMetrics::*field) {
  std::map<std::string, std::vector<Metric>> all;
  for (const auto& r : runs) {
    for (const auto& f : r.families) all[f.label].push_back(f.*field);
  }
  std::map<std::string, Metric> out;
  for (const auto& [label, v] : all) out[label] = bench::median_metric(v);
  return out;
}

std::vector<bench::ExperimentReport> fit_gaussian_runs() {
  std::vector<bench::ExperimentReport> runs;
  for (std::uint64_t seed : {1, 2, 3}) {
    bench::FitGaussianConfig c;
    c.seed = seed;
    c.mixture = true;
    runs.push_back(bench::cmd_fit_gaussian(c));
  }
  return runs;
}

// Criterion 5
Outcome rank_sweep(const std::vector<bench::ExperimentReport>& runs) {
  const auto kl = median_by_label(runs, &bench::FamilyMetrics::kl_p_q);
  const std::vector<std::string> order{"map", "sn_r0", "sn_r1", "sn_r2", "sn_r4", "sn_r8"};
  int decreasing = 0;
  std::string seq;
  for (std::size_t i = 0; i < order.size(); ++i) {
    seq += (i ? " > " : "") + kl.at(order[i]).to_cell();
    if (i > 0 && kl.at(order[i]).value() < kl.at(order[i - 1]).value()) ++decreasing;
  }
  bool map_inf = true;
  for (const auto& r : runs) map_inf = map_inf && r.find("map")->kl_p_q == Metric::pos_inf();
  const Metric full = kl.at("sn_r8");
  const bool pass = decreasing >= 4 && map_inf && full.is_finite() && full.value() < 0.5;
  return {pass, "median KL[p||q] " + seq + "; " + std::to_string(decreasing) + "/5 decreasing"};
}

// Criterion 6
Outcome rbf_table() {
  std::vector<bench::ExperimentReport> runs;
  for (std::uint64_t seed : {1, 2, 3}) {
    bench::RbfConfig c;
    c.seed = seed;
    runs.push_back(bench::cmd_rbf(c));
  }
  bool atomic_ok = true;
  bool gaussian_ok = true;
  for (const auto& r : runs) {
    for (const auto& f : r.families) {
      if (f.label == "map" || f.label == "mc_dropout") {
        atomic_ok = atomic_ok && f.logq_theta_star == Metric::neg_inf() && f.kl_p_q == Metric::pos_inf();
      } else {
        gaussian_ok = gaussian_ok && f.logq_theta_star.is_finite();
      }
    }
  }
  const auto kl = median_by_label(runs, &bench::FamilyMetrics::kl_p_q);
  std::string best;
  for (const auto& [label, m] : kl) {
    if (m.kind() == Metric::Kind::kNotAvailable) continue;
    if (best.empty() || m.value() < kl.at(best).value()) best = label;
  }
  return {atomic_ok && gaussian_ok && best == "sn_r10",
          std::string("atomic rows -inf/inf ") + (atomic_ok ? "yes" : "no") + ", Gaussian log q finite " +
              (gaussian_ok ? "yes" : "no") + ", smallest median KL " + best + " = " + kl.at(best).to_cell()};
}

// Criterion 7
Outcome dropout_exactness() {
  bench::DropoutAuditConfig c;
  c.seed = 1;
  const auto r = bench::cmd_dropout_audit(c);
  const auto& d = r.details;
  const auto atoms = d.at("atom_count").get<Index>();
  const double wsum = d.at("weight_sum").get<double>();
  const auto equal = d.at("atoms_equal_truth").get<Index>();
  const bool within = d.at("predictive_within_3se").get<bool>();
  bool reductions = true;
  for (const auto& red : d.at("reductions")) reductions = reductions && red.at("exact").get<bool>();
  double worst_z = 0.0;
  for (const auto& p : d.at("predictive")) {
    worst_z = std::max({worst_z, std::abs(p.at("mean_z").get<double>()), std::abs(p.at("variance_z").get<double>())});
  }
  return {atoms == 1024 && std::abs(wsum - 1.0) <= 1e-12 && equal == 0 && within && reductions,
          std::to_string(atoms) + " atoms, |sum w - 1| " + fmt(std::abs(wsum - 1.0)) + ", atoms equal to truth " +
              std::to_string(equal) + ", max |z| " + fmt(worst_z) + ", p=1/p=0 exact " +
              (reductions ? "yes" : "no")};
}

// Criterion 8
Outcome variance_reduction() {
  const auto prob = vtest::linear_problem(8, 30, 0.5, 81);
  const RegressionTarget target(prob);
  FamilyOptions o;
  o.rank = 2;
  Rng rng(82);
  FamilyState s = init_family(FamilyTag::kStructuredNormal, target.shape(), o, rng);
  s.psi = vtest::generic_psi(s, rng);
  const Index p = s.dim;
  const Minibatch batch;
  const auto naive = gradient_variance_probe(s, target, SamplingMode::kNaive, 1000, 4, batch, rng);
  const auto paired = gradient_variance_probe(s, target, SamplingMode::kPaired, 1000, 4, batch, rng);
  const auto unscented = gradient_variance_probe(s, target, SamplingMode::kUnscented, 1000, 4, batch, rng);
  Index better = 0;
  for (Index i = 0; i < p; ++i) better += paired.variance[i] <= naive.variance[i] ? 1 : 0;
  const double frac = static_cast<double>(better) / static_cast<double>(p);
  double worst_z = 0.0;
  const std::vector<const GradientStats*> all{&naive, &paired, &unscented};
  for (std::size_t a = 0; a < all.size(); ++a) {
    for (std::size_t b = a + 1; b < all.size(); ++b) {
      for (Index i = 0; i < s.psi.size(); ++i) {
        const double se = std::sqrt(all[a]->variance[i] / static_cast<double>(all[a]->repeats) +
                                    all[b]->variance[i] / static_cast<double>(all[b]->repeats));
        // Paired and unscented estimates of the mean gradient are exact on a
        // quadratic log-joint, so their sample variance is pure rounding; the
        // floor keeps the ratio at the resolution of double arithmetic.
        const double floor = 1e-9 * std::max(1.0, std::abs(all[a]->mean[i]));
        const double diff = std::abs(all[a]->mean[i] - all[b]->mean[i]);
        worst_z = std::max(worst_z, diff / (se + floor));
      }
    }
  }
  return {frac >= 0.95 && worst_z <= 4.0,
          "paired <= naive on " + std::to_string(better) + "/" + std::to_string(p) +
              " mean coordinates; max pairwise |diff|/SE " + fmt(worst_z)};
}

// Criterion 9
Outcome multimodality(const std::vector<bench::ExperimentReport>& runs) {
  std::vector<double> mixture;
  std::vector<double> unimodal;
  for (const auto& r : runs) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& f : r.families) {
      if (f.label.rfind("bimodal_sn_r", 0) == 0 && f.kl_q_p.is_finite()) best = std::min(best, f.kl_q_p.value());
      if (f.label.rfind("bimodal_mixture", 0) == 0) {
        mixture.push_back(f.kl_q_p.is_finite() ? f.kl_q_p.value() : std::numeric_limits<double>::infinity());
      }
    }
    unimodal.push_back(best);
  }
  const double m = bench::median(mixture);
  const double u = bench::median(unimodal);
  return {u - m >= 0.5, "median KL[q||p] mixture " + fmt(m) + " vs best unimodal " + fmt(u) + " (gap " +
                            fmt(u - m) + ")"};
}

// Criterion 10
Outcome cli_determinism(const std::string& bench_path) {
  const auto root = std::filesystem::temp_directory_path() / "varinf_acceptance_cli";
  std::filesystem::remove_all(root);
  std::string summary;
  bool pass = true;
  for (const std::string cmd : {"fit-gaussian", "rbf", "dropout-audit"}) {
    std::string tables[2];
    for (int run = 0; run < 2; ++run) {
      const auto out = root / (cmd + "_" + std::to_string(run));
      const std::string line = "\"" + bench_path + "\" " + cmd + " --seed 1 --formats csv --out \"" +
                               out.string() + "\" > /dev/null 2>&1";
      if (std::system(line.c_str()) != 0) {
        pass = false;
        summary += cmd + " failed; ";
        break;
      }
      tables[run] = read_text(out / "tables.csv");
    }
    const bool same = !tables[0].empty() && tables[0] == tables[1];
    pass = pass && same;
    summary += cmd + (same ? " identical" : " DIFFERENT") + "; ";
  }
  std::filesystem::remove_all(root);
  return {pass, summary.substr(0, summary.size() - 2)};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: varinf_acceptance <path-to-varinf_bench>\n";
    return 2;
  }
  const std::string bench_path = argv[1];
  int failures = 0;
  auto run = [&](int id, const std::string& name, double budget_s, const std::function<Outcome()>& fn) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < budget_s;
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    std::cout << (pass ? "[PASS] " : "[FAIL] ") << id << " " << name << ": " << o.detail << " (" << fmt(secs)
              << " s of " << fmt(budget_s) << " s)" << std::endl;
  };

  run(1, "woodbury-correctness", 5, woodbury_correctness);
  run(2, "gradient-fidelity", 30, gradient_fidelity);
  run(3, "sampling-moments", std::numeric_limits<double>::infinity(), sampling_moments);
  run(4, "conjugate-recovery", 120, conjugate_recovery);
  std::vector<bench::ExperimentReport> fits;
  run(5, "rank-sweep-gaussian-target", 600, [&] {
    fits = fit_gaussian_runs();
    return rank_sweep(fits);
  });
  run(6, "rbf-regression-table", 600, rbf_table);
  run(7, "dropout-exactness", std::numeric_limits<double>::infinity(), dropout_exactness);
  run(8, "variance-reduction", std::numeric_limits<double>::infinity(), variance_reduction);
  run(9, "multimodal-mixture", std::numeric_limits<double>::infinity(), [&] {
    if (fits.empty()) throw Error("fit-gaussian runs unavailable");
    return multimodality(fits);
  });
  run(10, "cli-determinism", std::numeric_limits<double>::infinity(), [&] { return cli_determinism(bench_path); });
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
