#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <numeric>

#include "test_support.hpp"
#include "varinf/models.hpp"

using namespace varinf;

TEST(RbfDesign, KernelAtCenterAndOneBandwidthAway) {
  const auto spec = RbfModelSpec::regular(5);
  Vector<double> xs(2);
  xs << spec.centers[2], spec.centers[2] + spec.bandwidth;
  const auto m = rbf_design_matrix(xs, spec);
  EXPECT_DOUBLE_EQ(m(0, 2), 1.0);
  EXPECT_NEAR(m(1, 2), std::exp(-0.5), 1e-15);
  EXPECT_NEAR(m(1, 2), 0.6065306597, 1e-10);
}

TEST(RbfDesign, MatchesScalarLoop) {
  const auto spec = RbfModelSpec::regular(10);
  EXPECT_NEAR(spec.bandwidth, 2.0 / 9.0, 1e-15);
  const Vector<double> xs = Vector<double>::LinSpaced(5, -1.0, 1.0);
  const auto m = rbf_design_matrix(xs, spec);
  ASSERT_EQ(m.rows(), 5);
  ASSERT_EQ(m.cols(), 10);
  for (Index n = 0; n < 5; ++n) {
    for (Index k = 0; k < 10; ++k) {
      const double d = xs[n] - (-1.0 + k * 2.0 / 9.0);
      EXPECT_NEAR(m(n, k), std::exp(-d * d / (2.0 * std::pow(2.0 / 9.0, 2))), 1e-14);
      EXPECT_GT(m(n, k), 0.0);
      EXPECT_LE(m(n, k), 1.0);
    }
  }
}

TEST(GaussianLoglik, ZeroAndUnitResidual) {
  RegressionProblem p;
  p.design = Matrix<double>::Ones(1, 1);
  p.targets = Vector<double>::Zero(1);
  p.noise = 1.0;
  EXPECT_NEAR(gaussian_loglik<double>(p, Vector<double>::Zero(1)), -0.5 * std::log(2 * std::numbers::pi), 1e-15);
  EXPECT_NEAR(gaussian_loglik<double>(p, Vector<double>::Ones(1)), -0.5 * std::log(2 * std::numbers::pi) - 0.5, 1e-15);
}

TEST(GaussianLoglik, MatchesSumOfScalarDensities) {
  const auto p = vtest::linear_problem(4, 12, 0.7, 3);
  Rng rng(4);
  const Vector<double> th = standard_normal(4, rng);
  double ref = 0.0;
  for (Index n = 0; n < p.size(); ++n) {
    const double r = p.targets[n] - p.design.row(n).dot(th);
    ref += -0.5 * std::log(2 * std::numbers::pi * 0.49) - r * r / (2 * 0.49);
  }
  EXPECT_NEAR(gaussian_loglik(p, th), ref, 1e-11);
}

TEST(GaussianLoglik, GradientMatchesClosedForm) {
  const auto p = vtest::linear_problem(5, 20, 0.4, 8);
  Rng rng(9);
  const Vector<double> th = standard_normal(5, rng);
  const auto g = evaluate_with_gradient([&](const auto& t) { return gaussian_loglik(p, t); }, th);
  const Vector<double> ref = p.design.transpose() * (p.targets - p.design * th) / (0.4 * 0.4);
  EXPECT_LT((g.gradient - ref).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(MinibatchLoglik, FullBatchEqualsFullLoglik) {
  const auto p = vtest::linear_problem(3, 10, 0.5, 1);
  const Vector<double> th = Vector<double>::Constant(3, 0.2);
  std::vector<Index> all(10);
  std::iota(all.begin(), all.end(), Index{0});
  EXPECT_NEAR(minibatch_loglik(p, th, std::span<const Index>(all)), gaussian_loglik(p, th), 1e-11);
}

TEST(MinibatchLoglik, SingletonAverageEqualsFullLoglik) {
  const auto p = vtest::linear_problem(3, 10, 0.5, 2);
  const Vector<double> th = Vector<double>::Constant(3, -0.3);
  double avg = 0.0;
  for (Index n = 0; n < 10; ++n) {
    const std::array<Index, 1> b{n};
    avg += minibatch_loglik(p, th, std::span<const Index>(b)) / 10.0;
  }
  EXPECT_NEAR(avg, gaussian_loglik(p, th), 1e-10);
}

TEST(MinibatchLoglik, RandomBatchesAreUnbiased) {
  const auto p = vtest::linear_problem(3, 20, 0.5, 3);
  const Vector<double> th = Vector<double>::Constant(3, 0.1);
  Rng rng(5);
  const int reps = 10000;
  double mean = 0.0;
  double m2 = 0.0;
  std::vector<Index> idx(20);
  std::iota(idx.begin(), idx.end(), Index{0});
  for (int r = 0; r < reps; ++r) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const double v = minibatch_loglik(p, th, std::span<const Index>(idx.data(), 5));
    const double d = v - mean;
    mean += d / (r + 1);
    m2 += d * (v - mean);
  }
  const double se = std::sqrt(m2 / (reps - 1) / reps);
  EXPECT_LT(std::abs(mean - gaussian_loglik(p, th)), 3 * se);
}

TEST(MinibatchLoglik, EmptyBatchIsAnError) {
  const auto p = vtest::linear_problem(2, 4, 0.5, 1);
  EXPECT_THROW(minibatch_loglik<double>(p, Vector<double>::Zero(2), std::span<const Index>()), ConfigError);
}

TEST(Prior, GaussianAndStudentAtOrigin) {
  EXPECT_NEAR(prior_logpdf<double>(GaussianPrior{1.0}, Vector<double>::Zero(1)), -0.5 * std::log(2 * std::numbers::pi), 1e-15);
  EXPECT_NEAR(prior_logpdf<double>(StudentTPrior{1.0, 1.0}, Vector<double>::Zero(1)), std::log(1.0 / std::numbers::pi), 1e-14);
  EXPECT_NEAR(prior_logpdf<double>(StudentTPrior{1.0, 1.0}, Vector<double>::Zero(1)), -1.1447298858, 1e-9);
}

TEST(Prior, GaussianGradientIsMinusLambdaTheta) {
  Rng rng(2);
  const Vector<double> th = standard_normal(4, rng);
  const PriorSpec spec = GaussianPrior{2.5};
  const auto g = evaluate_with_gradient([&](const auto& t) { return prior_logpdf(spec, t); }, th);
  EXPECT_LT((g.gradient + 2.5 * th).norm(), 1e-14);
  const auto g0 = evaluate_with_gradient([&](const auto& t) { return prior_logpdf(spec, t); },
                                         Vector<double>::Zero(4));
  EXPECT_TRUE(g0.gradient.isZero());
}

TEST(Prior, StudentIntegratesToOne) {
  const PriorSpec spec = StudentTPrior{3.0, 0.7};
  const int n = 200000;
  const double half = 400.0;
  const double h = 2 * half / n;
  double total = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double w = (i == 0 || i == n) ? 0.5 : 1.0;
    total += w * std::exp(prior_logpdf<double>(spec, Vector<double>::Constant(1, -half + i * h)));
  }
  EXPECT_NEAR(total * h, 1.0, 1e-4);
}

TEST(RbfDataset, NoiselessTargetsAreExact) {
  const auto [p, truth] = make_rbf_dataset(RbfModelSpec::regular(10, 0.0), 25, 3);
  EXPECT_TRUE(p.targets == p.design * truth.theta);
  EXPECT_TRUE(truth.noise.isZero());
}

TEST(RbfDataset, SameSeedSameData) {
  const auto a = make_rbf_dataset(RbfModelSpec::regular(10), 30, 11);
  const auto b = make_rbf_dataset(RbfModelSpec::regular(10), 30, 11);
  EXPECT_TRUE(a.first.targets == b.first.targets);
  EXPECT_TRUE(a.second.theta == b.second.theta);
  const auto c = make_rbf_dataset(RbfModelSpec::regular(10), 30, 12);
  EXPECT_FALSE(a.first.targets == c.first.targets);
}

TEST(RbfDataset, NoiseLevelMatchesSigma) {
  const auto [p, truth] = make_rbf_dataset(RbfModelSpec::regular(10, 0.25), 200, 7);
  const Vector<double> e = p.targets - p.design * truth.theta;
  const double m = e.mean();
  const double sd = std::sqrt((e.array() - m).square().sum() / 199.0);
  EXPECT_GE(sd, 0.20);
  EXPECT_LE(sd, 0.30);
  EXPECT_DOUBLE_EQ(p.noise, 0.25);
}

TEST(Targets, GaussianTargetIsNormalized) {
  Matrix<double> s(2, 2);
  s << 1.0, 0.3, 0.3, 0.5;
  const GaussianTarget t(Vector<double>::Zero(2), s);
  EXPECT_NEAR(t.log_density(Vector<double>(Vector<double>::Zero(2))),
              vtest::dense_logpdf(Vector<double>::Zero(2), Vector<double>::Zero(2), s), 1e-14);
}

TEST(Targets, MlpHookDifferentiates) {
  const Vector<double> x = Vector<double>::LinSpaced(8, -1, 1);
  const Vector<double> y = x.array().sin();
  const MlpRegressionTarget t(x, y, 3, 0.2);
  Rng rng(1);
  const Vector<double> th = standard_normal(t.dim(), rng);
  auto f = [&](const auto& v) { return t.log_likelihood(v, Minibatch{}) + t.log_prior(v); };
  const auto g = evaluate_with_gradient(f, th);
  const auto fd = finite_difference_gradient(f, th);
  EXPECT_LT((g.gradient - fd).cwiseAbs().maxCoeff() / fd.cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(t.shape().dim(), t.dim());
}
