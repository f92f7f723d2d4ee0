#include "support.hpp"

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <catch_amalgamated.hpp>

#include <random>

using namespace pseudogmm;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

/// Piecewise-exponential log-likelihood summed subject by subject.
double brute_force_loglik(const SurvivalDataset& d, const std::vector<double>& cuts,
                          const Eigen::VectorXd& log_h, double beta) {
  double ll = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double t = d.time()[i], lin = beta * d.arm()[i];
    for (std::size_t m = 0; m + 1 < cuts.size(); ++m) {
      if (t <= cuts[m]) break;
      const double h = std::exp(log_h(static_cast<Eigen::Index>(m)) + lin);
      ll -= h * (std::min(t, cuts[m + 1]) - cuts[m]);
      if (d.status()[i] == 1 && t <= cuts[m + 1]) ll += log_h(static_cast<Eigen::Index>(m)) + lin;
    }
  }
  return ll;
}

McmcConfig chains(std::uint64_t seed, int iterations) {
  McmcConfig c;
  c.chains = 3;
  c.warmup = 1000;
  c.iterations = iterations;
  c.thin = 2;
  c.seed = seed;
  c.covariance_start = -1;
  c.parallel_chains = false;
  return c;
}

}  // namespace

TEST_CASE("Interval count rule", "[pem]") {
  CHECK(interval_count(7) == 5);
  CHECK(interval_count(40) == 5);
  CHECK(interval_count(96) == 12);
  CHECK(interval_count(200) == 20);
  CHECK(interval_count(1000) == 20);
}

TEST_CASE("Cut points sit at event quantiles and increase strictly", "[pem]") {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 30; ++rep) {
    const auto d = support::random_dataset(rng, 40 + 10 * rep, 0.3, rep % 3 == 0 ? 0.5 : 0.0);
    const PemSpec spec = make_pem_spec(d);
    CHECK(spec.boundaries.front() == 0.0);
    CHECK(spec.boundaries.back() == *std::max_element(d.time().begin(), d.time().end()));
    for (std::size_t m = 1; m < spec.boundaries.size(); ++m) CHECK(spec.boundaries[m] > spec.boundaries[m - 1]);
    if (spec.warnings.empty()) CHECK(spec.intervals() == interval_count(d.event_count()));
    CHECK(spec.prior_rate == exponential_rate(d));
  }
}

TEST_CASE("Coinciding cut points merge with a warning", "[pem]") {
  // eight events share one time, so most quantile cuts coincide
  std::vector<double> t{1, 1, 1, 1, 1, 1, 1, 1, 2, 3};
  const SurvivalDataset d(t, {1, 1, 1, 1, 1, 1, 1, 1, 1, 0}, {0, 1, 0, 1, 0, 1, 0, 1, 0, 1});
  const PemSpec spec = make_pem_spec(d, 5);
  CHECK(spec.intervals() < 5);
  REQUIRE_FALSE(spec.warnings.empty());
  CHECK_THAT(spec.warnings.front(), ContainsSubstring("merged"));
  CHECK_NOTHROW(spec.validate());
}

TEST_CASE("Grouped log-likelihood matches the per-subject sum", "[pem][oracle]") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> normal(-0.5, 0.4);
  for (int rep = 0; rep < 10; ++rep) {
    const auto d = support::random_dataset(rng, 80, 0.3);
    const PemSpec spec = make_pem_spec(d);
    const PemModel model(d, spec);
    Eigen::VectorXd theta(model.params());
    for (Eigen::Index p = 0; p < theta.size(); ++p) theta(p) = normal(rng);
    CHECK_THAT(model.log_likelihood(theta),
               WithinRel(brute_force_loglik(d, spec.boundaries, theta.head(spec.intervals()),
                                            theta(model.treatment_index())),
                         1e-12));
  }
}

TEST_CASE("Splitting an interval at equal hazards leaves the likelihood unchanged", "[pem][property]") {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 10; ++rep) {
    const auto d = support::random_dataset(rng, 100, 0.2, 0.0, 1);
    PemSpec coarse = make_pem_spec(d);
    PemSpec fine = coarse;
    const std::size_t m = static_cast<std::size_t>(rep) % static_cast<std::size_t>(coarse.intervals());
    fine.boundaries.insert(fine.boundaries.begin() + static_cast<std::ptrdiff_t>(m) + 1,
                           0.5 * (coarse.boundaries[m] + coarse.boundaries[m + 1]));
    const PemModel a(d, coarse), b(d, fine);
    Eigen::VectorXd ta(a.params()), tb(b.params());
    std::normal_distribution<double> normal(0.0, 0.5);
    for (Eigen::Index p = 0; p < ta.size(); ++p) ta(p) = normal(rng);
    const auto M = static_cast<Eigen::Index>(m);
    tb.head(M + 1) = ta.head(M + 1);
    tb(M + 1) = ta(M);
    tb.tail(ta.size() - M - 1) = ta.tail(ta.size() - M - 1);
    CHECK_THAT(b.log_likelihood(tb), WithinAbs(a.log_likelihood(ta), 1e-10));
  }
}

TEST_CASE("Gradient and Hessian match central differences", "[pem][oracle]") {
  std::mt19937_64 rng(9);
  const auto d = support::random_dataset(rng, 120, 0.3, 0.0, 1);
  const PemModel model(d, make_pem_spec(d));
  Eigen::VectorXd theta = model.mode();
  std::normal_distribution<double> normal(0.0, 0.2);
  for (Eigen::Index p = 0; p < theta.size(); ++p) theta(p) += normal(rng);
  Eigen::VectorXd grad, g2;
  Eigen::MatrixXd H, H2;
  model.derivatives(theta, grad, H);
  const double h = 1e-5;
  for (Eigen::Index p = 0; p < theta.size(); ++p) {
    Eigen::VectorXd up = theta, down = theta;
    up(p) += h;
    down(p) -= h;
    const double fd = (*model.log_posterior(up) - *model.log_posterior(down)) / (2 * h);
    CHECK_THAT(grad(p), WithinAbs(fd, 1e-5 * std::max(1.0, std::abs(fd))));
    Eigen::VectorXd gu, gd;
    model.derivatives(up, gu, H2);
    model.derivatives(down, gd, H2);
    const Eigen::VectorXd col = -(gu - gd) / (2 * h);
    CHECK((H.col(p) - col).cwiseAbs().maxCoeff() < 1e-5 * std::max(1.0, col.cwiseAbs().maxCoeff()));
  }
  // near the mode the objective change drops below rounding before the
  // gradient reaches 1e-8
  model.derivatives(model.mode(), g2, H2);
  CHECK(g2.cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("Single interval without covariates is gamma conjugate", "[pem][sampler][oracle]") {
  std::mt19937_64 rng(10);
  const auto d = support::random_dataset(rng, 60, 0.3);
  PemOptions opts;
  opts.intervals = 1;
  opts.include_treatment = false;
  opts.include_covariates = false;
  opts.mcmc = chains(3, 40000);
  const PemFit fit = fit_pem(d, opts);
  double exposure = 0.0;
  for (double t : d.time()) exposure += t;
  const double shape = 1.0 + static_cast<double>(d.event_count());
  const double rate = exponential_rate(d) + exposure;
  const auto& s = fit.summary.parameters[0];
  CHECK(s.name == "log_h1");
  CHECK(std::abs(s.mean - (boost::math::digamma(shape) - std::log(rate))) < 4.0 * s.mcse_mean);
  CHECK_THAT(s.sd * s.sd, WithinRel(boost::math::trigamma(shape), 0.1));
  CHECK_FALSE(fit.flagged);
}

TEST_CASE("Treatment effect posterior on a simulated trial", "[pem][sampler]") {
  const auto d = support::core_trial(0);
  PemOptions opts;
  opts.mcmc = chains(12, 8000);
  const PemFit fit = fit_pem(d, opts);
  const Eigen::Index tr = fit.spec.intervals();
  REQUIRE(fit.summary.parameters[static_cast<std::size_t>(tr)].name == "treatment");
  const auto& s = fit.summary.parameters[static_cast<std::size_t>(tr)];
  CHECK(std::abs(s.mean - fit.mode(tr)) < 0.5 * s.sd);
  CHECK(s.lower < s.mean);
  CHECK(s.upper > s.mean);
  CHECK(s.rhat < 1.05);
  CHECK_THROWS_AS(make_pem_spec(SurvivalDataset({1, 2}, {1, 0}, {0, 1}), 0), std::invalid_argument);
}

TEST_CASE("Spec validation", "[pem]") {
  PemSpec s;
  s.boundaries = {0.0, 1.0, 1.0};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.boundaries = {0.5, 1.0};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.boundaries = {0.0, 1.0};
  s.prior_rate = 0.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}
