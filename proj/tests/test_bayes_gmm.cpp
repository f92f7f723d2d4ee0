#include "support.hpp"

#include <boost/math/distributions/cauchy.hpp>
#include <boost/math/distributions/normal.hpp>
#include <catch_amalgamated.hpp>

#include <sstream>

using namespace pseudogmm;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

struct Problem {
  PseudoObsMatrix y;
  DesignMatrix X;
};

Problem trial_problem(std::uint64_t rep, int n = 300) {
  const auto d = support::core_trial(rep, n);
  const auto grid = select_time_grid(d, 5);
  return {pseudo_observations(d, grid), build_design(d, grid)};
}

BayesGmmOptions short_run(std::uint64_t seed) {
  BayesGmmOptions o;
  o.mcmc.chains = 3;
  o.mcmc.warmup = 500;
  o.mcmc.iterations = 4000;
  o.mcmc.thin = 2;
  o.mcmc.seed = seed;
  o.mcmc.covariance_start = -1;
  o.mcmc.parallel_chains = false;
  return o;
}

const std::vector<CorrelationKind> kinds{CorrelationKind::Independence, CorrelationKind::Exchangeable,
                                         CorrelationKind::AR1};

}  // namespace

TEST_CASE("Score covariance is the centred second moment", "[bayes-gmm][oracle]") {
  const auto p = trial_problem(0, 120);
  const PseudoLikelihood lik(p.y, p.X, make_basis(CorrelationKind::Exchangeable, 5));
  const Eigen::VectorXd beta = starting_values(p.y, p.X);
  const ScoreState s = lik.model().scores(beta);
  const double n = 120.0;
  const Eigen::RowVectorXd centre = s.u.colwise().mean();
  const Eigen::MatrixXd centred = s.u.rowwise() - centre;
  const Eigen::MatrixXd oracle = centred.transpose() * centred / (n * n);
  const Eigen::MatrixXd sigma = lik.sigma(s);
  CHECK((sigma - oracle).cwiseAbs().maxCoeff() < 1e-12 * s.C.cwiseAbs().maxCoeff());
  CHECK((sigma + s.U * s.U.transpose() / n - s.C).cwiseAbs().maxCoeff() < 1e-12 * s.C.cwiseAbs().maxCoeff());
}

TEST_CASE("Log pseudo-likelihood follows from the QIF by a rank-one update", "[bayes-gmm][oracle]") {
  // U lies in the range of C, so U' (C - U U'/n)^- U = Q / (1 - Q/n)
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.0, 0.05);
  for (std::uint64_t rep = 0; rep < 5; ++rep) {
    const auto p = trial_problem(rep, 200);
    for (auto kind : kinds) {
      const BasisSet basis = make_basis(kind, 5);
      const PseudoLikelihood lik(p.y, p.X, basis);
      Eigen::VectorXd beta = starting_values(p.y, p.X);
      for (Eigen::Index c = 0; c < beta.size(); ++c) beta(c) += normal(rng);
      const double Q = qif(p.y, p.X, beta, basis);
      REQUIRE(Q < 200.0);
      const auto ll = lik(beta);
      REQUIRE(ll.has_value());
      CHECK_THAT(*ll, WithinRel(-0.5 * Q / (1.0 - Q / 200.0), 1e-8));
    }
  }
}

TEST_CASE("Starting values lie inside the support", "[bayes-gmm][property]") {
  for (std::uint64_t rep = 0; rep < 20; ++rep) {
    const auto p = trial_problem(rep, rep % 2 ? 100 : 300);
    for (auto kind : kinds) {
      const PseudoLikelihood lik(p.y, p.X, make_basis(kind, 5));
      for (double eps : {0.01, 0.05, 0.1}) CHECK(lik(starting_values(p.y, p.X, eps)).has_value());
    }
  }
}

TEST_CASE("Support ends where a coefficient drives scores to zero", "[bayes-gmm]") {
  const auto p = trial_problem(3);
  const PseudoLikelihood lik(p.y, p.X, make_basis(CorrelationKind::AR1, 5));
  const Eigen::VectorXd start = starting_values(p.y, p.X);
  REQUIRE(lik(start).has_value());
  Eigen::VectorXd far = start;
  far(1) += 40.0;  // treated subjects' means collapse to 0 and drop out of the scores
  CHECK_FALSE(lik(far).has_value());
  far(1) = 800.0;
  CHECK_FALSE(lik(far).has_value());
  far(1) = std::nan("");
  CHECK_FALSE(lik(far).has_value());
}

TEST_CASE("Noise-free outcomes lie outside the support", "[bayes-gmm]") {
  const auto p = trial_problem(4);
  Eigen::VectorXd truth(6);
  truth << -1.0, -0.3, 0.4, 0.8, 1.1, 1.5;
  PseudoObsMatrix y = p.y;
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    y.values.row(i) = mean_and_derivative(p.X.block(i), truth).mu.transpose();
  CHECK_FALSE(PseudoLikelihood(y, p.X, make_basis(CorrelationKind::Independence, 5))(truth).has_value());
}

TEST_CASE("Prior densities", "[bayes-gmm][prior]") {
  PriorSpec normal;
  normal.scales = {2.0, 0.5};
  Eigen::Vector2d b(1.0, -0.3);
  const double expected = std::log(boost::math::pdf(boost::math::normal_distribution<>(0.0, 2.0), 1.0)) +
                          std::log(boost::math::pdf(boost::math::normal_distribution<>(0.0, 0.5), -0.3));
  CHECK_THAT(normal.log_density(b), WithinRel(expected, 1e-12));

  PriorSpec cauchy;
  cauchy.family = PriorFamily::Cauchy;
  cauchy.scale = 2.5;
  const double expected_c = std::log(boost::math::pdf(boost::math::cauchy_distribution<>(0.0, 2.5), 1.0)) +
                            std::log(boost::math::pdf(boost::math::cauchy_distribution<>(0.0, 2.5), -0.3));
  CHECK_THAT(cauchy.log_density(b), WithinRel(expected_c, 1e-12));

  CHECK(PriorSpec::defaults(100).scale == 1.0);
  CHECK(PriorSpec::defaults(101).scale == 10.0);
  CHECK(PriorSpec::defaults(500).family == PriorFamily::Normal);
  CHECK_THROWS_AS(normal.validate(3), std::invalid_argument);
  PriorSpec bad;
  bad.scale = 0.0;
  CHECK_THROWS_AS(bad.validate(2), std::invalid_argument);
  CHECK(parse_prior_family("cauchy") == PriorFamily::Cauchy);
  CHECK_THROWS_AS(parse_prior_family("laplace"), std::invalid_argument);
}

TEST_CASE("Posterior centres on the GMM estimate for a weak prior", "[bayes-gmm][sampler]") {
  const auto p = trial_problem(6, 500);
  const BasisSet basis = make_basis(CorrelationKind::Independence, 5);
  const FitResult gmm = fit_gmm(p.y, p.X, basis);
  REQUIRE(gmm.converged);
  const BayesGmmFit fit = fit_bayes_gmm(p.y, p.X, basis, PriorSpec::defaults(500), short_run(3));
  REQUIRE(fit.summary.parameters.size() == 6);
  for (std::size_t c = 0; c < 6; ++c) {
    const auto& s = fit.summary.parameters[c];
    CHECK(std::abs(s.mean - gmm.beta(static_cast<Eigen::Index>(c))) < 3.0 * s.sd);
    CHECK(s.rhat < 1.05);
    CHECK(s.name == p.X.names[c]);
  }
  CHECK(fit.inits.size() == 3);
}

TEST_CASE("A tight prior shrinks the treatment effect towards zero", "[bayes-gmm][sampler]") {
  const auto p = trial_problem(8, 100);
  const BasisSet basis = make_basis(CorrelationKind::Independence, 5);
  PriorSpec loose;
  loose.scale = 10.0;
  PriorSpec tight = loose;
  tight.scales = {10.0, 0.05, 10.0, 10.0, 10.0, 10.0};
  const auto a = fit_bayes_gmm(p.y, p.X, basis, loose, short_run(21));
  const auto b = fit_bayes_gmm(p.y, p.X, basis, tight, short_run(21));
  CHECK(std::abs(b.summary.parameters[1].mean) < std::abs(a.summary.parameters[1].mean));
  CHECK(b.summary.parameters[1].sd < a.summary.parameters[1].sd);
}

TEST_CASE("Seeded posterior runs are reproducible", "[bayes-gmm][determinism]") {
  const auto p = trial_problem(9, 200);
  const BasisSet basis = make_basis(CorrelationKind::Exchangeable, 5);
  auto opts = short_run(77);
  opts.mcmc.iterations = 600;
  opts.tails = {{1, 0.0}};
  auto dump = [&](const BayesGmmOptions& o) {
    std::ostringstream os;
    write_draws_csv(os, fit_bayes_gmm(p.y, p.X, basis, PriorSpec::defaults(200), o).draws);
    return os.str();
  };
  const std::string first = dump(opts);
  CHECK(dump(opts) == first);
  opts.mcmc.parallel_chains = true;
  CHECK(dump(opts) == first);

  const auto fit = fit_bayes_gmm(p.y, p.X, basis, PriorSpec::defaults(200), opts);
  const auto j = summary_json(fit.summary, fit.draws);
  CHECK(j["coefficients"].size() == 6);
  CHECK(j["coefficients"][1]["name"] == "treatment");
  CHECK(j["tail_probabilities"][0]["parameter"] == "treatment");
  CHECK(j["chains"] == 3);
  CHECK(j["seed"] == 77);
}

TEST_CASE("Chains that disagree are flagged with advice", "[bayes-gmm]") {
  const auto p = trial_problem(10, 200);
  auto opts = short_run(5);
  opts.mcmc.iterations = 400;
  opts.rhat_threshold = 1.0;  // no finite run reaches it
  const auto fit = fit_bayes_gmm(p.y, p.X, make_basis(CorrelationKind::Independence, 5),
                                 PriorSpec::defaults(200), opts);
  CHECK(fit.flagged);
  CHECK(fit.advice.find("epsilon") != std::string::npos);
  opts.epsilons.clear();
  CHECK_THROWS_AS(fit_bayes_gmm(p.y, p.X, make_basis(CorrelationKind::Independence, 5),
                                PriorSpec::defaults(200), opts),
                  std::invalid_argument);
}
