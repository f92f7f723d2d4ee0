#include "pseudogmm/trial.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <catch_amalgamated.hpp>

#include <set>

using namespace pseudogmm;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

/// (1/b) int_0^b S(c) dc by adaptive Gauss-Kronrod on the mixture survival.
double quadrature_censoring(const Scenario& s, double bound) {
  const double integral = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
      [&](double c) { return s.mixture_survival(c); }, 0.0, bound, 15, 1e-14);
  return integral / bound;
}

std::vector<Scenario> scenarios() {
  std::vector<Scenario> out;
  for (double rate : {0.05, 0.2, 0.5, 0.7})
    for (double hr : {-0.5, -0.3, 0.0})
      for (double shape : {0.6, 1.0, 2.5}) {
        Scenario s;
        s.censoring_rate = rate;
        s.log_hr = hr;
        s.shape = shape;
        out.push_back(s);
      }
  return out;
}

}  // namespace

TEST_CASE("Closed-form censoring probability matches quadrature", "[trial][oracle]") {
  for (const auto& s : scenarios())
    for (double bound : {0.05, 0.7, 3.0, 25.0})
      CHECK_THAT(censoring_probability(s, bound), WithinRel(quadrature_censoring(s, bound), 1e-10));
}

TEST_CASE("Calibrated bound hits the target rate", "[trial][oracle]") {
  for (const auto& s : scenarios()) {
    const double b = calibrate_censoring(s);
    CHECK_THAT(quadrature_censoring(s, b), WithinAbs(s.censoring_rate, 1e-9));
    // P(C < T) falls as the censoring window widens
    CHECK(censoring_probability(s, 1.1 * b) < censoring_probability(s, b));
  }
  CHECK_THAT(calibrate_censoring(Scenario{}), WithinRel(8.5438788294767374, 1e-10));
}

TEST_CASE("Realized censoring averages to the target", "[trial]") {
  for (double rate : {0.05, 0.2, 0.5}) {
    Scenario s;
    s.censoring_rate = rate;
    const double b = calibrate_censoring(s);
    double censored = 0.0;
    const int reps = 200;
    for (int r = 0; r < reps; ++r) {
      const auto d = generate_trial(s, b, static_cast<std::uint64_t>(r));
      censored += 1.0 - static_cast<double>(d.event_count()) / d.size();
    }
    // sd of the average is about sqrt(p (1 - p) / 100000) < 0.0016
    CHECK_THAT(censored / reps, WithinAbs(rate, 0.006));
  }
}

TEST_CASE("Arms follow their Weibull survival curves", "[trial]") {
  Scenario s;
  s.n = 20000;
  s.censoring_rate = 0.05;
  const auto d = generate_trial(s, 0);
  std::size_t treated = 0;
  for (int a : d.arm()) treated += static_cast<std::size_t>(a);
  CHECK(treated == 10000);
  for (int arm : {0, 1}) {
    std::vector<double> t;
    std::vector<int> e;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (d.arm()[i] == arm) {
        t.push_back(d.time()[i]);
        e.push_back(d.status()[i]);
      }
    const auto km = kaplan_meier(t, e);
    for (double x : {0.2, 1.0, 2.5}) {
      const double truth = std::exp(-std::pow(x, s.shape) * std::exp(s.log_hr * arm));
      CHECK_THAT(km.evaluate(x), WithinAbs(truth, 0.02));
    }
  }
}

TEST_CASE("Replications are reproducible and distinct", "[trial][determinism]") {
  const Scenario s;
  const double b = calibrate_censoring(s);
  CHECK(generate_trial(s, b, 3).time() == generate_trial(s, b, 3).time());
  CHECK(generate_trial(s, b, 3).time() != generate_trial(s, b, 4).time());
  Scenario other = s;
  other.seed += 1;
  CHECK(generate_trial(other, b, 3).time() != generate_trial(s, b, 3).time());
  std::set<std::uint64_t> first;
  for (std::uint64_t r = 0; r < 1000; ++r) first.insert(replication_rng(s.seed, r)());
  CHECK(first.size() == 1000);
}

TEST_CASE("Scenario validation", "[trial]") {
  Scenario s;
  s.n = 501;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.n = 500;
  s.censoring_rate = 0.0;
  CHECK_THROWS_AS(calibrate_censoring(s), std::invalid_argument);
  s.censoring_rate = 1.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.censoring_rate = 0.2;
  s.shape = 0.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}
