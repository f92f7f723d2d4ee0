#include "support.hpp"

#include <catch_amalgamated.hpp>

#include <random>
#include <set>
#include <sstream>

using namespace pseudogmm;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ReplicateRecord record(bool ok, double value, double se) {
  Estimate e;
  e.ok = ok;
  e.value = value;
  e.se = se;
  e.lower = value - 1.96 * se;
  e.upper = value + 1.96 * se;
  return {0, 0.2, {e}};
}

McmcConfig short_chains(int iterations) {
  McmcConfig c;
  c.chains = 3;
  c.warmup = 300;
  c.iterations = iterations;
  c.thin = 2;
  c.covariance_start = -1;
  return c;
}

}  // namespace

TEST_CASE("Aggregate metrics on a hand-sized example", "[sim][metrics]") {
  const std::vector<ReplicateRecord> records{record(true, 0.1, 0.1), record(true, -0.1, 0.2),
                                             record(true, 0.3, 0.3), record(false, 9.0, 1.0)};
  const MetricsRow row = aggregate(records, 0, Method::Gee, 0.0);
  CHECK(row.replications == 4);
  CHECK(row.used == 3);
  CHECK(row.failures == 1);
  CHECK(row.flagged);
  CHECK_THAT(row.bias, WithinAbs(0.1, 1e-15));
  // sample sd of {0.1, -0.1, 0.3} is 0.2
  CHECK_THAT(row.bias_mcse, WithinAbs(0.2 / std::sqrt(3.0), 1e-15));
  CHECK_THAT(row.ase, WithinAbs(0.2, 1e-15));
  CHECK_THAT(row.rmse, WithinAbs(std::sqrt(0.11 / 3.0), 1e-15));
  // 0.1 +/- 0.196 and -0.1 +/- 0.392 and 0.3 +/- 0.588 all cover 0
  CHECK(row.coverage == 1.0);
  CHECK(row.coverage_mcse == 0.0);
  CHECK_THAT(row.median, WithinAbs(0.1, 1e-15));
  CHECK_THAT(row.realized_censoring, WithinAbs(0.2, 1e-15));
}

TEST_CASE("Aggregate invariants on random records", "[sim][metrics][property]") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.05, 0.5);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<ReplicateRecord> records;
    const int n = 2 + rep;
    for (int i = 0; i < n; ++i) records.push_back(record(i % 7 != 3, 0.3 * normal(rng) + 0.05, unif(rng)));
    const MetricsRow row = aggregate(records, 0, Method::Gmm, 0.0);
    CHECK(row.rmse >= std::abs(row.bias) - 1e-15);
    CHECK(row.coverage >= 0.0);
    CHECK(row.coverage <= 1.0);
    CHECK(row.used + row.failures == n);
    CHECK(row.flagged == (row.failures > 0.05 * n));
    CHECK_THAT(row.coverage_mcse, WithinAbs(std::sqrt(row.coverage * (1 - row.coverage) / row.used), 1e-15));
  }
}

TEST_CASE("Failure flag triggers strictly above five percent", "[sim][metrics]") {
  std::vector<ReplicateRecord> records(100, record(true, 0.0, 0.1));
  for (int i = 0; i < 5; ++i) records[static_cast<std::size_t>(i)] = record(false, 0.0, 0.1);
  CHECK_FALSE(aggregate(records, 0, Method::Cox, 0.0).flagged);
  records[5] = record(false, 0.0, 0.1);
  CHECK(aggregate(records, 0, Method::Cox, 0.0).flagged);

  const std::vector<ReplicateRecord> none(3, record(false, 0.0, 0.1));
  const MetricsRow empty = aggregate(none, 0, Method::Cox, 0.0);
  CHECK(empty.used == 0);
  CHECK(std::isnan(empty.bias));
  CHECK(std::isnan(empty.coverage));
}

TEST_CASE("Method lists", "[sim]") {
  CHECK(parse_methods("cox,gee,gmm,pem,bgmm").size() == 5);
  CHECK(parse_method("bayes-gmm") == Method::BayesGmm);
  CHECK(to_string(Method::BayesGmm) == "bgmm");
  CHECK(display_name(Method::BayesGmm) == "Bayesian GMM");
  CHECK(is_bayesian(Method::Pem));
  CHECK_FALSE(is_bayesian(Method::Gmm));
  CHECK_THROWS_AS(parse_methods(""), std::invalid_argument);
  CHECK(parse_methods("cox,,gee,") == std::vector<Method>{Method::Cox, Method::Gee});
  CHECK_THROWS_AS(parse_methods(",,"), std::invalid_argument);
  CHECK_THROWS_AS(parse_methods("gee,gee"), std::invalid_argument);
  CHECK_THROWS_AS(parse_methods("glm"), std::invalid_argument);
  CHECK(desk_replications(parse_methods("cox,gee")) == 200);
  CHECK(desk_replications(parse_methods("cox,pem")) == 50);
}

TEST_CASE("Named grids vary one knob each", "[sim][grid]") {
  const Scenario base;
  const MethodSettings settings;
  const auto methods = parse_methods("gee");
  const std::vector<std::pair<std::string, std::size_t>> sizes{
      {"core", 1}, {"table1", 5}, {"table2", 5}, {"table3", 3}, {"table4", 3}, {"ksens", 3}};
  std::set<std::uint64_t> seeds;
  for (const auto& [name, size] : sizes) {
    const auto cells = named_grid(name, base, settings, methods);
    CHECK(cells.size() == size);
    for (const auto& c : cells) seeds.insert(c.scenario.seed);
  }
  // cell i of every grid draws mix_seed(base, i), so only the widest grid adds seeds
  CHECK(seeds.size() == 5);
  const auto t1 = named_grid("table1", base, settings, methods);
  CHECK(t1[0].label == "n=50");
  CHECK(t1[4].scenario.n == 1000);
  const auto t2 = named_grid("table2", base, settings, methods);
  CHECK(t2[4].label == "CR=70%");
  CHECK(t2[4].scenario.censoring_rate == 0.70);
  const auto t4 = named_grid("table4", base, settings, methods);
  CHECK(t4[1].settings.correlation == CorrelationKind::Exchangeable);
  CHECK(named_grid("ksens", base, settings, methods)[2].settings.time_points == 10);
  CHECK_THROWS_WITH(named_grid("table9", base, settings, methods), ContainsSubstring("allowed: core"));

  Scenario s;
  MethodSettings st;
  apply_paper_scale(s, st);
  CHECK(s.replications == 1000);
  CHECK(st.pem_mcmc.iterations == 5000);
  CHECK(st.bayes_gmm_mcmc.chains == 3);
}

TEST_CASE("Failures inside one method do not stop the others", "[sim]") {
  // three distinct event times cannot carry a five-point grid
  const SurvivalDataset d({1, 2, 3, 4, 5, 6}, {1, 1, 1, 0, 0, 0}, {0, 1, 0, 1, 0, 1});
  const auto est = estimate_all(d, parse_methods("cox,gee"), MethodSettings{}, 1);
  CHECK(est[0].ok);
  CHECK_FALSE(est[1].ok);
  CHECK_THAT(est[1].message, ContainsSubstring("need at least 5"));
}

TEST_CASE("Every method yields an estimate on a simulated trial", "[sim]") {
  const auto d = support::core_trial(0, 200);
  MethodSettings settings;
  settings.bayes_gmm_mcmc = short_chains(2000);
  settings.pem_mcmc = short_chains(4000);
  const auto methods = parse_methods("cox,gee,gmm,pem,bgmm");
  const auto est = estimate_all(d, methods, settings, 5);
  for (std::size_t m = 0; m < methods.size(); ++m) {
    INFO(to_string(methods[m]) << ": " << est[m].message);
    CHECK(std::isfinite(est[m].value));
    CHECK(est[m].se > 0.0);
    CHECK(est[m].lower < est[m].value);
    CHECK(est[m].upper > est[m].value);
    CHECK(std::abs(est[m].value + 0.3) < 4.0 * est[m].se);
    CHECK(std::isnan(est[m].rhat) != is_bayesian(methods[m]));
  }
  CHECK_THAT(est[1].value, WithinAbs(est[2].value, 1e-6));
}

TEST_CASE("Scenario runs are identical for any thread count", "[sim][determinism]") {
  Scenario s;
  s.n = 100;
  s.replications = 6;
  const auto methods = parse_methods("cox,gee,gmm");
  auto csv = [&](int threads) {
    std::ostringstream os;
    write_metrics_csv(os, {run_scenario(s, methods, MethodSettings{}, threads)});
    return os.str();
  };
  const std::string one = csv(1);
  CHECK(csv(3) == one);
  CHECK(csv(1) == one);

  const ScenarioResult r = run_scenario(s, methods, MethodSettings{}, 2, "demo");
  REQUIRE(r.rows.size() == 3);
  CHECK(r.rows[0].label == "demo");
  for (std::size_t i = 0; i < r.records.size(); ++i) CHECK(r.records[i].replication == i);
  const auto table = format_table({r});
  CHECK_THAT(table, ContainsSubstring("Frequentist"));
  CHECK_THAT(table, !ContainsSubstring("Bayesian"));
  CHECK_THROWS_AS(run_scenario(s, {}, MethodSettings{}), std::invalid_argument);
}

TEST_CASE("Sensitivity grids relabel the base scenario", "[sim][grid]") {
  Scenario s;
  s.n = 100;
  s.replications = 3;
  const auto methods = parse_methods("gee");
  const auto byK = sensitivity_grid(s, methods, MethodSettings{}, std::vector<std::size_t>{3, 5});
  CHECK(byK[0].label == "K=3");
  CHECK(byK[1].rows[0].time_points == 5);
  const auto byR = sensitivity_grid(s, methods, MethodSettings{},
                                    std::vector<CorrelationKind>{CorrelationKind::AR1});
  CHECK(byR[0].rows[0].correlation == "AR1");
}

TEST_CASE("Seed mixing separates streams", "[sim]") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 20; ++a)
    for (std::uint64_t b = 0; b < 20; ++b) seen.insert(mix_seed(a, b));
  CHECK(seen.size() == 400);
}
