#pragma once

// Monte Carlo harness: paired fits of every method on each simulated trial
// and bias / ASE / RMSE / coverage aggregation.

#include "pseudogmm/bayes_gmm.hpp"
#include "pseudogmm/cox.hpp"
#include "pseudogmm/gee.hpp"
#include "pseudogmm/gmm.hpp"
#include "pseudogmm/pem.hpp"
#include "pseudogmm/trial.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pseudogmm {

enum class Method { Cox, Gee, Gmm, Pem, BayesGmm };

inline Method parse_method(const std::string& name) {
  if (name == "cox") return Method::Cox;
  if (name == "gee") return Method::Gee;
  if (name == "gmm") return Method::Gmm;
  if (name == "pem") return Method::Pem;
  if (name == "bgmm" || name == "bayes-gmm") return Method::BayesGmm;
  throw std::invalid_argument("unknown method '" + name + "' (expected cox, gee, gmm, pem, bgmm)");
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::Cox: return "cox";
    case Method::Gee: return "gee";
    case Method::Gmm: return "gmm";
    case Method::Pem: return "pem";
    case Method::BayesGmm: return "bgmm";
  }
  return "?";
}

inline std::string display_name(Method m) {
  switch (m) {
    case Method::Cox: return "Cox";
    case Method::Gee: return "GEE";
    case Method::Gmm: return "GMM";
    case Method::Pem: return "PEM";
    case Method::BayesGmm: return "Bayesian GMM";
  }
  return "?";
}

inline bool is_bayesian(Method m) { return m == Method::Pem || m == Method::BayesGmm; }

/// Comma-separated method list; empty or repeated entries are errors.
inline std::vector<Method> parse_methods(const std::string& list) {
  std::vector<Method> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const Method m = parse_method(item);
    if (std::find(out.begin(), out.end(), m) != out.end())
      throw std::invalid_argument("method '" + item + "' listed twice");
    out.push_back(m);
  }
  if (out.empty()) throw std::invalid_argument("methods list is empty");
  return out;
}

enum class PointEstimate { Mean, Median };

inline PointEstimate parse_point_estimate(const std::string& s) {
  if (s == "mean") return PointEstimate::Mean;
  if (s == "median") return PointEstimate::Median;
  throw std::invalid_argument("unknown point estimate '" + s + "' (expected mean|median)");
}

inline std::string to_string(PointEstimate p) { return p == PointEstimate::Mean ? "mean" : "median"; }

/// Chain settings used at desk scale. Random-walk Metropolis needs longer
/// chains than 3 x 5000 to keep every R-hat below 1.01.
inline McmcConfig desk_bayes_gmm_chains() {
  McmcConfig c;
  c.warmup = 1000;
  c.iterations = 10000;
  c.thin = 5;
  c.covariance_start = -1;
  return c;
}

inline McmcConfig desk_pem_chains() {
  McmcConfig c;
  c.warmup = 2000;
  c.iterations = 40000;
  c.thin = 10;
  c.covariance_start = -1;
  return c;
}

/// 3 chains of 5000 iterations after 1000 warm-up, thinned by 5.
inline McmcConfig paper_chains() {
  McmcConfig c;
  c.covariance_start = -1;
  return c;
}

struct MethodSettings {
  std::size_t time_points = 5;
  GridRule grid = GridRule::EventQuantile;
  CorrelationKind correlation = CorrelationKind::Independence;
  McmcConfig bayes_gmm_mcmc = desk_bayes_gmm_chains();
  McmcConfig pem_mcmc = desk_pem_chains();
  /// Defaults to N(0, 10^2), or N(0, 1) for n <= 100.
  std::optional<PriorSpec> prior;
  std::vector<double> epsilons{0.01, 0.05, 0.1};
  PointEstimate point = PointEstimate::Mean;
  double level = 0.95;
};

/// Treatment-effect estimate of one method on one dataset.
struct Estimate {
  bool ok = false;
  double value = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  double lower = std::numeric_limits<double>::quiet_NaN();
  double upper = std::numeric_limits<double>::quiet_NaN();
  double rhat = std::numeric_limits<double>::quiet_NaN();  // Bayesian fits only
  std::string message;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace detail {

inline Estimate from_fit(const FitResult& fit, Eigen::Index index, double level) {
  Estimate e;
  e.ok = fit.converged && std::isfinite(fit.se(index));
  e.value = fit.beta(index);
  e.se = fit.se(index);
  const double z = normal_quantile(0.5 + 0.5 * level);
  e.lower = e.value - z * e.se;
  e.upper = e.value + z * e.se;
  e.message = fit.message;
  return e;
}

inline Estimate from_posterior(const PosteriorSummary& s, const PosteriorDraws& d,
                               Eigen::Index index, PointEstimate point, bool flagged,
                               const std::string& advice) {
  const ParameterSummary& p = s.parameters[static_cast<std::size_t>(index)];
  Estimate e;
  e.ok = !flagged;
  e.value = point == PointEstimate::Mean ? p.mean : p.median;
  e.se = p.sd;
  e.lower = p.lower;
  e.upper = p.upper;
  e.rhat = d.max_rhat();
  e.message = advice;
  return e;
}

}  // namespace detail

/// Fit each method on the same dataset. Failures come back as estimates with
/// ok = false and the error text.
inline std::vector<Estimate> estimate_all(const SurvivalDataset& data,
                                          const std::vector<Method>& methods,
                                          const MethodSettings& settings, std::uint64_t seed) {
  std::vector<Estimate> out(methods.size());
  std::optional<TimeGrid> grid;
  std::optional<PseudoObsMatrix> y;
  std::optional<DesignMatrix> X;
  const Eigen::Index treat = DesignMatrix::treatment_column;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    try {
      if (methods[m] != Method::Cox && methods[m] != Method::Pem && !y) {
        grid = select_time_grid(data, settings.time_points, settings.grid);
        y = pseudo_observations(data, *grid);
        X = build_design(data, *grid);
      }
      switch (methods[m]) {
        case Method::Cox:
          out[m] = detail::from_fit(fit_cox(data), 0, settings.level);
          break;
        case Method::Gee:
          out[m] = detail::from_fit(fit_gee(*y, *X, settings.correlation), treat, settings.level);
          break;
        case Method::Gmm:
          out[m] = detail::from_fit(fit_gmm(*y, *X, make_basis(settings.correlation, X->time_points)),
                                    treat, settings.level);
          break;
        case Method::Pem: {
          PemOptions o;
          o.mcmc = settings.pem_mcmc;
          o.mcmc.seed = mix_seed(seed, 11);
          o.level = settings.level;
          const PemFit f = fit_pem(data, o);
          out[m] = detail::from_posterior(f.summary, f.draws, f.spec.intervals(), settings.point,
                                          f.flagged, f.advice);
          break;
        }
        case Method::BayesGmm: {
          BayesGmmOptions o;
          o.mcmc = settings.bayes_gmm_mcmc;
          o.mcmc.seed = mix_seed(seed, 13);
          o.epsilons = settings.epsilons;
          o.level = settings.level;
          const PriorSpec prior = settings.prior ? *settings.prior : PriorSpec::defaults(X->subjects);
          const BayesGmmFit f =
              fit_bayes_gmm(*y, *X, make_basis(settings.correlation, X->time_points), prior, o);
          out[m] = detail::from_posterior(f.summary, f.draws, treat, settings.point, f.flagged,
                                          f.advice);
          break;
        }
      }
    } catch (const std::exception& e) {
      out[m] = Estimate{};
      out[m].message = e.what();
    }
  }
  return out;
}

struct ReplicateRecord {
  std::size_t replication = 0;
  double censored_fraction = 0.0;
  std::vector<Estimate> estimates;  // aligned with the method list
};

/// Operating characteristics of one method in one scenario. Failed fits are
/// excluded from every aggregate and counted in `failures`.
struct MetricsRow {
  std::string label;
  Method method = Method::Gee;
  int n = 0;
  double censoring_rate = 0.0;
  double log_hr = 0.0;
  std::size_t time_points = 5;
  std::string correlation = "IND";
  int replications = 0;
  int used = 0;
  int failures = 0;
  double bias = 0.0, bias_mcse = 0.0;
  double ase = 0.0, ase_mcse = 0.0;
  double rmse = 0.0, rmse_mcse = 0.0;
  double coverage = 0.0, coverage_mcse = 0.0;
  double median = 0.0;
  double realized_censoring = 0.0;
  std::string point = "mean";
  /// Failures above 5% of replications.
  bool flagged = false;
};

inline MetricsRow aggregate(const std::vector<ReplicateRecord>& records, std::size_t method_index,
                            Method method, double truth) {
  MetricsRow row;
  row.method = method;
  row.replications = static_cast<int>(records.size());
  std::vector<double> est, se, sq;
  int covered = 0;
  double censored = 0.0;
  for (const auto& r : records) {
    censored += r.censored_fraction;
    const Estimate& e = r.estimates[method_index];
    if (!e.ok) {
      ++row.failures;
      continue;
    }
    est.push_back(e.value);
    se.push_back(e.se);
    sq.push_back((e.value - truth) * (e.value - truth));
    if (e.lower <= truth && truth <= e.upper) ++covered;
  }
  if (!records.empty()) row.realized_censoring = censored / static_cast<double>(records.size());
  row.used = static_cast<int>(est.size());
  row.flagged = row.failures > 0.05 * row.replications;
  const double m = static_cast<double>(row.used);
  if (row.used == 0) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    row.bias = row.ase = row.rmse = row.coverage = row.median = nan;
    row.bias_mcse = row.ase_mcse = row.rmse_mcse = row.coverage_mcse = nan;
    return row;
  }
  auto sd = [&](const std::vector<double>& v) {
    return v.size() > 1 ? std::sqrt(diagnostics::variance(v)) : 0.0;
  };
  row.bias = diagnostics::mean(est) - truth;
  row.bias_mcse = sd(est) / std::sqrt(m);
  row.ase = diagnostics::mean(se);
  row.ase_mcse = sd(se) / std::sqrt(m);
  const double mse = diagnostics::mean(sq);
  row.rmse = std::sqrt(mse);
  // delta method on sqrt(mean squared error)
  row.rmse_mcse = row.rmse > 0.0 ? sd(sq) / std::sqrt(m) / (2.0 * row.rmse) : 0.0;
  row.coverage = covered / m;
  row.coverage_mcse = std::sqrt(row.coverage * (1.0 - row.coverage) / m);
  row.median = diagnostics::quantile(est, 0.5);
  return row;
}

struct ScenarioResult {
  Scenario scenario;
  MethodSettings settings;
  std::vector<Method> methods;
  std::string label;
  double censoring_bound = 0.0;
  std::vector<ReplicateRecord> records;
  std::vector<MetricsRow> rows;
};

/// Default worker count: hardware concurrency, at least 1.
inline int default_threads() {
  return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

/// Simulate `scenario.replications` trials and fit every method on each.
/// Replication r always sees the dataset generated from (seed, r).
inline ScenarioResult run_scenario(const Scenario& scenario, const std::vector<Method>& methods,
                                   MethodSettings settings, int threads = 1,
                                   std::string label = "") {
  if (methods.empty()) throw std::invalid_argument("methods list is empty");
  if (scenario.replications < 1) throw std::invalid_argument("replications must be positive");
  settings.bayes_gmm_mcmc.parallel_chains = false;
  settings.pem_mcmc.parallel_chains = false;

  ScenarioResult result;
  result.scenario = scenario;
  result.settings = settings;
  result.methods = methods;
  result.label = label.empty() ? scenario.name : std::move(label);
  result.censoring_bound = calibrate_censoring(scenario);
  result.records.resize(static_cast<std::size_t>(scenario.replications));

  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(std::max(1, threads)));
  auto worker = [&](std::size_t w) {
    try {
      for (int r = next++; r < scenario.replications; r = next++) {
        const auto rep = static_cast<std::uint64_t>(r);
        const SurvivalDataset data = generate_trial(scenario, result.censoring_bound, rep);
        ReplicateRecord rec;
        rec.replication = rep;
        rec.censored_fraction =
            1.0 - static_cast<double>(data.event_count()) / static_cast<double>(data.size());
        rec.estimates = estimate_all(data, methods, settings, mix_seed(scenario.seed, rep));
        result.records[static_cast<std::size_t>(r)] = std::move(rec);
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  const int workers = std::clamp(threads, 1, scenario.replications);
  if (workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker, static_cast<std::size_t>(w));
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  for (std::size_t m = 0; m < methods.size(); ++m) {
    MetricsRow row = aggregate(result.records, m, methods[m], scenario.log_hr);
    row.label = result.label;
    row.n = scenario.n;
    row.censoring_rate = scenario.censoring_rate;
    row.log_hr = scenario.log_hr;
    row.time_points = settings.time_points;
    row.correlation = to_string(settings.correlation);
    row.point = to_string(settings.point);
    result.rows.push_back(row);
  }
  return result;
}

/// One scenario of a named grid with its settings.
struct GridCell {
  std::string label;
  Scenario scenario;
  MethodSettings settings;
  std::vector<Method> methods;
};

/// Rerun the base scenario once per number of time points.
inline std::vector<ScenarioResult> sensitivity_grid(const Scenario& base,
                                                    const std::vector<Method>& methods,
                                                    const MethodSettings& settings,
                                                    const std::vector<std::size_t>& time_points,
                                                    int threads = 1) {
  std::vector<ScenarioResult> out;
  for (std::size_t K : time_points) {
    MethodSettings s = settings;
    s.time_points = K;
    out.push_back(run_scenario(base, methods, s, threads, "K=" + std::to_string(K)));
  }
  return out;
}

/// Rerun the base scenario once per working correlation.
inline std::vector<ScenarioResult> sensitivity_grid(const Scenario& base,
                                                    const std::vector<Method>& methods,
                                                    const MethodSettings& settings,
                                                    const std::vector<CorrelationKind>& kinds,
                                                    int threads = 1) {
  std::vector<ScenarioResult> out;
  for (CorrelationKind k : kinds) {
    MethodSettings s = settings;
    s.correlation = k;
    out.push_back(run_scenario(base, methods, s, threads, to_string(k)));
  }
  return out;
}

inline const std::vector<std::string>& grid_names() {
  static const std::vector<std::string> names{"core", "table1", "table2", "table3", "table4", "ksens"};
  return names;
}

inline std::string format_number(double v, const char* fmt = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

/// Replications per cell at desk scale: 200 for frequentist-only runs,
/// 50 when a Bayesian method is included.
inline int desk_replications(const std::vector<Method>& methods) {
  return std::any_of(methods.begin(), methods.end(), is_bayesian) ? 50 : 200;
}

/// 1000 replications and 3 x 5000 chains.
inline void apply_paper_scale(Scenario& scenario, MethodSettings& settings) {
  scenario.replications = 1000;
  settings.bayes_gmm_mcmc = settings.pem_mcmc = paper_chains();
}

/// Cells of a named grid, each varying one knob of `base` / `settings`.
/// Cell seeds derive from the base seed and the cell position.
inline std::vector<GridCell> named_grid(const std::string& name, const Scenario& base,
                                        const MethodSettings& settings,
                                        const std::vector<Method>& methods) {
  const std::uint64_t seed = base.seed;
  std::vector<GridCell> cells;
  auto add = [&](std::string label, Scenario s, MethodSettings st) {
    s.name = name;
    s.seed = mix_seed(seed, cells.size());
    cells.push_back({std::move(label), s, st, methods});
  };
  if (name == "core") {
    add("core", base, settings);
  } else if (name == "table1") {
    for (int n : {50, 100, 200, 500, 1000}) {
      Scenario s = base;
      s.n = n;
      add("n=" + std::to_string(n), s, settings);
    }
  } else if (name == "table2") {
    for (double cr : {0.05, 0.10, 0.20, 0.30, 0.70}) {
      Scenario s = base;
      s.censoring_rate = cr;
      add("CR=" + format_number(100 * cr, "%.0f") + "%", s, settings);
    }
  } else if (name == "table3") {
    for (double b : {-0.5, -0.3, -0.1}) {
      Scenario s = base;
      s.log_hr = b;
      add("logHR=" + format_number(b, "%.1f"), s, settings);
    }
  } else if (name == "table4") {
    for (CorrelationKind k : {CorrelationKind::Independence, CorrelationKind::Exchangeable,
                              CorrelationKind::AR1}) {
      MethodSettings st = settings;
      st.correlation = k;
      add(to_string(k), base, st);
    }
  } else if (name == "ksens") {
    for (std::size_t K : {5u, 7u, 10u}) {
      MethodSettings st = settings;
      st.time_points = K;
      add("K=" + std::to_string(K), base, st);
    }
  } else {
    std::string all;
    for (const auto& g : grid_names()) all += (all.empty() ? "" : ", ") + g;
    throw std::invalid_argument("unknown grid '" + name + "' (allowed: " + all + ")");
  }
  return cells;
}

inline ScenarioResult run_cell(const GridCell& cell, int threads = 1) {
  return run_scenario(cell.scenario, cell.methods, cell.settings, threads, cell.label);
}

inline void write_metrics_csv(std::ostream& os, const std::vector<ScenarioResult>& results) {
  os << "scenario,method,n,censoring_rate,log_hr,time_points,correlation,replications,used,"
        "failures,flagged,bias,bias_mcse,ase,ase_mcse,rmse,rmse_mcse,coverage,coverage_mcse,"
        "median,realized_censoring,point_estimate\n";
  const char* g = "%.10g";
  for (const auto& res : results)
    for (const auto& r : res.rows)
      os << r.label << ',' << to_string(r.method) << ',' << r.n << ','
         << format_number(r.censoring_rate, g) << ',' << format_number(r.log_hr, g) << ','
         << r.time_points << ',' << r.correlation << ',' << r.replications << ',' << r.used << ','
         << r.failures << ',' << (r.flagged ? 1 : 0) << ',' << format_number(r.bias, g) << ','
         << format_number(r.bias_mcse, g) << ',' << format_number(r.ase, g) << ','
         << format_number(r.ase_mcse, g) << ',' << format_number(r.rmse, g) << ','
         << format_number(r.rmse_mcse, g) << ',' << format_number(r.coverage, g) << ','
         << format_number(r.coverage_mcse, g) << ',' << format_number(r.median, g) << ','
         << format_number(r.realized_censoring, g) << ',' << r.point << '\n';
}

/// Plain-text table with frequentist methods above Bayesian ones.
inline std::string format_table(const std::vector<ScenarioResult>& results) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-14s %-14s %9s %7s %7s %13s %6s\n", "Scenario", "Method",
                "Bias", "ASE", "RMSE", "Coverage (%)", "Fails");
  const std::string header = line;
  for (const bool bayes : {false, true}) {
    bool any = false;
    for (const auto& res : results)
      for (const auto& r : res.rows) any = any || is_bayesian(r.method) == bayes;
    if (!any) continue;
    os << (bayes ? "Bayesian\n" : "Frequentist\n") << header;
    for (const auto& res : results)
      for (const auto& r : res.rows) {
        if (is_bayesian(r.method) != bayes) continue;
        std::snprintf(line, sizeof line, "%-14s %-14s %9.4f %7.3f %7.3f %6.1f (%4.1f) %4d%s\n",
                      r.label.c_str(), display_name(r.method).c_str(), r.bias, r.ase, r.rmse,
                      100 * r.coverage, 100 * r.coverage_mcse, r.failures, r.flagged ? " *" : "");
        os << line;
      }
    os << '\n';
  }
  bool flagged = false;
  for (const auto& res : results)
    for (const auto& r : res.rows) flagged = flagged || r.flagged;
  if (flagged) os << "* more than 5% of replications failed to converge\n";
  return os.str();
}

}  // namespace pseudogmm
