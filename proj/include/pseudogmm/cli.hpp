#pragma once

// Command-line front end: CSV ingestion, the analyze / simulate / pseudo /
// generate subcommands and their report files.

#include "pseudogmm/sim.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pseudogmm::cli {

enum ExitCode : int { Success = 0, UsageFailure = 1, DataFailure = 2, ConvergenceFailure = 3 };

/// Invalid option values or combinations.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Unreadable, malformed or unusable input data.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Header plus rows of raw fields; `lines` holds the 1-based source line of each row.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> lines;

  std::size_t column(const std::string& name) const {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name) return c;
    throw DataError("column '" + name + "' not found in header");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  std::string out = s.substr(b, e - b + 1);
  if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
  return out;
}

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Comma-separated file with a header row. Blank lines are skipped; every
/// other row must have as many fields as the header.
inline CsvTable read_csv(std::istream& in, const std::string& source) {
  CsvTable t;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split(line);
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size())
      throw DataError(source + ":" + std::to_string(number) + ": expected " +
                      std::to_string(t.header.size()) + " fields, found " +
                      std::to_string(fields.size()));
    t.rows.push_back(std::move(fields));
    t.lines.push_back(number);
  }
  if (t.header.empty()) throw DataError(source + ": file is empty");
  return t;
}

inline CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_csv(in, path);
}

struct ColumnMap {
  std::string time = "time";
  std::string status = "status";
  std::string arm = "arm";
  std::vector<std::string> covariates;
};

/// Survival dataset from a CSV table; errors name the offending line.
inline SurvivalDataset to_dataset(const CsvTable& t, const ColumnMap& map,
                                  const std::string& source) {
  const std::size_t ct = t.column(map.time), cs = t.column(map.status), ca = t.column(map.arm);
  std::vector<std::size_t> cc;
  for (const auto& c : map.covariates) cc.push_back(t.column(c));
  if (t.rows.empty()) throw DataError(source + ": no data rows");

  const std::size_t n = t.rows.size();
  std::vector<double> time(n);
  std::vector<int> status(n), arm(n);
  Eigen::MatrixXd cov(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cc.size()));
  for (std::size_t i = 0; i < n; ++i) {
    const auto where = source + ":" + std::to_string(t.lines[i]) + ": ";
    auto number = [&](std::size_t col) {
      const std::string& f = t.rows[i][col];
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(f, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (f.empty() || used != f.size() || !std::isfinite(v))
        throw DataError(where + "column '" + t.header[col] + "' value '" + f + "' is not a number");
      return v;
    };
    auto binary = [&](std::size_t col) {
      const double v = number(col);
      if (v != 0.0 && v != 1.0)
        throw DataError(where + "column '" + t.header[col] + "' must be 0 or 1");
      return static_cast<int>(v);
    };
    time[i] = number(ct);
    if (!(time[i] > 0.0)) throw DataError(where + "time must be positive");
    status[i] = binary(cs);
    arm[i] = binary(ca);
    for (std::size_t c = 0; c < cc.size(); ++c)
      cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = number(cc[c]);
  }
  try {
    return SurvivalDataset(std::move(time), std::move(status), std::move(arm), std::move(cov),
                           map.covariates);
  } catch (const std::invalid_argument& e) {
    throw DataError(source + ": " + e.what());
  }
}

inline SurvivalDataset read_dataset(const std::string& path, const ColumnMap& map) {
  return to_dataset(read_csv_file(path), map, path);
}

inline void write_dataset_csv(std::ostream& os, const SurvivalDataset& data) {
  os << "time,status,arm";
  for (const auto& name : data.covariate_names()) os << ',' << name;
  os << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    os << detail::fmt(data.time()[i]) << ',' << data.status()[i] << ',' << data.arm()[i];
    for (Eigen::Index c = 0; c < data.covariates().cols(); ++c)
      os << ',' << detail::fmt(data.covariates()(static_cast<Eigen::Index>(i), c));
    os << '\n';
  }
}

/// Tail threshold: a number or log(x).
inline double parse_threshold(const std::string& s) {
  const std::string t = detail::trim(s);
  try {
    std::size_t used = 0;
    double v = 0.0;
    if (t.rfind("log(", 0) == 0 && t.back() == ')') {
      const std::string inner = t.substr(4, t.size() - 5);
      v = std::log(std::stod(inner, &used));
      if (used != inner.size()) throw std::invalid_argument("");
    } else {
      v = std::stod(t, &used);
      if (used != t.size()) throw std::invalid_argument("");
    }
    if (!std::isfinite(v)) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw UsageError("tail threshold '" + s + "' is not a finite number or log(x)");
  }
}

struct ChainOptions {
  int chains = 3;
  std::optional<int> warmup;
  std::optional<int> iterations;
  std::optional<int> thin;

  McmcConfig apply(McmcConfig c) const {
    c.chains = chains;
    if (warmup) c.warmup = *warmup;
    if (iterations) c.iterations = *iterations;
    if (thin) c.thin = *thin;
    if (c.chains < 1 || c.warmup < 0 || c.iterations < 1 || c.thin < 1)
      throw UsageError("chains, iterations and thin must be positive; warmup non-negative");
    return c;
  }
};

struct AnalysisConfig {
  std::string input;
  ColumnMap columns;
  std::string methods = "cox,gee,gmm,pem,bgmm";
  std::size_t time_points = 5;
  std::string grid_rule = "quantile";
  std::string correlation = "IND";
  std::string prior_family = "normal";
  std::optional<double> prior_scale;
  std::vector<double> epsilons{0.01, 0.05, 0.1};
  ChainOptions chains;
  std::vector<std::string> tails;
  double level = 0.95;
  std::string output = "results";
  std::uint64_t seed = 1;
  bool draws = false;
  int threads = 1;
};

struct SimulateConfig {
  std::string grid = "core";
  std::optional<int> nsim;
  std::string methods = "cox,gee,gmm";
  std::optional<int> n;
  std::optional<double> censoring;
  std::optional<double> log_hr;
  std::size_t time_points = 5;
  std::string grid_rule = "quantile";
  std::string correlation = "IND";
  std::string point = "mean";
  ChainOptions chains;
  bool paper_scale = false;
  std::uint64_t seed = Scenario{}.seed;
  std::string output = "simulation";
  int threads = 1;
};

struct PseudoConfig {
  std::string input;
  ColumnMap columns;
  std::size_t time_points = 5;
  std::string grid_rule = "quantile";
  std::string output = "pseudo.csv";
};

struct GenerateConfig {
  int n = 500;
  double censoring = 0.20;
  double log_hr = -0.3;
  std::uint64_t seed = Scenario{}.seed;
  std::uint64_t replication = 0;
  /// Adds an independent binary covariate with this success probability.
  std::optional<double> covariate_probability;
  std::string covariate_name = "age_group";
  std::string output = "trial.csv";
};

namespace detail {

inline std::filesystem::path prepare_directory(const std::string& dir) {
  std::filesystem::path p(dir);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw DataError("cannot create output directory '" + dir + "': " + ec.message());
  return p;
}

inline std::ofstream open_output(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  return out;
}

struct MethodReport {
  Method method;
  std::vector<std::string> names;
  std::vector<double> estimate, se, lower, upper, rhat, ess;
  Eigen::Index treatment = 0;
  bool ok = false;
  std::string message;
  std::optional<PosteriorDraws> draws;
  std::optional<PosteriorSummary> summary;
};

inline MethodReport frequentist_report(Method m, const FitResult& fit, Eigen::Index treatment,
                                       double level) {
  MethodReport r{m, fit.names, {}, {}, {}, {}, {}, {}, treatment, fit.converged, fit.message, {}, {}};
  const double z = normal_quantile(0.5 + 0.5 * level);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (Eigen::Index p = 0; p < fit.beta.size(); ++p) {
    r.estimate.push_back(fit.beta(p));
    r.se.push_back(fit.se(p));
    r.lower.push_back(fit.beta(p) - z * fit.se(p));
    r.upper.push_back(fit.beta(p) + z * fit.se(p));
    r.rhat.push_back(nan);
    r.ess.push_back(nan);
  }
  if (r.ok && !fit.se.allFinite()) {
    r.ok = false;
    r.message = "covariance is not finite";
  }
  return r;
}

inline MethodReport bayesian_report(Method m, PosteriorDraws draws, PosteriorSummary summary,
                                    Eigen::Index treatment, bool flagged, std::string advice,
                                    PointEstimate point) {
  MethodReport r{m, draws.names, {}, {}, {}, {}, {}, {}, treatment, !flagged, std::move(advice), {}, {}};
  for (const auto& p : summary.parameters) {
    r.estimate.push_back(point == PointEstimate::Mean ? p.mean : p.median);
    r.se.push_back(p.sd);
    r.lower.push_back(p.lower);
    r.upper.push_back(p.upper);
    r.rhat.push_back(p.rhat);
    r.ess.push_back(p.ess_bulk);
  }
  r.draws = std::move(draws);
  r.summary = std::move(summary);
  return r;
}

}  // namespace detail

/// Fit every requested method on one dataset and write coefficients.csv,
/// forest.csv, summary.json and, on request, draws.csv. Returns
/// ConvergenceFailure when any fit failed or was flagged.
inline int cmd_analyze(const AnalysisConfig& cfg, std::ostream& log) {
  std::vector<Method> methods;
  try {
    methods = parse_methods(cfg.methods);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const GridRule rule = parse_grid_rule(cfg.grid_rule);
  const CorrelationKind kind = parse_correlation(cfg.correlation);
  PriorSpec prior_template;
  prior_template.family = parse_prior_family(cfg.prior_family);
  std::vector<double> thresholds;
  for (const auto& t : cfg.tails) thresholds.push_back(parse_threshold(t));
  if (cfg.epsilons.empty()) throw UsageError("at least one epsilon is required");
  if (!(cfg.level > 0.0 && cfg.level < 1.0)) throw UsageError("level must lie in (0, 1)");

  const SurvivalDataset data = read_dataset(cfg.input, cfg.columns);
  log << "read " << data.size() << " subjects, " << data.event_count() << " events, "
      << data.covariates().cols() << " covariate(s) from " << cfg.input << '\n';

  std::optional<TimeGrid> grid;
  std::optional<PseudoObsMatrix> y;
  std::optional<DesignMatrix> X;
  auto pseudo = [&] {
    if (y) return;
    try {
      grid = select_time_grid(data, cfg.time_points, rule);
      y = pseudo_observations(data, *grid);
      X = build_design(data, *grid);
    } catch (const std::invalid_argument& e) {
      throw DataError(std::string("pseudo-observations: ") + e.what());
    }
  };

  std::vector<detail::MethodReport> reports;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    const Method method = methods[m];
    McmcConfig mcmc = cfg.chains.apply(McmcConfig{});
    mcmc.seed = mix_seed(cfg.seed, m);
    mcmc.parallel_chains = cfg.threads > 1;
    mcmc.covariance_start = -1;
    try {
      switch (method) {
        case Method::Cox:
          reports.push_back(detail::frequentist_report(method, fit_cox(data), 0, cfg.level));
          break;
        case Method::Gee:
          pseudo();
          reports.push_back(detail::frequentist_report(method, fit_gee(*y, *X, kind),
                                                       DesignMatrix::treatment_column, cfg.level));
          break;
        case Method::Gmm:
          pseudo();
          reports.push_back(detail::frequentist_report(
              method, fit_gmm(*y, *X, make_basis(kind, X->time_points)),
              DesignMatrix::treatment_column, cfg.level));
          break;
        case Method::Pem: {
          PemOptions o;
          o.mcmc = cfg.chains.apply(desk_pem_chains());
          o.mcmc.seed = mcmc.seed;
          o.mcmc.parallel_chains = mcmc.parallel_chains;
          o.level = cfg.level;
          const PemSpec spec = make_pem_spec(data);
          for (double t : thresholds) o.tails.push_back({spec.intervals(), t});
          PemFit f = fit_pem(data, o);
          for (const auto& w : f.spec.warnings) log << "pem: " << w << '\n';
          reports.push_back(detail::bayesian_report(method, std::move(f.draws), std::move(f.summary),
                                                    f.spec.intervals(), f.flagged, f.advice,
                                                    PointEstimate::Mean));
          break;
        }
        case Method::BayesGmm: {
          pseudo();
          BayesGmmOptions o;
          o.mcmc = cfg.chains.apply(desk_bayes_gmm_chains());
          o.mcmc.seed = mcmc.seed;
          o.mcmc.parallel_chains = mcmc.parallel_chains;
          o.epsilons = cfg.epsilons;
          o.level = cfg.level;
          for (double t : thresholds) o.tails.push_back({DesignMatrix::treatment_column, t});
          PriorSpec prior = PriorSpec::defaults(X->subjects);
          prior.family = prior_template.family;
          if (cfg.prior_scale) prior.scale = *cfg.prior_scale;
          BayesGmmFit f = fit_bayes_gmm(*y, *X, make_basis(kind, X->time_points), prior, o);
          reports.push_back(detail::bayesian_report(method, std::move(f.draws), std::move(f.summary),
                                                    DesignMatrix::treatment_column, f.flagged,
                                                    f.advice, PointEstimate::Mean));
          break;
        }
      }
    } catch (const DataError&) {
      throw;
    } catch (const std::exception& e) {
      detail::MethodReport r;
      r.method = method;
      r.message = e.what();
      reports.push_back(std::move(r));
    }
    const auto& r = reports.back();
    log << display_name(method) << ": " << (r.ok ? "ok" : "FAILED")
        << (r.message.empty() ? "" : " (" + r.message + ")") << '\n';
  }

  const auto dir = detail::prepare_directory(cfg.output);
  {
    auto out = detail::open_output(dir / "coefficients.csv");
    out << "method,parameter,estimate,se,lower,upper,rhat,ess_bulk,ok\n";
    for (const auto& r : reports)
      for (std::size_t p = 0; p < r.names.size(); ++p)
        out << to_string(r.method) << ',' << r.names[p] << ',' << detail::fmt(r.estimate[p]) << ','
            << detail::fmt(r.se[p]) << ',' << detail::fmt(r.lower[p]) << ','
            << detail::fmt(r.upper[p]) << ',' << detail::fmt(r.rhat[p]) << ','
            << detail::fmt(r.ess[p]) << ',' << (r.ok ? 1 : 0) << '\n';
  }
  {
    auto out = detail::open_output(dir / "forest.csv");
    out << "method,estimate,lower,upper,hazard_ratio,hr_lower,hr_upper\n";
    for (const auto& r : reports) {
      if (r.estimate.empty()) continue;
      const auto t = static_cast<std::size_t>(r.treatment);
      out << display_name(r.method) << ',' << detail::fmt(r.estimate[t]) << ','
          << detail::fmt(r.lower[t]) << ',' << detail::fmt(r.upper[t]) << ','
          << detail::fmt(std::exp(r.estimate[t])) << ',' << detail::fmt(std::exp(r.lower[t])) << ','
          << detail::fmt(std::exp(r.upper[t])) << '\n';
    }
  }
  nlohmann::json summary;
  summary["input"] = cfg.input;
  summary["subjects"] = data.size();
  summary["events"] = data.event_count();
  summary["seed"] = cfg.seed;
  summary["level"] = cfg.level;
  summary["point_estimate"] = "mean";
  if (grid) summary["time_grid"] = grid->points;
  bool all_ok = true;
  for (const auto& r : reports) {
    all_ok = all_ok && r.ok;
    nlohmann::json j;
    j["method"] = to_string(r.method);
    j["ok"] = r.ok;
    j["message"] = r.message;
    if (r.summary && r.draws) {
      j["posterior"] = summary_json(*r.summary, *r.draws);
    } else {
      for (std::size_t p = 0; p < r.names.size(); ++p)
        j["coefficients"].push_back({{"name", r.names[p]},
                                     {"estimate", r.estimate[p]},
                                     {"se", r.se[p]},
                                     {"lower", r.lower[p]},
                                     {"upper", r.upper[p]}});
    }
    summary["methods"].push_back(j);
  }
  detail::open_output(dir / "summary.json") << summary.dump(2) << '\n';
  if (cfg.draws) {
    auto out = detail::open_output(dir / "draws.csv");
    out << "method,";
    bool header = true;
    for (const auto& r : reports) {
      if (!r.draws) continue;
      std::ostringstream body;
      write_draws_csv(body, *r.draws);
      std::string line;
      std::istringstream lines(body.str());
      std::getline(lines, line);
      if (header) out << line << '\n';
      header = false;
      while (std::getline(lines, line)) out << to_string(r.method) << ',' << line << '\n';
    }
    if (header) out << "chain,iteration,parameter,value\n";
  }
  log << "wrote results to " << dir.string() << '\n';
  return all_ok ? Success : ConvergenceFailure;
}

/// Run a named scenario grid; writes metrics.csv and table.txt.
inline int cmd_simulate(const SimulateConfig& cfg, std::ostream& log) {
  std::vector<Method> methods;
  try {
    methods = parse_methods(cfg.methods);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  Scenario base;
  base.seed = cfg.seed;
  if (cfg.n) base.n = *cfg.n;
  if (cfg.censoring) base.censoring_rate = *cfg.censoring;
  if (cfg.log_hr) base.log_hr = *cfg.log_hr;
  MethodSettings settings;
  settings.time_points = cfg.time_points;
  settings.grid = parse_grid_rule(cfg.grid_rule);
  settings.correlation = parse_correlation(cfg.correlation);
  settings.point = parse_point_estimate(cfg.point);
  base.replications = desk_replications(methods);
  if (cfg.paper_scale) apply_paper_scale(base, settings);
  settings.bayes_gmm_mcmc = cfg.chains.apply(settings.bayes_gmm_mcmc);
  settings.pem_mcmc = cfg.chains.apply(settings.pem_mcmc);
  if (cfg.nsim) base.replications = *cfg.nsim;
  if (cfg.threads < 1) throw UsageError("threads must be at least 1");

  std::vector<GridCell> cells;
  try {
    base.validate();
    if (base.replications < 1) throw std::invalid_argument("nsim must be positive");
    cells = named_grid(cfg.grid, base, settings, methods);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  std::vector<ScenarioResult> results;
  for (const auto& cell : cells) {
    log << "scenario " << cell.label << ": " << cell.scenario.replications << " replications\n";
    try {
      results.push_back(run_cell(cell, cfg.threads));
    } catch (const std::invalid_argument& e) {
      throw UsageError(cell.label + ": " + e.what());
    }
  }
  const auto dir = detail::prepare_directory(cfg.output);
  {
    auto csv = detail::open_output(dir / "metrics.csv");
    write_metrics_csv(csv, results);
  }
  const std::string table = format_table(results);
  detail::open_output(dir / "table.txt") << table;
  log << table;
  for (const auto& r : results)
    for (const auto& row : r.rows)
      if (row.flagged) return ConvergenceFailure;
  return Success;
}

/// Long-format pseudo-observations (id, time, value).
inline int cmd_pseudo(const PseudoConfig& cfg, std::ostream& log) {
  const GridRule rule = parse_grid_rule(cfg.grid_rule);
  const SurvivalDataset data = read_dataset(cfg.input, cfg.columns);
  PseudoObsMatrix y;
  try {
    y = pseudo_observations(data, select_time_grid(data, cfg.time_points, rule));
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("pseudo-observations: ") + e.what());
  }
  std::filesystem::path p(cfg.output);
  if (p.has_parent_path()) detail::prepare_directory(p.parent_path().string());
  {
    auto csv = detail::open_output(p);
    write_pseudo_csv(csv, y);
  }
  log << "wrote " << y.rows() * y.cols() << " pseudo-observations to " << cfg.output << '\n';
  return Success;
}

/// One simulated trial as CSV.
inline int cmd_generate(const GenerateConfig& cfg, std::ostream& log) {
  Scenario s;
  s.n = cfg.n;
  s.censoring_rate = cfg.censoring;
  s.log_hr = cfg.log_hr;
  s.seed = cfg.seed;
  SurvivalDataset data;
  try {
    data = generate_trial(s, cfg.replication);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (cfg.covariate_probability) {
    const double p = *cfg.covariate_probability;
    if (!(p >= 0.0 && p <= 1.0)) throw UsageError("covariate probability must lie in [0, 1]");
    auto rng = replication_rng(mix_seed(cfg.seed, 7), cfg.replication);
    std::bernoulli_distribution draw(p);
    Eigen::MatrixXd cov(static_cast<Eigen::Index>(data.size()), 1);
    for (Eigen::Index i = 0; i < cov.rows(); ++i) cov(i, 0) = draw(rng) ? 1.0 : 0.0;
    data = SurvivalDataset(data.time(), data.status(), data.arm(), cov, {cfg.covariate_name});
  }
  std::filesystem::path p(cfg.output);
  if (p.has_parent_path()) detail::prepare_directory(p.parent_path().string());
  {
    auto csv = detail::open_output(p);
    write_dataset_csv(csv, data);
  }
  log << "wrote " << data.size() << " subjects (" << data.event_count() << " events) to "
      << cfg.output << '\n';
  return Success;
}

namespace detail {

inline void add_columns(CLI::App* app, ColumnMap& map) {
  app->add_option("--time-col", map.time, "Follow-up time column")->capture_default_str();
  app->add_option("--status-col", map.status, "Event indicator column (1 event, 0 censored)")
      ->capture_default_str();
  app->add_option("--arm-col", map.arm, "Treatment arm column (0/1)")->capture_default_str();
  app->add_option("--covariates", map.covariates, "Numeric covariate columns")->delimiter(',');
}

/// Config reader that assigns keys outside any section to the selected
/// subcommand, so config files can stay flat.
class FlatConfig : public CLI::ConfigTOML {
 public:
  explicit FlatConfig(const CLI::App* app) : app_(app) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    auto items = CLI::ConfigTOML::from_config(input);
    const auto selected = app_->get_subcommands();
    if (selected.empty()) return items;
    for (auto& item : items)
      if (item.parents.empty() && item.name != "++" && item.name != "--")
        item.parents = {selected.front()->get_name()};
    return items;
  }

 private:
  const CLI::App* app_;
};

inline void write_resolved_config(const CLI::App* sub, const std::string& dir,
                                  const std::string& file = "resolved-config.ini") {
  const auto path = prepare_directory(dir) / file;
  // unset optional values come out as "" and would not parse when read back
  std::istringstream all(sub->config_to_str(true, false));
  auto out = open_output(path);
  std::string line;
  while (std::getline(all, line))
    if (!line.ends_with("=\"\"")) out << line << '\n';
}

}  // namespace detail

/// Parse arguments and dispatch. Every subcommand takes `--config FILE` with
/// flat `key = value` lines named after the long options; flags override it.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Pseudo-observation survival regression: GEE, GMM and Bayesian GMM"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  app.set_config("--config", "", "Flat key = value file using long option names; flags override it");
  app.config_formatter(std::make_shared<detail::FlatConfig>(&app));
  app.fallthrough();

  AnalysisConfig acfg;
  auto* analyze = app.add_subcommand("analyze", "Fit the selected methods to a trial dataset");
  analyze->add_option("--input,-i", acfg.input, "CSV file with a header row")->required();
  detail::add_columns(analyze, acfg.columns);
  analyze->add_option("--methods", acfg.methods, "Comma list of cox,gee,gmm,pem,bgmm")
      ->capture_default_str();
  analyze->add_option("--time-points,-K", acfg.time_points, "Number of time points")
      ->capture_default_str();
  analyze->add_option("--grid-rule", acfg.grid_rule, "Time grid: quantile or time")
      ->capture_default_str();
  analyze->add_option("--correlation", acfg.correlation, "Working correlation: IND, EXCH or AR1")
      ->capture_default_str();
  analyze->add_option("--prior", acfg.prior_family, "Bayesian GMM prior family: normal or cauchy")
      ->capture_default_str();
  analyze->add_option("--prior-scale", acfg.prior_scale,
                      "Prior scale (default 10, or 1 when n <= 100)");
  analyze->add_option("--epsilons", acfg.epsilons, "Initial-value truncation levels")
      ->delimiter(',')
      ->capture_default_str();
  analyze->add_option("--chains", acfg.chains.chains, "Chains per Bayesian fit")->capture_default_str();
  analyze->add_option("--warmup", acfg.chains.warmup, "Warm-up iterations per chain");
  analyze->add_option("--iterations", acfg.chains.iterations, "Iterations per chain after warm-up");
  analyze->add_option("--thin", acfg.chains.thin, "Keep every thin-th draw");
  analyze->add_option("--tail", acfg.tails,
                      "Report P(log HR < threshold); a number or log(x), repeatable")
      ->delimiter(',');
  analyze->add_option("--level", acfg.level, "Interval level")->capture_default_str();
  analyze->add_option("--out,-o", acfg.output, "Output directory")->capture_default_str();
  analyze->add_option("--seed", acfg.seed, "Random seed")->capture_default_str();
  analyze->add_flag("--draws", acfg.draws, "Also write draws.csv");
  analyze->add_option("--threads", acfg.threads, "Worker threads")
      ->envname("PSEUDOGMM_THREADS")
      ->capture_default_str();

  SimulateConfig scfg;
  auto* simulate = app.add_subcommand("simulate", "Monte Carlo operating characteristics");
  simulate->add_option("--grid,--scenario", scfg.grid,
                       "core, table1 (n), table2 (censoring), table3 (log HR), table4 "
                       "(correlation) or ksens (time points)")
      ->capture_default_str();
  simulate->add_option("--nsim", scfg.nsim,
                       "Replications per cell (default 200, or 50 with a Bayesian method)");
  simulate->add_option("--methods", scfg.methods, "Comma list of cox,gee,gmm,pem,bgmm")
      ->capture_default_str();
  simulate->add_option("--n", scfg.n, "Sample size");
  simulate->add_option("--censoring", scfg.censoring, "Target censoring rate in (0, 1)");
  simulate->add_option("--log-hr", scfg.log_hr, "True log hazard ratio");
  simulate->add_option("--time-points,-K", scfg.time_points, "Number of time points")
      ->capture_default_str();
  simulate->add_option("--grid-rule", scfg.grid_rule, "Time grid: quantile or time")
      ->capture_default_str();
  simulate->add_option("--correlation", scfg.correlation, "Working correlation")
      ->capture_default_str();
  simulate->add_option("--point", scfg.point, "Bayesian point estimate: mean or median")
      ->capture_default_str();
  simulate->add_option("--chains", scfg.chains.chains, "Chains per Bayesian fit")
      ->capture_default_str();
  simulate->add_option("--warmup", scfg.chains.warmup, "Warm-up iterations per chain");
  simulate->add_option("--iterations", scfg.chains.iterations, "Iterations per chain");
  simulate->add_option("--thin", scfg.chains.thin, "Keep every thin-th draw");
  auto* paper = simulate->add_flag("--paper-scale", scfg.paper_scale,
                                   "1000 replications and 3 x 5000 chains");
  simulate->add_flag("--desk-scale", "Desk-scale replication counts and chains (default)")
      ->excludes(paper);
  simulate->add_option("--seed", scfg.seed, "Base seed")->capture_default_str();
  simulate->add_option("--out,-o", scfg.output, "Output directory")->capture_default_str();
  simulate->add_option("--threads", scfg.threads, "Worker threads")
      ->envname("PSEUDOGMM_THREADS")
      ->capture_default_str();

  PseudoConfig pcfg;
  auto* pseudo = app.add_subcommand("pseudo", "Write pseudo-observations in long format");
  pseudo->add_option("--input,-i", pcfg.input, "CSV file with a header row")->required();
  detail::add_columns(pseudo, pcfg.columns);
  pseudo->add_option("--time-points,-K", pcfg.time_points, "Number of time points")
      ->capture_default_str();
  pseudo->add_option("--grid-rule", pcfg.grid_rule, "Time grid: quantile or time")
      ->capture_default_str();
  pseudo->add_option("--out,-o", pcfg.output, "Output CSV")->capture_default_str();

  GenerateConfig gcfg;
  auto* generate = app.add_subcommand("generate", "Simulate one two-arm trial");
  generate->add_option("--n", gcfg.n, "Sample size (even)")->capture_default_str();
  generate->add_option("--censoring", gcfg.censoring, "Target censoring rate")->capture_default_str();
  generate->add_option("--log-hr", gcfg.log_hr, "True log hazard ratio")->capture_default_str();
  generate->add_option("--seed", gcfg.seed, "Base seed")->capture_default_str();
  generate->add_option("--replication", gcfg.replication, "Replication index")->capture_default_str();
  generate->add_option("--covariate", gcfg.covariate_probability,
                       "Add an independent binary covariate with this probability");
  generate->add_option("--covariate-name", gcfg.covariate_name, "Name of that covariate")
      ->capture_default_str();
  generate->add_option("--out,-o", gcfg.output, "Output CSV")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? Success : UsageFailure;
  }

  try {
    if (*analyze) {
      const int code = cmd_analyze(acfg, err);
      detail::write_resolved_config(analyze, acfg.output);
      return code;
    }
    if (*simulate) {
      const int code = cmd_simulate(scfg, out);
      detail::write_resolved_config(simulate, scfg.output);
      return code;
    }
    if (*pseudo) {
      const int code = cmd_pseudo(pcfg, err);
      const auto parent = std::filesystem::path(pcfg.output).parent_path();
      detail::write_resolved_config(pseudo, parent.empty() ? "." : parent.string(),
                                    "pseudo-config.ini");
      return code;
    }
    if (*generate) return cmd_generate(gcfg, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return UsageFailure;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return DataFailure;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return UsageFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return DataFailure;
  }
  return UsageFailure;
}

}  // namespace pseudogmm::cli
