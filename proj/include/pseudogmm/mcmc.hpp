#pragma once

// Multi-chain adaptive random-walk Metropolis with rank-normalised split
// R-hat and effective sample sizes.

#include "pseudogmm/fit_result.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pseudogmm {

/// Log density over a parameter vector; nullopt marks a point outside the
/// support. Must be deterministic and reentrant.
using LogDensity = std::function<std::optional<double>(const Eigen::VectorXd&)>;

struct McmcConfig {
  int chains = 3;
  int warmup = 1000;
  int iterations = 5000;  // per chain, after warm-up
  int thin = 5;
  std::uint64_t seed = 1;
  double target_acceptance = 0.234;
  /// Iteration from which the proposal covariance is learned from warm-up draws;
  /// negative keeps the starting covariance.
  int covariance_start = 200;
  bool parallel_chains = true;
  /// Starting proposal covariance; identity * 0.01 when absent.
  std::optional<Eigen::MatrixXd> proposal_covariance;
};

struct PosteriorDraws {
  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> chains;  // kept draws x P, one per chain
  int warmup = 0;
  int thin = 1;
  std::uint64_t seed = 0;
  std::vector<double> acceptance;         // post-warm-up acceptance rate per chain
  std::vector<long> support_violations;   // rejected out-of-support proposals per chain
  std::vector<double> proposal_scale;     // frozen scale multiplier per chain
  Eigen::VectorXd rhat;
  Eigen::VectorXd ess_bulk;
  Eigen::VectorXd ess_tail;

  Eigen::Index params() const { return chains.empty() ? 0 : chains.front().cols(); }
  Eigen::Index draws_per_chain() const { return chains.empty() ? 0 : chains.front().rows(); }

  /// All kept draws of parameter p, chain by chain.
  std::vector<double> pooled(Eigen::Index p) const {
    std::vector<double> out;
    for (const auto& c : chains)
      for (Eigen::Index t = 0; t < c.rows(); ++t) out.push_back(c(t, p));
    return out;
  }
  double max_rhat() const { return rhat.size() ? rhat.maxCoeff() : 0.0; }
};

namespace diagnostics {

/// Type-7 quantile of unsorted data.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

using Chains = std::vector<std::vector<double>>;

inline Chains split(const Chains& chains) {
  Chains out;
  for (const auto& c : chains) {
    const std::size_t half = c.size() / 2;
    out.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(half));
    out.emplace_back(c.end() - static_cast<std::ptrdiff_t>(half), c.end());
  }
  return out;
}

/// Replace values by normal scores of their pooled (average) ranks.
inline Chains rank_normalize(const Chains& chains) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t c = 0; c < chains.size(); ++c)
    for (std::size_t t = 0; t < chains[c].size(); ++t)
      all.emplace_back(chains[c][t], c * chains.front().size() + t);
  std::sort(all.begin(), all.end());
  const double S = static_cast<double>(all.size());
  std::vector<double> z(all.size());
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double rank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
    const double score = normal_quantile((rank - 0.375) / (S + 0.25));
    for (std::size_t k = i; k < j; ++k) z[all[k].second] = score;
    i = j;
  }
  Chains out = chains;
  for (std::size_t c = 0; c < chains.size(); ++c)
    for (std::size_t t = 0; t < chains[c].size(); ++t) out[c][t] = z[c * chains.front().size() + t];
  return out;
}

inline double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double variance(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

/// Classic potential scale reduction of already-split chains.
inline double rhat_basic(const Chains& chains) {
  const double n = static_cast<double>(chains.front().size());
  std::vector<double> means, vars;
  for (const auto& c : chains) {
    means.push_back(mean(c));
    vars.push_back(variance(c));
  }
  const double W = mean(vars);
  const double B_over_n = chains.size() > 1 ? variance(means) : 0.0;
  if (!(W > 0.0)) return B_over_n > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  return std::sqrt(((n - 1.0) / n * W + B_over_n) / W);
}

/// Multi-chain ESS with Geyer's initial monotone sequence.
inline double ess_basic(const Chains& chains) {
  const std::size_t m = chains.size();
  const std::size_t n = chains.front().size();
  if (n < 4) return static_cast<double>(m * n);
  std::vector<double> means(m), var0(m);
  for (std::size_t c = 0; c < m; ++c) {
    means[c] = mean(chains[c]);
    double s = 0.0;
    for (double x : chains[c]) s += (x - means[c]) * (x - means[c]);
    var0[c] = s / static_cast<double>(n);
  }
  auto acov = [&](std::size_t c, std::size_t lag) {
    double s = 0.0;
    for (std::size_t t = 0; t + lag < n; ++t)
      s += (chains[c][t] - means[c]) * (chains[c][t + lag] - means[c]);
    return s / static_cast<double>(n);
  };
  const double nn = static_cast<double>(n);
  double mean_var = 0.0;
  for (double v : var0) mean_var += v * nn / (nn - 1.0);
  mean_var /= static_cast<double>(m);
  double var_plus = mean_var * (nn - 1.0) / nn;
  if (m > 1) var_plus += variance(means);
  if (!(var_plus > 0.0)) return static_cast<double>(m * n);

  auto rho = [&](std::size_t lag) {
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) s += acov(c, lag);
    return 1.0 - (mean_var - s / static_cast<double>(m)) / var_plus;
  };

  std::vector<double> rho_hat{1.0, rho(1)};
  // the even lag of the last pair examined enters once when positive; a run
  // that ends on chain length gives up its final pair to that term
  double tail = 0.0;
  bool truncated = true;
  std::size_t t = 0;
  while (t + 4 < n) {
    const double r1 = rho(t + 2), r2 = rho(t + 3);
    if (!(r1 + r2 >= 0.0)) {
      tail = std::max(r1, 0.0);
      truncated = false;
      break;
    }
    rho_hat.push_back(r1);
    rho_hat.push_back(r2);
    t += 2;
  }
  if (truncated && rho_hat.size() > 2) {
    tail = std::max(rho_hat[rho_hat.size() - 2], 0.0);
    rho_hat.resize(rho_hat.size() - 2);
  }
  // initial monotone sequence on pair sums
  const std::size_t pairs = rho_hat.size() / 2;
  std::vector<double> pair_sum(pairs);
  for (std::size_t k = 0; k < pairs; ++k) pair_sum[k] = rho_hat[2 * k] + rho_hat[2 * k + 1];
  for (std::size_t k = 1; k < pairs; ++k) pair_sum[k] = std::min(pair_sum[k], pair_sum[k - 1]);
  double tau = -1.0;
  for (double p : pair_sum) tau += 2.0 * p;
  tau += tail;
  const double cap = static_cast<double>(m * n) * std::log10(static_cast<double>(m * n));
  tau = std::max(tau, 1.0 / std::log10(static_cast<double>(m * n)));
  return std::min(static_cast<double>(m * n) / tau, cap);
}

/// Rank-normalised split R-hat: max of the bulk and folded versions.
inline double rhat(const Chains& chains) {
  const Chains s = split(chains);
  std::vector<double> pooled;
  for (const auto& c : s) pooled.insert(pooled.end(), c.begin(), c.end());
  const double med = quantile(pooled, 0.5);
  Chains folded = s;
  for (auto& c : folded)
    for (auto& x : c) x = std::abs(x - med);
  return std::max(rhat_basic(rank_normalize(s)), rhat_basic(rank_normalize(folded)));
}

inline double ess_bulk(const Chains& chains) { return ess_basic(rank_normalize(split(chains))); }

inline Chains indicator(const Chains& chains, double cut) {
  Chains out = chains;
  for (auto& c : out)
    for (auto& x : c) x = x <= cut ? 1.0 : 0.0;
  return out;
}

inline double ess_tail(const Chains& chains) {
  std::vector<double> pooled;
  for (const auto& c : chains) pooled.insert(pooled.end(), c.begin(), c.end());
  const double q05 = quantile(pooled, 0.05), q95 = quantile(pooled, 0.95);
  return std::min(ess_basic(split(indicator(chains, q05))), ess_basic(split(indicator(chains, q95))));
}

/// ESS of the raw split chains, used for Monte Carlo standard errors.
inline double ess_mean(const Chains& chains) { return ess_basic(split(chains)); }

inline Chains parameter_chains(const PosteriorDraws& draws, Eigen::Index p) {
  Chains out;
  for (const auto& c : draws.chains) {
    std::vector<double> v(static_cast<std::size_t>(c.rows()));
    for (Eigen::Index t = 0; t < c.rows(); ++t) v[static_cast<std::size_t>(t)] = c(t, p);
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace diagnostics

namespace detail {

struct ChainOutput {
  Eigen::MatrixXd draws;
  double acceptance = 0.0;
  long violations = 0;
  double scale = 0.0;
};

inline std::mt19937_64 chain_rng(std::uint64_t seed, int chain) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(chain), 0x6d636d63u};
  return std::mt19937_64(seq);
}

inline Eigen::MatrixXd proposal_factor(const Eigen::MatrixXd& cov) {
  Eigen::MatrixXd reg = 0.5 * (cov + cov.transpose());
  const double jitter = 1e-10 * std::max(1e-300, reg.diagonal().cwiseAbs().maxCoeff());
  for (int attempt = 0; attempt < 8; ++attempt) {
    Eigen::LLT<Eigen::MatrixXd> llt(reg);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    reg.diagonal().array() += jitter * std::pow(100.0, attempt);
  }
  return reg.diagonal().cwiseAbs().cwiseSqrt().asDiagonal();
}

inline ChainOutput run_chain(const LogDensity& target, const Eigen::VectorXd& init,
                             const McmcConfig& cfg, int chain) {
  const Eigen::Index d = init.size();
  auto rng = chain_rng(cfg.seed, chain);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  Eigen::VectorXd x = init;
  std::optional<double> lp = target(x);
  if (!lp || !std::isfinite(*lp))
    throw std::invalid_argument("initial value of chain " + std::to_string(chain + 1) +
                                " lies outside the support of the target");

  Eigen::MatrixXd L = proposal_factor(cfg.proposal_covariance
                                          ? *cfg.proposal_covariance
                                          : Eigen::MatrixXd(0.01 * Eigen::MatrixXd::Identity(d, d)));
  const double base = 2.38 / std::sqrt(static_cast<double>(d));
  double log_scale = 0.0;

  ChainOutput out;
  const int kept = cfg.iterations / cfg.thin;
  out.draws.resize(kept, d);
  std::vector<Eigen::VectorXd> history;
  history.reserve(static_cast<std::size_t>(cfg.warmup));
  long warm_accepts = 0, accepts = 0;
  Eigen::VectorXd z(d);

  const int total = cfg.warmup + cfg.iterations;
  for (int it = 0; it < total; ++it) {
    const bool warming = it < cfg.warmup;
    for (Eigen::Index k = 0; k < d; ++k) z(k) = normal(rng);
    const Eigen::VectorXd proposal = x + (base * std::exp(log_scale)) * (L * z);
    const std::optional<double> lq = target(proposal);
    double accept_prob = 0.0;
    if (lq && std::isfinite(*lq)) {
      accept_prob = std::min(1.0, std::exp(*lq - *lp));
    } else {
      ++out.violations;
    }
    if (unif(rng) < accept_prob) {
      x = proposal;
      lp = lq;
      (warming ? warm_accepts : accepts)++;
    }
    if (warming) {
      // Robbins-Monro on the log scale towards the target acceptance rate
      log_scale += (accept_prob - cfg.target_acceptance) / std::pow(it + 1.0, 0.6);
      history.push_back(x);
      if (cfg.covariance_start >= 0 && it >= cfg.covariance_start && it % 50 == 0) {
        const std::size_t from = history.size() / 2;
        const auto count = static_cast<Eigen::Index>(history.size() - from);
        if (count > 2 * d) {
          Eigen::MatrixXd S(count, d);
          for (Eigen::Index r = 0; r < count; ++r) S.row(r) = history[from + static_cast<std::size_t>(r)];
          const Eigen::RowVectorXd m = S.colwise().mean();
          S.rowwise() -= m;
          const Eigen::MatrixXd cov = S.transpose() * S / static_cast<double>(count - 1);
          if (cov.allFinite() && cov.diagonal().minCoeff() > 0.0) L = proposal_factor(cov);
        }
      }
    } else {
      const int t = it - cfg.warmup;
      if ((t + 1) % cfg.thin == 0 && t / cfg.thin < kept) out.draws.row(t / cfg.thin) = x;
    }
  }
  if (cfg.warmup > 0 && warm_accepts == 0)
    throw std::runtime_error("chain " + std::to_string(chain + 1) +
                             " accepted no proposal during warm-up; try initial values "
                             "closer to the posterior mode");
  out.acceptance = cfg.iterations > 0 ? static_cast<double>(accepts) / cfg.iterations : 0.0;
  out.scale = base * std::exp(log_scale);
  return out;
}

}  // namespace detail

inline void compute_diagnostics(PosteriorDraws& draws) {
  const Eigen::Index P = draws.params();
  draws.rhat.resize(P);
  draws.ess_bulk.resize(P);
  draws.ess_tail.resize(P);
  for (Eigen::Index p = 0; p < P; ++p) {
    const auto ch = diagnostics::parameter_chains(draws, p);
    draws.rhat(p) = diagnostics::rhat(ch);
    draws.ess_bulk(p) = diagnostics::ess_bulk(ch);
    draws.ess_tail(p) = diagnostics::ess_tail(ch);
  }
}

/// Run one chain per initial value. Proposals are adapted during warm-up only.
inline PosteriorDraws sample(const LogDensity& target, const std::vector<Eigen::VectorXd>& inits,
                             const McmcConfig& config, std::vector<std::string> names = {}) {
  if (inits.empty()) throw std::invalid_argument("at least one initial value is required");
  if (static_cast<int>(inits.size()) != config.chains)
    throw std::invalid_argument("expected " + std::to_string(config.chains) +
                                " initial values, got " + std::to_string(inits.size()));
  if (config.iterations < 4 || config.thin < 1 || config.warmup < 0)
    throw std::invalid_argument("invalid MCMC iteration settings");
  for (const auto& init : inits)
    if (init.size() != inits.front().size())
      throw std::invalid_argument("initial values differ in dimension");

  std::vector<detail::ChainOutput> outputs(inits.size());
  std::vector<std::exception_ptr> errors(inits.size());
  auto work = [&](std::size_t c) {
    try {
      outputs[c] = detail::run_chain(target, inits[c], config, static_cast<int>(c));
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };
  if (config.parallel_chains && inits.size() > 1) {
    std::vector<std::thread> pool;
    for (std::size_t c = 0; c < inits.size(); ++c) pool.emplace_back(work, c);
    for (auto& t : pool) t.join();
  } else {
    for (std::size_t c = 0; c < inits.size(); ++c) work(c);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  PosteriorDraws draws;
  draws.names = std::move(names);
  if (draws.names.empty())
    for (Eigen::Index p = 0; p < inits.front().size(); ++p)
      draws.names.push_back("theta" + std::to_string(p + 1));
  draws.warmup = config.warmup;
  draws.thin = config.thin;
  draws.seed = config.seed;
  for (auto& o : outputs) {
    draws.chains.push_back(std::move(o.draws));
    draws.acceptance.push_back(o.acceptance);
    draws.support_violations.push_back(o.violations);
    draws.proposal_scale.push_back(o.scale);
  }
  compute_diagnostics(draws);
  return draws;
}

struct ParameterSummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  double median = 0.0;
  double lower = 0.0;  // equal-tailed interval
  double upper = 0.0;
  double mcse_mean = 0.0;
  double rhat = 0.0;
  double ess_bulk = 0.0;
  double ess_tail = 0.0;
};

/// P(parameter < threshold) under the posterior.
struct TailQuery {
  Eigen::Index parameter = 1;
  double threshold = 0.0;
};

struct TailProbability {
  std::string parameter;
  double threshold = 0.0;
  double probability = 0.0;
  double mcse = 0.0;
};

struct PosteriorSummary {
  std::vector<ParameterSummary> parameters;
  std::vector<TailProbability> tails;
  double level = 0.95;
};

inline PosteriorSummary summarize(const PosteriorDraws& draws,
                                  const std::vector<TailQuery>& tails = {},
                                  double level = 0.95) {
  PosteriorSummary out;
  out.level = level;
  for (Eigen::Index p = 0; p < draws.params(); ++p) {
    const auto ch = diagnostics::parameter_chains(draws, p);
    const auto pooled = draws.pooled(p);
    ParameterSummary s;
    s.name = p < static_cast<Eigen::Index>(draws.names.size()) ? draws.names[static_cast<std::size_t>(p)]
                                                               : "theta" + std::to_string(p + 1);
    s.mean = diagnostics::mean(pooled);
    s.sd = std::sqrt(diagnostics::variance(pooled));
    s.median = diagnostics::quantile(pooled, 0.5);
    s.lower = diagnostics::quantile(pooled, 0.5 - 0.5 * level);
    s.upper = diagnostics::quantile(pooled, 0.5 + 0.5 * level);
    s.mcse_mean = s.sd / std::sqrt(diagnostics::ess_mean(ch));
    s.rhat = draws.rhat.size() > p ? draws.rhat(p) : diagnostics::rhat(ch);
    s.ess_bulk = draws.ess_bulk.size() > p ? draws.ess_bulk(p) : diagnostics::ess_bulk(ch);
    s.ess_tail = draws.ess_tail.size() > p ? draws.ess_tail(p) : diagnostics::ess_tail(ch);
    out.parameters.push_back(s);
  }
  for (const auto& q : tails) {
    if (q.parameter < 0 || q.parameter >= draws.params())
      throw std::invalid_argument("tail query refers to parameter " + std::to_string(q.parameter));
    auto ch = diagnostics::parameter_chains(draws, q.parameter);
    TailProbability t;
    t.parameter = out.parameters[static_cast<std::size_t>(q.parameter)].name;
    t.threshold = q.threshold;
    double below = 0.0, total = 0.0;
    for (auto& c : ch)
      for (auto& x : c) {
        x = x < q.threshold ? 1.0 : 0.0;
        below += x;
        total += 1.0;
      }
    t.probability = below / total;
    if (t.probability > 0.0 && t.probability < 1.0)
      t.mcse = std::sqrt(t.probability * (1.0 - t.probability) / diagnostics::ess_mean(ch));
    out.tails.push_back(t);
  }
  return out;
}

/// Long-format draw dump: chain,iteration,parameter,value.
inline void write_draws_csv(std::ostream& os, const PosteriorDraws& draws) {
  os << "chain,iteration,parameter,value\n";
  char buf[48];
  for (std::size_t c = 0; c < draws.chains.size(); ++c)
    for (Eigen::Index t = 0; t < draws.chains[c].rows(); ++t)
      for (Eigen::Index p = 0; p < draws.chains[c].cols(); ++p) {
        std::snprintf(buf, sizeof buf, "%.17g", draws.chains[c](t, p));
        os << c + 1 << ',' << draws.warmup + (t + 1) * draws.thin << ','
           << draws.names[static_cast<std::size_t>(p)] << ',' << buf << '\n';
      }
}

}  // namespace pseudogmm
