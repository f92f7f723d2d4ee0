#pragma once

// Two-arm trial generator: Weibull event times with proportional hazards and
// uniform censoring calibrated to a target censoring rate.

#include "pseudogmm/survival.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pseudogmm {

struct Scenario {
  std::string name = "core";
  int n = 500;
  double censoring_rate = 0.20;
  double log_hr = -0.3;
  double shape = 0.6;
  /// Fraction of subjects in the experimental arm.
  double allocation = 0.5;
  int replications = 200;
  std::uint64_t seed = 20240601;

  void validate() const {
    if (n < 2) throw std::invalid_argument("scenario n must be at least 2");
    if (!(censoring_rate > 0.0 && censoring_rate < 1.0))
      throw std::invalid_argument("censoring rate must lie in (0, 1)");
    if (!(shape > 0.0)) throw std::invalid_argument("Weibull shape must be positive");
    if (!(allocation >= 0.0 && allocation <= 1.0))
      throw std::invalid_argument("allocation must lie in [0, 1]");
    if (allocation == 0.5 && n % 2 != 0)
      throw std::invalid_argument("1:1 allocation needs an even n");
  }

  /// Weibull scale for an arm: b = exp(-log_hr * x / a).
  double weibull_scale(int arm) const { return std::exp(-log_hr * arm / shape); }

  /// Marginal survival of the event time, mixing the arms by allocation.
  double mixture_survival(double t) const {
    const double base = std::pow(t, shape);
    return (1.0 - allocation) * std::exp(-base) + allocation * std::exp(-base * std::exp(log_hr));
  }
};

/// Censoring fraction P(C < T) for C ~ Uniform(0, b): (1/b) int_0^b S(c) dc.
/// Each arm with hazard multiplier r contributes
/// int_0^b exp(-r c^a) dc = (1/a) r^{-1/a} gamma_lower(1/a, r b^a).
inline double censoring_probability(const Scenario& s, double bound) {
  const double inv = 1.0 / s.shape;
  const double base = std::pow(bound, s.shape);
  auto arm_integral = [&](double rate) {
    return inv * std::pow(rate, -inv) * boost::math::tgamma_lower(inv, rate * base);
  };
  const double integral =
      (1.0 - s.allocation) * arm_integral(1.0) + s.allocation * arm_integral(std::exp(s.log_hr));
  return integral / bound;
}

/// Upper bound of the uniform censoring distribution that yields the target
/// censoring rate, by bisection on log(bound).
inline double calibrate_censoring(const Scenario& s) {
  s.validate();
  const double target = s.censoring_rate;
  double lo = std::log(1e-10), hi = std::log(1e12);
  if (!(censoring_probability(s, std::exp(lo)) > target))
    throw std::invalid_argument("censoring rate " + std::to_string(target) +
                                " unattainable: needs bound below 1e-10");
  if (!(censoring_probability(s, std::exp(hi)) < target))
    throw std::invalid_argument("censoring rate " + std::to_string(target) +
                                " unattainable: needs bound above 1e12");
  for (int it = 0; it < 200 && hi - lo > 1e-13; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (censoring_probability(s, std::exp(mid)) > target)
      lo = mid;
    else
      hi = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

/// Deterministic RNG stream for (base seed, replication).
inline std::mt19937_64 replication_rng(std::uint64_t seed, std::uint64_t replication) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(replication),
                    static_cast<std::uint32_t>(replication >> 32), 0x70736575u};
  return std::mt19937_64(seq);
}

/// One simulated trial. `censoring_bound` comes from `calibrate_censoring`.
inline SurvivalDataset generate_trial(const Scenario& s, double censoring_bound,
                                      std::uint64_t replication) {
  auto rng = replication_rng(s.seed, replication);
  const int n = s.n;
  const int treated = static_cast<int>(std::lround(s.allocation * n));
  std::vector<int> arm(static_cast<std::size_t>(n), 0);
  std::fill(arm.begin(), arm.begin() + treated, 1);
  std::shuffle(arm.begin(), arm.end(), rng);

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> time(static_cast<std::size_t>(n));
  std::vector<int> status(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < time.size(); ++i) {
    const double u = 1.0 - unif(rng);  // (0, 1]
    const double t = s.weibull_scale(arm[i]) * std::pow(-std::log(u), 1.0 / s.shape);
    const double c = censoring_bound * (1.0 - unif(rng));
    time[i] = std::max(std::min(t, c), std::numeric_limits<double>::min());
    status[i] = t <= c ? 1 : 0;
  }
  return SurvivalDataset(std::move(time), std::move(status), std::move(arm));
}

inline SurvivalDataset generate_trial(const Scenario& s, std::uint64_t replication) {
  return generate_trial(s, calibrate_censoring(s), replication);
}

}  // namespace pseudogmm
