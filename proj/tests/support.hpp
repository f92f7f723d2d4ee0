#pragma once

// Shared generators for the unit tests.

#include "pseudogmm/pseudogmm.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace support {

/// Exponential event and censoring times; `tie_grid` > 0 rounds times up to
/// multiples of it so ties occur. At least one event is guaranteed.
inline pseudogmm::SurvivalDataset random_dataset(std::mt19937_64& rng, int n, double censor_rate,
                                                 double tie_grid = 0.0, int covariates = 0) {
  std::exponential_distribution<double> event(1.0);
  std::exponential_distribution<double> censor(censor_rate > 0.0 ? censor_rate / (1.0 - censor_rate)
                                                                  : 1.0);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> time(static_cast<std::size_t>(n));
  std::vector<int> status(static_cast<std::size_t>(n)), arm(static_cast<std::size_t>(n));
  Eigen::MatrixXd cov(n, covariates);
  for (int i = 0; i < n; ++i) {
    double t = event(rng);
    const double c = censor_rate > 0.0 ? censor(rng) : INFINITY;
    int d = t <= c ? 1 : 0;
    t = std::min(t, c);
    if (tie_grid > 0.0) t = tie_grid * std::ceil(t / tie_grid);
    time[static_cast<std::size_t>(i)] = t;
    status[static_cast<std::size_t>(i)] = d;
    arm[static_cast<std::size_t>(i)] = coin(rng) ? 1 : 0;
    for (int c2 = 0; c2 < covariates; ++c2) cov(i, c2) = normal(rng);
  }
  status[0] = 1;
  return pseudogmm::SurvivalDataset(std::move(time), std::move(status), std::move(arm), cov);
}

/// Replication `rep` of the n = 500, 20% censoring, log HR -0.3 scenario.
inline pseudogmm::SurvivalDataset core_trial(std::uint64_t rep, int n = 500) {
  pseudogmm::Scenario s;
  s.n = n;
  return pseudogmm::generate_trial(s, rep);
}

/// Coefficients implied by the Weibull model on a grid: cloglog S(t | x) =
/// a log t + log_hr x, so intercept a log t_1 and time effects a log(t_k / t_1).
inline Eigen::VectorXd true_coefficients(const pseudogmm::Scenario& s,
                                         const pseudogmm::TimeGrid& grid) {
  const auto K = static_cast<Eigen::Index>(grid.size());
  Eigen::VectorXd b(K + 1);
  b(0) = s.shape * std::log(grid[0]);
  b(1) = s.log_hr;
  for (Eigen::Index k = 1; k < K; ++k)
    b(1 + k) = s.shape * (std::log(grid[static_cast<std::size_t>(k)]) - std::log(grid[0]));
  return b;
}

}  // namespace support
