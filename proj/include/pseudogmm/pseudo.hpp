#pragma once

// Jackknife pseudo-observations of the survival function,
//   y_ik = n S(t_k) - (n - 1) S^{-i}(t_k).

#include "pseudogmm/survival.hpp"

#include <Eigen/Dense>

#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pseudogmm {

struct PseudoObsMatrix {
  Eigen::MatrixXd values;  // n x K, rows in input subject order
  TimeGrid grid;
  std::vector<std::size_t> subject;  // row -> dataset row

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
};

namespace detail {

inline void require_pseudo_inputs(const SurvivalDataset& data, const TimeGrid& grid) {
  if (data.size() < 2)
    throw std::invalid_argument("pseudo-observations need at least 2 subjects (n=" +
                                std::to_string(data.size()) + ")");
  if (grid.size() == 0) throw std::invalid_argument("time grid is empty");
}

}  // namespace detail

/// Leave-one-out pseudo-observations sharing one pass of risk-set bookkeeping.
///
/// Removing subject i only changes the product-limit factors at event times
/// t_j <= T_i: the risk set loses one member, and at t_j == T_i the event count
/// loses i's own event. Prefix products of the modified factors and per-grid
/// suffix products of the original factors give every S^{-i}(t_k) in O(1).
inline PseudoObsMatrix pseudo_observations(const SurvivalDataset& data, const TimeGrid& grid) {
  detail::require_pseudo_inputs(data, grid);
  const KaplanMeierCurve km = kaplan_meier(data);
  const std::size_t n = data.size();
  const std::size_t n_times = km.times.size();
  const std::size_t K = grid.size();

  // factors with one subject removed from the risk set, for subjects beyond t_j
  std::vector<double> loo_prefix(n_times + 1, 1.0);
  for (std::size_t j = 0; j < n_times; ++j) {
    const int others = km.at_risk[j] - 1;
    const double f = others > 0 ? 1.0 - static_cast<double>(km.events[j]) / others : 1.0;
    loo_prefix[j + 1] = loo_prefix[j] * f;
  }

  // tail[k][j] = prod_{j <= m < last_k} (1 - d_m / n_m)
  std::vector<std::size_t> last(K);
  std::vector<std::vector<double>> tail(K);
  Eigen::VectorXd full(static_cast<Eigen::Index>(K));
  for (std::size_t k = 0; k < K; ++k) {
    last[k] = static_cast<std::size_t>(
        std::upper_bound(km.times.begin(), km.times.end(), grid[k]) - km.times.begin());
    tail[k].assign(last[k] + 1, 1.0);
    for (std::size_t j = last[k]; j-- > 0;)
      tail[k][j] = tail[k][j + 1] *
                   (1.0 - static_cast<double>(km.events[j]) / km.at_risk[j]);
    full(static_cast<Eigen::Index>(k)) = km.evaluate(grid[k]);
  }

  PseudoObsMatrix out;
  out.grid = grid;
  out.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(K));
  out.subject.resize(n);
  const double nn = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.subject[i] = i;
    const double ti = data.time()[i];
    const int own_event = data.status()[i];
    // event times strictly before T_i
    const auto before = static_cast<std::size_t>(
        std::lower_bound(km.times.begin(), km.times.end(), ti) - km.times.begin());
    const bool tied = before < n_times && km.times[before] == ti;
    double tied_factor = 1.0;
    if (tied) {
      const int others = km.at_risk[before] - 1;
      const int d = km.events[before] - own_event;
      tied_factor = others > 0 ? 1.0 - static_cast<double>(d) / others : 1.0;
    }
    const std::size_t resume = tied ? before + 1 : before;
    for (std::size_t k = 0; k < K; ++k) {
      double loo;
      if (last[k] <= before) {
        loo = loo_prefix[last[k]];
      } else {
        loo = loo_prefix[before] * tied_factor;
        if (last[k] > resume) loo *= tail[k][resume];
      }
      out.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
          nn * full(static_cast<Eigen::Index>(k)) - (nn - 1.0) * loo;
    }
  }
  return out;
}

/// Reference implementation: n + 1 independent Kaplan-Meier fits.
inline PseudoObsMatrix pseudo_observations_bruteforce(const SurvivalDataset& data,
                                                      const TimeGrid& grid) {
  detail::require_pseudo_inputs(data, grid);
  const std::size_t n = data.size();
  const KaplanMeierCurve km = kaplan_meier(data.time(), data.status());
  PseudoObsMatrix out;
  out.grid = grid;
  out.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(grid.size()));
  out.subject.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.subject[i] = i;
    std::vector<double> t;
    std::vector<int> s;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      t.push_back(data.time()[j]);
      s.push_back(data.status()[j]);
    }
    // a leave-one-out sample without events has S = 1 everywhere
    const bool has_event = std::find(s.begin(), s.end(), 1) != s.end();
    KaplanMeierCurve loo;
    if (has_event) loo = kaplan_meier(t, s);
    for (std::size_t k = 0; k < grid.size(); ++k) {
      const double s_loo = has_event ? loo.evaluate(grid[k]) : 1.0;
      out.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
          static_cast<double>(n) * km.evaluate(grid[k]) -
          static_cast<double>(n - 1) * s_loo;
    }
  }
  return out;
}

/// Long-format dump: one `id,time,value` line per subject and time point.
inline void write_pseudo_csv(std::ostream& os, const PseudoObsMatrix& y,
                             const std::vector<std::string>& ids = {}) {
  os << "id,time,value\n";
  char buf[64];
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const std::string id = ids.empty() ? std::to_string(y.subject[static_cast<std::size_t>(i)] + 1)
                                       : ids[y.subject[static_cast<std::size_t>(i)]];
    for (Eigen::Index k = 0; k < y.cols(); ++k) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g", y.grid[static_cast<std::size_t>(k)],
                    y.values(i, k));
      os << id << ',' << buf << '\n';
    }
  }
}

}  // namespace pseudogmm
