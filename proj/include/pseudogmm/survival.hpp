#pragma once

// Right-censored data container, product-limit estimation and time-grid
// selection.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pseudogmm {

/// Right-censored two-arm data with optional numeric covariates.
///
/// Subjects keep their input order; `order()` gives the stable permutation
/// that sorts them by time.
class SurvivalDataset {
 public:
  SurvivalDataset() = default;

  SurvivalDataset(std::vector<double> time, std::vector<int> status,
                  std::vector<int> arm,
                  Eigen::MatrixXd covariates = Eigen::MatrixXd(),
                  std::vector<std::string> covariate_names = {})
      : time_(std::move(time)),
        status_(std::move(status)),
        arm_(std::move(arm)),
        covariates_(std::move(covariates)),
        covariate_names_(std::move(covariate_names)) {
    const std::size_t n = time_.size();
    if (status_.size() != n || arm_.size() != n)
      throw std::invalid_argument("time, status and arm must have the same length");
    if (n == 0) throw std::invalid_argument("dataset is empty");
    if (covariates_.size() == 0) covariates_.resize(static_cast<Eigen::Index>(n), 0);
    if (static_cast<std::size_t>(covariates_.rows()) != n)
      throw std::invalid_argument("covariate matrix has " +
                                  std::to_string(covariates_.rows()) +
                                  " rows, expected " + std::to_string(n));
    if (covariate_names_.empty()) {
      for (Eigen::Index c = 0; c < covariates_.cols(); ++c)
        covariate_names_.push_back("x" + std::to_string(c + 1));
    }
    if (static_cast<Eigen::Index>(covariate_names_.size()) != covariates_.cols())
      throw std::invalid_argument("covariate names do not match covariate columns");

    bool any_event = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(std::isfinite(time_[i]) && time_[i] > 0.0))
        throw std::invalid_argument("time must be positive and finite (subject " +
                                    std::to_string(i + 1) + ")");
      if (status_[i] != 0 && status_[i] != 1)
        throw std::invalid_argument("status must be 0 or 1 (subject " +
                                    std::to_string(i + 1) + ")");
      if (arm_[i] != 0 && arm_[i] != 1)
        throw std::invalid_argument("arm must be 0 or 1 (subject " +
                                    std::to_string(i + 1) + ")");
      any_event = any_event || status_[i] == 1;
    }
    if (!any_event) throw std::invalid_argument("no events observed");

    // events sort before censorings at tied times
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::stable_sort(order_.begin(), order_.end(), [this](std::size_t a, std::size_t b) {
      if (time_[a] != time_[b]) return time_[a] < time_[b];
      return status_[a] > status_[b];
    });
  }

  std::size_t size() const { return time_.size(); }
  const std::vector<double>& time() const { return time_; }
  const std::vector<int>& status() const { return status_; }
  const std::vector<int>& arm() const { return arm_; }
  const Eigen::MatrixXd& covariates() const { return covariates_; }
  const std::vector<std::string>& covariate_names() const { return covariate_names_; }
  const std::vector<std::size_t>& order() const { return order_; }

  std::size_t event_count() const {
    return static_cast<std::size_t>(std::count(status_.begin(), status_.end(), 1));
  }

  /// Distinct event times, ascending.
  std::vector<double> event_times() const {
    std::vector<double> out;
    for (std::size_t idx : order_) {
      if (status_[idx] == 1 && (out.empty() || out.back() != time_[idx]))
        out.push_back(time_[idx]);
    }
    return out;
  }

  /// Copy without subject `skip` (leave-one-out).
  SurvivalDataset without(std::size_t skip) const {
    std::vector<double> t;
    std::vector<int> s, a;
    Eigen::MatrixXd cov(static_cast<Eigen::Index>(size() - 1), covariates_.cols());
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < size(); ++i) {
      if (i == skip) continue;
      t.push_back(time_[i]);
      s.push_back(status_[i]);
      a.push_back(arm_[i]);
      cov.row(row++) = covariates_.row(static_cast<Eigen::Index>(i));
    }
    return SurvivalDataset(std::move(t), std::move(s), std::move(a), std::move(cov),
                           covariate_names_);
  }

 private:
  std::vector<double> time_;
  std::vector<int> status_;
  std::vector<int> arm_;
  Eigen::MatrixXd covariates_;
  std::vector<std::string> covariate_names_;
  std::vector<std::size_t> order_;
};

/// Product-limit survival curve as a right-continuous step function.
struct KaplanMeierCurve {
  std::vector<double> times;     // distinct event times
  std::vector<double> survival;  // S(t) just after each event time
  std::vector<int> at_risk;
  std::vector<int> events;

  /// S(t). Before the first event time this is 1; after the last one the final
  /// value is carried forward.
  double evaluate(double t) const {
    auto it = std::upper_bound(times.begin(), times.end(), t);
    if (it == times.begin()) return 1.0;
    return survival[static_cast<std::size_t>(it - times.begin()) - 1];
  }
};

/// Kaplan-Meier estimate. At tied times, censored subjects count as at risk.
inline KaplanMeierCurve kaplan_meier(const std::vector<double>& time,
                                     const std::vector<int>& status) {
  const std::size_t n = time.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (time[a] != time[b]) return time[a] < time[b];
    return status[a] > status[b];
  });

  KaplanMeierCurve curve;
  int remaining = static_cast<int>(n);
  double surv = 1.0;
  std::size_t i = 0;
  while (i < n) {
    const double t = time[idx[i]];
    int d = 0, c = 0;
    while (i < n && time[idx[i]] == t) {
      (status[idx[i]] == 1 ? d : c)++;
      ++i;
    }
    if (d > 0) {
      surv *= 1.0 - static_cast<double>(d) / remaining;
      curve.times.push_back(t);
      curve.survival.push_back(surv);
      curve.at_risk.push_back(remaining);
      curve.events.push_back(d);
    }
    remaining -= d + c;
  }
  if (curve.times.empty()) throw std::invalid_argument("no events observed");
  return curve;
}

inline KaplanMeierCurve kaplan_meier(const SurvivalDataset& data) {
  return kaplan_meier(data.time(), data.status());
}

inline double evaluate(const KaplanMeierCurve& curve, double t) { return curve.evaluate(t); }

/// Time points at which pseudo-observations are computed.
struct TimeGrid {
  std::vector<double> points;
  std::size_t size() const { return points.size(); }
  double operator[](std::size_t k) const { return points[k]; }
};

enum class GridRule {
  /// Equal spacing between smallest and largest event time.
  EqualTime,
  /// Equally spaced quantiles of the event times, levels k/(K+1).
  EventQuantile,
};

inline GridRule parse_grid_rule(const std::string& name) {
  if (name == "time" || name == "equal-time") return GridRule::EqualTime;
  if (name == "quantile" || name == "event-quantile") return GridRule::EventQuantile;
  throw std::invalid_argument("unknown grid rule '" + name + "' (expected time|quantile)");
}

inline std::string to_string(GridRule rule) {
  return rule == GridRule::EqualTime ? "time" : "quantile";
}

/// Pick `count` grid points snapped to observed event times.
inline TimeGrid select_time_grid(const SurvivalDataset& data, std::size_t count,
                                 GridRule rule = GridRule::EventQuantile) {
  if (count < 1) throw std::invalid_argument("number of time points must be at least 1");
  const std::vector<double> events = data.event_times();
  if (events.size() < count)
    throw std::invalid_argument("need at least " + std::to_string(count) +
                                " distinct event times, found " +
                                std::to_string(events.size()));

  std::vector<double> raw;
  if (rule == GridRule::EqualTime) {
    const double lo = events.front(), hi = events.back();
    if (count == 1) {
      raw.push_back(0.5 * (lo + hi));
    } else {
      const double step = (hi - lo) / static_cast<double>(count - 1);
      for (std::size_t k = 0; k < count; ++k) raw.push_back(lo + step * static_cast<double>(k));
    }
  } else {
    // quantiles over all event occurrences (ties counted), lower order statistic
    std::vector<double> all;
    for (std::size_t idx : data.order())
      if (data.status()[idx] == 1) all.push_back(data.time()[idx]);
    for (std::size_t k = 1; k <= count; ++k) {
      const double level = static_cast<double>(k) / static_cast<double>(count + 1);
      auto pos = static_cast<std::size_t>(std::ceil(level * static_cast<double>(all.size())));
      raw.push_back(all[std::clamp<std::size_t>(pos, 1, all.size()) - 1]);
    }
  }

  TimeGrid grid;
  for (double target : raw) {
    auto it = std::lower_bound(events.begin(), events.end(), target);
    double snapped;
    if (it == events.end()) {
      snapped = events.back();
    } else if (it == events.begin()) {
      snapped = *it;
    } else {
      const double above = *it, below = *(it - 1);
      snapped = (above - target < target - below) ? above : below;
    }
    if (grid.points.empty() || grid.points.back() != snapped) grid.points.push_back(snapped);
  }
  return grid;
}

}  // namespace pseudogmm
