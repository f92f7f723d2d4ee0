#pragma once

#include "pseudogmm/correlation.hpp"

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <optional>
#include <string>
#include <vector>

namespace pseudogmm {

/// Point estimate and covariance shared by GEE, GMM and Cox fits.
struct FitResult {
  Eigen::VectorXd beta;
  Eigen::MatrixXd covariance;
  Eigen::VectorXd se;
  std::vector<std::string> names;
  int iterations = 0;
  bool converged = false;
  std::string message;
  std::string correlation = "IND";
  std::optional<double> alpha;
  /// Max-norm of the estimating equation (GEE, Cox) or QIF gradient (GMM).
  double score_norm = 0.0;
  /// Objective at the estimate (QIF value for GMM, log partial likelihood for Cox).
  double objective = 0.0;

  void set_covariance(Eigen::MatrixXd cov) {
    covariance = 0.5 * (cov + cov.transpose());
    se = covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  }
};

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
  bool contains(double v) const { return lower <= v && v <= upper; }
};

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

/// beta +/- z_{(1+level)/2} * se for every coefficient.
inline std::vector<Interval> wald_interval(const FitResult& fit, double level = 0.95) {
  const double z = normal_quantile(0.5 + 0.5 * level);
  std::vector<Interval> out;
  for (Eigen::Index p = 0; p < fit.beta.size(); ++p)
    out.push_back({fit.beta(p) - z * fit.se(p), fit.beta(p) + z * fit.se(p)});
  return out;
}

}  // namespace pseudogmm
