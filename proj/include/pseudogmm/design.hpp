#pragma once

// Regression design for pseudo-observations and the cloglog mean model.

#include "pseudogmm/survival.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace pseudogmm {

/// Stacked per-subject design blocks. Subject i owns rows [i*K, (i+1)*K);
/// columns are intercept, treatment, time dummies for t_2..t_K, covariates.
struct DesignMatrix {
  Eigen::MatrixXd rows;
  Eigen::Index subjects = 0;
  Eigen::Index time_points = 0;
  std::vector<std::string> names;

  Eigen::Index params() const { return rows.cols(); }
  auto block(Eigen::Index i) const { return rows.middleRows(i * time_points, time_points); }
  static constexpr Eigen::Index treatment_column = 1;
};

/// Options for `build_design`.
struct DesignOptions {
  /// Centre covariates and scale them to standard deviation 0.5.
  bool standardize_covariates = false;
};

inline DesignMatrix build_design(const SurvivalDataset& data, const TimeGrid& grid,
                                 const DesignOptions& options = {}) {
  const auto n = static_cast<Eigen::Index>(data.size());
  const auto K = static_cast<Eigen::Index>(grid.size());
  if (K < 1) throw std::invalid_argument("time grid is empty");
  Eigen::MatrixXd cov = data.covariates();
  if (!cov.allFinite()) throw std::invalid_argument("covariates contain non-finite values");
  if (options.standardize_covariates && cov.cols() > 0 && n > 1) {
    for (Eigen::Index c = 0; c < cov.cols(); ++c) {
      const double mean = cov.col(c).mean();
      const double sd =
          std::sqrt((cov.col(c).array() - mean).square().sum() / static_cast<double>(n - 1));
      cov.col(c).array() -= mean;
      if (sd > 0) cov.col(c) /= 2.0 * sd;
    }
  }
  const Eigen::Index C = cov.cols();
  const Eigen::Index P = 2 + (K - 1) + C;

  DesignMatrix X;
  X.subjects = n;
  X.time_points = K;
  X.rows = Eigen::MatrixXd::Zero(n * K, P);
  X.names = {"(Intercept)", "treatment"};
  for (Eigen::Index k = 1; k < K; ++k) X.names.push_back("time" + std::to_string(k + 1));
  for (const auto& name : data.covariate_names()) X.names.push_back(name);

  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < K; ++k) {
      auto row = X.rows.row(i * K + k);
      row(0) = 1.0;
      row(1) = data.arm()[static_cast<std::size_t>(i)];
      if (k > 0) row(1 + k) = 1.0;
      if (C > 0) row.tail(C) = cov.row(i);
    }
  }
  return X;
}

namespace link {

/// Linear predictors above this saturate: mean 0, derivative 0.
inline constexpr double saturation = 700.0;

inline double cloglog(double x) { return std::log(-std::log(x)); }
inline double inverse(double eta) { return eta > saturation ? 0.0 : std::exp(-std::exp(eta)); }

/// d mu / d eta = -exp(eta - exp(eta)).
inline double derivative(double eta) {
  return eta > saturation ? 0.0 : -std::exp(eta - std::exp(eta));
}

struct MeanSlope {
  double mean;
  double slope;
};

/// Mean and first derivative sharing one exponential.
inline MeanSlope evaluate(double eta) {
  if (eta > saturation) return {0.0, 0.0};
  const double e = std::exp(eta);
  const double mu = std::exp(-e);
  return {mu, -e * mu};
}

/// d^2 mu / d eta^2.
inline double second_derivative(double eta) {
  if (eta > saturation) return 0.0;
  const double e = std::exp(eta);
  return -std::exp(eta - e) * (1.0 - e);
}

}  // namespace link

/// Mean vector mu_i and Jacobian D_i = d mu_i / d beta' for one K x P block.
struct MeanDerivative {
  Eigen::VectorXd mu;
  Eigen::MatrixXd D;
};

inline MeanDerivative mean_and_derivative(const Eigen::Ref<const Eigen::MatrixXd>& Xi,
                                          const Eigen::Ref<const Eigen::VectorXd>& beta) {
  const Eigen::VectorXd eta = Xi * beta;
  MeanDerivative out{Eigen::VectorXd(eta.size()), Eigen::MatrixXd(Xi.rows(), Xi.cols())};
  for (Eigen::Index k = 0; k < eta.size(); ++k) {
    out.mu(k) = link::inverse(eta(k));
    out.D.row(k) = link::derivative(eta(k)) * Xi.row(k);
  }
  return out;
}

/// Whether any linear predictor in the stacked design saturates at `beta`.
inline bool saturated(const DesignMatrix& X, const Eigen::VectorXd& beta) {
  return ((X.rows * beta).array() > link::saturation).any();
}

}  // namespace pseudogmm
