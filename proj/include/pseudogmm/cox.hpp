#pragma once

// Cox proportional hazards by Newton-Raphson on the Breslow partial likelihood.

#include "pseudogmm/fit_result.hpp"
#include "pseudogmm/survival.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace pseudogmm {

struct CoxOptions {
  bool include_covariates = true;
  double tolerance = 1e-10;  // on max |delta beta|
  int max_iterations = 50;
  /// A coefficient beyond this magnitude signals a monotone likelihood.
  double divergence_bound = 25.0;
};

/// Treatment column followed by the dataset covariates.
inline Eigen::MatrixXd cox_covariates(const SurvivalDataset& data, bool include_covariates) {
  const auto n = static_cast<Eigen::Index>(data.size());
  const Eigen::Index C = include_covariates ? data.covariates().cols() : 0;
  Eigen::MatrixXd Z(n, 1 + C);
  for (Eigen::Index i = 0; i < n; ++i) Z(i, 0) = data.arm()[static_cast<std::size_t>(i)];
  if (C > 0) Z.rightCols(C) = data.covariates();
  return Z;
}

struct PartialLikelihood {
  double value = 0.0;
  Eigen::VectorXd score;
  Eigen::MatrixXd information;
};

/// Breslow log partial likelihood with score and observed information.
inline PartialLikelihood cox_partial_likelihood(const SurvivalDataset& data,
                                                const Eigen::MatrixXd& Z,
                                                const Eigen::VectorXd& beta) {
  const Eigen::Index P = Z.cols();
  const std::vector<std::size_t>& order = data.order();  // ascending time, events first
  const Eigen::VectorXd eta = Z * beta;

  PartialLikelihood out{0.0, Eigen::VectorXd::Zero(P), Eigen::MatrixXd::Zero(P, P)};
  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(P);
  Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(P, P);

  // sweep from the latest time so the risk-set sums accumulate
  std::size_t end = order.size();
  while (end > 0) {
    const double t = data.time()[order[end - 1]];
    std::size_t begin = end;
    while (begin > 0 && data.time()[order[begin - 1]] == t) --begin;
    double deaths = 0.0;
    Eigen::VectorXd zsum = Eigen::VectorXd::Zero(P);
    double eta_sum = 0.0;
    for (std::size_t q = begin; q < end; ++q) {
      const std::size_t i = order[q];
      const double r = std::exp(eta(static_cast<Eigen::Index>(i)));
      const auto z = Z.row(static_cast<Eigen::Index>(i)).transpose();
      s0 += r;
      s1 += r * z;
      s2 += r * z * z.transpose();
      if (data.status()[i] == 1) {
        deaths += 1.0;
        zsum += z;
        eta_sum += eta(static_cast<Eigen::Index>(i));
      }
    }
    if (deaths > 0.0) {
      const Eigen::VectorXd mean = s1 / s0;
      out.value += eta_sum - deaths * std::log(s0);
      out.score += zsum - deaths * mean;
      out.information += deaths * (s2 / s0 - mean * mean.transpose());
    }
    end = begin;
  }
  return out;
}

/// Newton-Raphson with step halving. The covariance is the inverse observed
/// information; a diverging coefficient flags a monotone likelihood.
inline FitResult fit_cox(const SurvivalDataset& data, const CoxOptions& options = {}) {
  const Eigen::MatrixXd Z = cox_covariates(data, options.include_covariates);
  const Eigen::Index P = Z.cols();
  FitResult fit;
  fit.names = {"treatment"};
  if (options.include_covariates)
    for (const auto& name : data.covariate_names()) fit.names.push_back(name);
  fit.correlation = "";

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(P);
  PartialLikelihood pl = cox_partial_likelihood(data, Z, beta);
  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    fit.iterations = iter;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(pl.information);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || !(ldlt.rcond() > 1e-12)) {
      fit.message = "monotone likelihood: information matrix is singular";
      break;
    }
    const Eigen::VectorXd delta = ldlt.solve(pl.score);
    double step = 1.0;
    PartialLikelihood next = cox_partial_likelihood(data, Z, beta + delta);
    for (int h = 0; h < 30 && !(next.value >= pl.value); ++h) {
      step *= 0.5;
      next = cox_partial_likelihood(data, Z, beta + step * delta);
    }
    beta += step * delta;
    pl = std::move(next);
    if (beta.cwiseAbs().maxCoeff() > options.divergence_bound) {
      fit.message = "monotone likelihood: coefficient diverging";
      break;
    }
    if ((step * delta).cwiseAbs().maxCoeff() < options.tolerance) {
      fit.converged = true;
      break;
    }
  }
  if (!fit.converged && fit.message.empty())
    fit.message = "no convergence after " + std::to_string(options.max_iterations) + " iterations";

  fit.beta = beta;
  fit.objective = pl.value;
  fit.score_norm = pl.score.cwiseAbs().maxCoeff();
  Eigen::FullPivLU<Eigen::MatrixXd> lu(pl.information);
  if (lu.isInvertible())
    fit.set_covariance(lu.inverse());
  else
    fit.set_covariance(Eigen::MatrixXd::Constant(P, P, std::numeric_limits<double>::quiet_NaN()));
  return fit;
}

}  // namespace pseudogmm
