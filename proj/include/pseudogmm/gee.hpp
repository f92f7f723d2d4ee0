#pragma once

// GEE for pseudo-observations: identity variance function, working
// correlation R(alpha), Fisher scoring, sandwich covariance.

#include "pseudogmm/correlation.hpp"
#include "pseudogmm/design.hpp"
#include "pseudogmm/fit_result.hpp"
#include "pseudogmm/pseudo.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace pseudogmm {

struct GeeOptions {
  double tolerance = 1e-8;  // on max |delta beta|
  int max_iterations = 50;
  double start_clip = 0.01;  // pooled mean clipped to (c, 1 - c) for the intercept start
};

namespace detail {

inline void check_dimensions(const PseudoObsMatrix& y, const DesignMatrix& X) {
  if (y.rows() != X.subjects || y.cols() != X.time_points)
    throw std::invalid_argument("pseudo-observations are " + std::to_string(y.rows()) + "x" +
                                std::to_string(y.cols()) + " but the design has " +
                                std::to_string(X.subjects) + " subjects x " +
                                std::to_string(X.time_points) + " time points");
}

/// Residuals y - mu as an n x K matrix.
inline Eigen::MatrixXd residuals(const PseudoObsMatrix& y, const DesignMatrix& X,
                                 const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = X.rows * beta;
  Eigen::MatrixXd r(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < r.rows(); ++i)
    for (Eigen::Index k = 0; k < r.cols(); ++k)
      r(i, k) = y.values(i, k) - link::inverse(eta(i * X.time_points + k));
  return r;
}

/// Moment estimate of alpha from residuals (unit variance function).
inline double estimate_alpha(const Eigen::MatrixXd& r, CorrelationKind kind, Eigen::Index P) {
  const Eigen::Index n = r.rows(), K = r.cols();
  if (kind == CorrelationKind::Independence || K < 2) return 0.0;
  const double phi = r.squaredNorm() / std::max<double>(1.0, static_cast<double>(n * K - P));
  if (!(phi > 0.0)) return 0.0;  // residuals vanish: no correlation to estimate
  double num = 0.0;
  double pairs = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index a = 0; a < K; ++a) {
      if (kind == CorrelationKind::Exchangeable) {
        for (Eigen::Index b = a + 1; b < K; ++b) num += r(i, a) * r(i, b);
      } else if (a + 1 < K) {
        num += r(i, a) * r(i, a + 1);
      }
    }
  }
  pairs = kind == CorrelationKind::Exchangeable ? static_cast<double>(n * K * (K - 1) / 2)
                                                : static_cast<double>(n * (K - 1));
  double alpha = num / (std::max(1.0, pairs - static_cast<double>(P)) * phi);
  WorkingCorrelation wc{kind, K, 0.0};
  auto [lo, hi] = wc.alpha_range();
  const double margin = 1e-6;
  return std::clamp(alpha, lo + margin, hi - margin);
}

}  // namespace detail

/// Fisher-scoring GEE fit. Non-convergence is reported through
/// `FitResult::converged`; a singular Gamma_0 throws.
inline FitResult fit_gee(const PseudoObsMatrix& y, const DesignMatrix& X,
                         CorrelationKind kind = CorrelationKind::Independence,
                         const GeeOptions& options = {}) {
  detail::check_dimensions(y, X);
  const Eigen::Index n = X.subjects, K = X.time_points, P = X.params();

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(P);
  const double pooled = std::clamp(y.values.mean(), options.start_clip, 1.0 - options.start_clip);
  beta(0) = link::cloglog(pooled);

  WorkingCorrelation wc{kind, K, 0.0};
  Eigen::MatrixXd Rinv = Eigen::MatrixXd::Identity(K, K);

  auto objective = [&](const Eigen::VectorXd& b) {
    const Eigen::MatrixXd r = detail::residuals(y, X, b);
    return (r * Rinv).cwiseProduct(r).sum();
  };

  FitResult fit;
  fit.names = X.names;
  fit.correlation = to_string(kind);

  Eigen::MatrixXd A(P, P);
  Eigen::VectorXd g(P);
  auto accumulate = [&](const Eigen::VectorXd& b) {
    A.setZero();
    g.setZero();
    const Eigen::MatrixXd r = detail::residuals(y, X, b);
    for (Eigen::Index i = 0; i < n; ++i) {
      const MeanDerivative md = mean_and_derivative(X.block(i), b);
      const Eigen::MatrixXd RD = Rinv * md.D;
      A.noalias() += md.D.transpose() * RD;
      g.noalias() += RD.transpose() * r.row(i).transpose();
    }
    return r;
  };

  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    fit.iterations = iter;
    if (kind != CorrelationKind::Independence) {
      wc.alpha = detail::estimate_alpha(detail::residuals(y, X, beta), kind, P);
      Rinv = wc.matrix().inverse();
    }
    accumulate(beta);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
    if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-14) {
      fit.message = "singular information matrix during Fisher scoring";
      break;
    }
    const Eigen::VectorXd delta = ldlt.solve(g);

    // step halving on the weighted residual sum of squares for fixed R
    const double current = objective(beta);
    double step = 1.0;
    Eigen::VectorXd trial = beta + delta;
    for (int h = 0; h < 30 && !(objective(trial) <= current); ++h) {
      step *= 0.5;
      trial = beta + step * delta;
    }
    const double change = (step * delta).cwiseAbs().maxCoeff();
    beta = trial;
    if (change < options.tolerance) {
      fit.converged = true;
      break;
    }
  }
  if (kind != CorrelationKind::Independence) {
    wc.alpha = detail::estimate_alpha(detail::residuals(y, X, beta), kind, P);
    Rinv = wc.matrix().inverse();
    fit.alpha = wc.alpha;
  }

  // sandwich Gamma_0^{-1} Gamma_1 Gamma_0^{-1} / n
  Eigen::MatrixXd gamma0 = Eigen::MatrixXd::Zero(P, P);
  Eigen::MatrixXd gamma1 = Eigen::MatrixXd::Zero(P, P);
  Eigen::VectorXd score = Eigen::VectorXd::Zero(P);
  const Eigen::MatrixXd r = detail::residuals(y, X, beta);
  for (Eigen::Index i = 0; i < n; ++i) {
    const MeanDerivative md = mean_and_derivative(X.block(i), beta);
    const Eigen::MatrixXd RD = Rinv * md.D;
    const Eigen::VectorXd ui = RD.transpose() * r.row(i).transpose();
    gamma0.noalias() += md.D.transpose() * RD;
    gamma1.noalias() += ui * ui.transpose();
    score += ui;
  }
  const double nn = static_cast<double>(n);
  gamma0 /= nn;
  gamma1 /= nn;
  score /= nn;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(gamma0);
  if (!lu.isInvertible()) throw std::runtime_error("GEE: singular Gamma_0 at the estimate");
  const Eigen::MatrixXd g0inv = lu.inverse();

  fit.beta = beta;
  fit.set_covariance(g0inv * gamma1 * g0inv / nn);
  fit.score_norm = score.cwiseAbs().maxCoeff();
  if (!fit.converged && fit.message.empty())
    fit.message = "no convergence after " + std::to_string(options.max_iterations) + " iterations";
  return fit;
}

}  // namespace pseudogmm
