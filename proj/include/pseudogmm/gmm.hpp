#pragma once

// Quadratic inference functions: stacked basis-matrix scores, QIF
// minimisation and the GMM sandwich covariance.

#include "pseudogmm/correlation.hpp"
#include "pseudogmm/design.hpp"
#include "pseudogmm/fit_result.hpp"
#include "pseudogmm/gee.hpp"
#include "pseudogmm/pseudo.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>

namespace pseudogmm {

/// Thrown when C_n cannot be factorised.
class SingularMatrixError : public std::runtime_error {
 public:
  SingularMatrixError(const std::string& what, double rcond)
      : std::runtime_error(what + " (reciprocal condition " + std::to_string(rcond) + ")"),
        rcond_(rcond) {}
  double rcond() const { return rcond_; }

 private:
  double rcond_;
};

/// U_n = (1/n) sum u_i and C_n = (1/n^2) sum u_i u_i'.
struct ScoreState {
  Eigen::VectorXd U;
  Eigen::MatrixXd C;
  Eigen::MatrixXd u;  // n x (J*P), row i = u_i'
};

/// Evaluates the stacked scores u_i(beta) = [D_i' M_j (y_i - mu_i)]_j.
class MomentModel {
 public:
  MomentModel(const PseudoObsMatrix& y, const DesignMatrix& X, BasisSet basis)
      : y_(&y), X_(&X), basis_(std::move(basis)) {
    detail::check_dimensions(y, X);
    if (basis_.dimension() != X.time_points)
      throw std::invalid_argument("basis dimension does not match the number of time points");
  }

  Eigen::Index subjects() const { return X_->subjects; }
  Eigen::Index params() const { return X_->params(); }
  Eigen::Index moments() const { return basis_.size() * params(); }
  const BasisSet& basis() const { return basis_; }
  const DesignMatrix& design() const { return *X_; }
  const PseudoObsMatrix& outcome() const { return *y_; }

  ScoreState scores(const Eigen::VectorXd& beta) const {
    const Eigen::Index n = subjects(), K = X_->time_points, P = params();
    const Eigen::Index J = basis_.size();
    const Eigen::VectorXd eta = X_->rows * beta;
    Eigen::MatrixXd r(n, K), d1(n, K);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index k = 0; k < K; ++k) {
        const link::MeanSlope m = link::evaluate(eta(i * K + k));
        r(i, k) = y_->values(i, k) - m.mean;
        d1(i, k) = m.slope;
      }
    ScoreState s;
    s.u.resize(n, J * P);
    s.u.setZero();
    for (Eigen::Index j = 0; j < J; ++j) {
      const Eigen::MatrixXd w = d1.cwiseProduct(r * basis_.matrices[static_cast<std::size_t>(j)]);
      for (Eigen::Index k = 0; k < K; ++k)
        s.u.middleCols(j * P, P).noalias() += w.col(k).asDiagonal() * time_slice(k);
    }
    const double nn = static_cast<double>(n);
    s.U = s.u.colwise().sum().transpose() / nn;
    s.C = s.u.transpose() * s.u / (nn * nn);
    return s;
  }

  /// Gauss-Newton Jacobian dU_n/dbeta' = -(1/n) sum_i [D_i' M_j D_i]_j, D_i
  /// treated as locally constant.
  Eigen::MatrixXd jacobian(const Eigen::VectorXd& beta) const {
    const Eigen::Index n = subjects(), K = X_->time_points, P = params();
    const Eigen::Index J = basis_.size();
    const Eigen::VectorXd eta = X_->rows * beta;
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(J * P, P);
    Eigen::MatrixXd Di(K, P);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto Xi = X_->block(i);
      for (Eigen::Index k = 0; k < K; ++k) Di.row(k) = link::derivative(eta(i * K + k)) * Xi.row(k);
      for (Eigen::Index j = 0; j < J; ++j)
        G.middleRows(j * P, P).noalias() -=
            Di.transpose() * basis_.matrices[static_cast<std::size_t>(j)] * Di;
    }
    return G / static_cast<double>(n);
  }

  /// Exact gradient of Q_n = U' C^- U, given w = C^- U at beta. The generalised
  /// inverse adds no projector terms because U lies in the range of C.
  Eigen::VectorXd qif_gradient(const Eigen::VectorXd& beta, const ScoreState& s,
                               const Eigen::VectorXd& w) const {
    const Eigen::Index n = subjects(), K = X_->time_points, P = params();
    const Eigen::Index J = basis_.size();
    const Eigen::VectorXd eta = X_->rows * beta;
    const double nn = static_cast<double>(n);
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(P);
    Eigen::VectorXd r(K), d1(K), d2(K), Mr(K), v(K), t(K);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto Xi = X_->block(i);
      for (Eigen::Index k = 0; k < K; ++k) {
        const double e = eta(i * K + k);
        r(k) = y_->values(i, k) - link::inverse(e);
        d1(k) = link::derivative(e);
        d2(k) = link::second_derivative(e);
      }
      // b_i = (du_i/dbeta')' w
      Eigen::VectorXd b = Eigen::VectorXd::Zero(P);
      for (Eigen::Index j = 0; j < J; ++j) {
        const auto& M = basis_.matrices[static_cast<std::size_t>(j)];
        Mr.noalias() = M * r;
        v.noalias() = Xi * w.segment(j * P, P);
        t = d2.cwiseProduct(Mr).cwiseProduct(v);
        t.noalias() -= d1.cwiseProduct(M * d1.cwiseProduct(v));
        b.noalias() += Xi.transpose() * t;
      }
      const double a = s.u.row(i).dot(w);
      grad += b * (1.0 - a / nn);
    }
    return grad * (2.0 / nn);
  }

 private:
  /// Rows of the stacked design belonging to time point k, one per subject.
  using Strided = Eigen::Map<const Eigen::MatrixXd, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
  Strided time_slice(Eigen::Index k) const {
    const Eigen::Index K = X_->time_points;
    return Strided(X_->rows.data() + k, subjects(), params(),
                   Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(X_->rows.rows(), K));
  }

  const PseudoObsMatrix* y_;
  const DesignMatrix* X_;
  BasisSet basis_;
};

inline ScoreState score_vector(const PseudoObsMatrix& y, const DesignMatrix& X,
                               const Eigen::VectorXd& beta, const BasisSet& basis) {
  return MomentModel(y, X, basis).scores(beta);
}

namespace detail {

inline constexpr double rcond_floor = 1e-12;

/// Inverse of a symmetric positive semidefinite matrix on the span of its
/// eigenvectors whose eigenvalues exceed rcond_floor times the largest.
/// Stacked scores need not span all moments (two J = 2 bases with a binary
/// design give rank 2K < 2P), and U_n always lies in this span.
struct RangeInverse {
  Eigen::MatrixXd basis;           // d x r, orthonormal columns
  Eigen::VectorXd inverse_values;  // r
  double rcond = 0.0;              // smallest over largest eigenvalue of the full matrix

  Eigen::Index rank() const { return basis.cols(); }
  Eigen::VectorXd project(const Eigen::VectorXd& b) const { return basis.transpose() * b; }
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    return basis * inverse_values.cwiseProduct(basis.transpose() * b);
  }
  Eigen::MatrixXd solve(const Eigen::MatrixXd& B) const {
    return basis * (inverse_values.asDiagonal() * (basis.transpose() * B));
  }
};

/// nullopt when the numerical rank is below `min_rank` (moments no longer
/// identify the parameters) or the matrix is not finite.
inline std::optional<RangeInverse> range_inverse(const Eigen::MatrixXd& A, Eigen::Index min_rank,
                                                 double* rcond_out = nullptr) {
  if (rcond_out) *rcond_out = 0.0;
  if (!A.allFinite()) return std::nullopt;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (A + A.transpose()));
  if (eig.info() != Eigen::Success) return std::nullopt;
  const Eigen::VectorXd& values = eig.eigenvalues();  // ascending
  const double top = values(values.size() - 1);
  if (!(top > 0.0)) return std::nullopt;
  const double rc = std::max(0.0, values(0)) / top;
  if (rcond_out) *rcond_out = rc;
  Eigen::Index first = 0;
  while (first < values.size() && !(values(first) > rcond_floor * top)) ++first;
  const Eigen::Index r = values.size() - first;
  if (r < min_rank) return std::nullopt;
  RangeInverse out;
  out.basis = eig.eigenvectors().rightCols(r);
  out.inverse_values = values.tail(r).cwiseInverse();
  out.rcond = rc;
  return out;
}

}  // namespace detail

/// Q_n(beta) = U_n' C_n^- U_n, with C_n inverted on its numerical range.
inline double qif(const PseudoObsMatrix& y, const DesignMatrix& X, const Eigen::VectorXd& beta,
                  const BasisSet& basis) {
  const ScoreState s = score_vector(y, X, beta, basis);
  double rc = 0.0;
  auto f = detail::range_inverse(s.C, X.params(), &rc);
  if (!f) throw SingularMatrixError("QIF: C_n has rank below the number of coefficients", rc);
  return std::max(0.0, s.U.dot(f->solve(s.U)));
}

/// Clamp to [eps, 1 - eps], apply cloglog, regress on the stacked design by OLS.
inline Eigen::VectorXd starting_values(const PseudoObsMatrix& y, const DesignMatrix& X,
                                       double epsilon = 0.05) {
  detail::check_dimensions(y, X);
  if (!(epsilon > 0.0 && epsilon < 0.5))
    throw std::invalid_argument("epsilon must lie in (0, 0.5)");
  Eigen::VectorXd z(X.rows.rows());
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    for (Eigen::Index k = 0; k < y.cols(); ++k)
      z(i * X.time_points + k) =
          link::cloglog(std::clamp(y.values(i, k), epsilon, 1.0 - epsilon));
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X.rows);
  if (qr.rank() < X.params())
    throw std::invalid_argument("design matrix is rank deficient (rank " +
                                std::to_string(qr.rank()) + " < " +
                                std::to_string(X.params()) + ")");
  return qr.solve(z);
}

struct GmmOptions {
  double gradient_tolerance = 1e-6;  // max-norm of dQ/dbeta
  double objective_tolerance = 1e-10;  // |delta Q|, over-identified fits only
  int max_iterations = 100;
  double start_epsilon = 0.05;
  std::optional<Eigen::VectorXd> start;
};

/// QIF minimiser. Directions use the Gauss-Newton curvature 2 G' C^- G (or a
/// difference Hessian when over-identified) with the exact QIF gradient and an Armijo backtracking line search; points where
/// C_n loses rank below P count as infeasible and are backtracked away from.
inline FitResult fit_gmm(const PseudoObsMatrix& y, const DesignMatrix& X, const BasisSet& basis,
                         const GmmOptions& options = {}) {
  const MomentModel model(y, X, basis);
  const Eigen::Index P = X.params();
  FitResult fit;
  fit.names = X.names;
  fit.correlation = to_string(basis.kind);

  Eigen::VectorXd beta = options.start ? *options.start : starting_values(y, X, options.start_epsilon);

  auto evaluate = [&](const Eigen::VectorXd& b, ScoreState& s, Eigen::VectorXd& w) -> double {
    if (saturated(X, b)) return std::numeric_limits<double>::infinity();
    s = model.scores(b);
    auto f = detail::range_inverse(s.C, P);
    if (!f) return std::numeric_limits<double>::infinity();
    w = f->solve(s.U);
    return std::max(0.0, s.U.dot(w));
  };

  // Over-identified moments make Q_n(beta-hat) > 0, where Gauss-Newton drops
  // the curvature of C_n and converges linearly; there the Hessian is the
  // central difference of the exact gradient.
  auto difference_hessian = [&](const Eigen::VectorXd& b) -> std::optional<Eigen::MatrixXd> {
    Eigen::MatrixXd H(P, P);
    ScoreState s;
    Eigen::VectorXd wp;
    for (Eigen::Index p = 0; p < P; ++p) {
      const double h = 1e-5 * std::max(1.0, std::abs(b(p)));
      Eigen::VectorXd up = b, down = b;
      up(p) += h;
      down(p) -= h;
      if (!std::isfinite(evaluate(up, s, wp))) return std::nullopt;
      const Eigen::VectorXd gu = model.qif_gradient(up, s, wp);
      if (!std::isfinite(evaluate(down, s, wp))) return std::nullopt;
      const Eigen::VectorXd gd = model.qif_gradient(down, s, wp);
      H.col(p) = (gu - gd) / (2.0 * h);
    }
    return Eigen::MatrixXd(0.5 * (H + H.transpose()));
  };

  ScoreState state;
  Eigen::VectorXd w;
  double Q = evaluate(beta, state, w);
  if (!std::isfinite(Q)) {
    double rc = 0.0;
    detail::range_inverse(model.scores(beta).C, P, &rc);
    throw SingularMatrixError("GMM: C_n has rank below the number of coefficients at the starting values", rc);
  }

  // Over-identified fits may carry a stiff direction from a nearly null
  // eigenvalue of C_n, where the gradient cannot drop below rounding; the
  // objective-change rule ends those.
  const bool over_identified = detail::range_inverse(state.C, P)->rank() > P;
  double previous_Q = Q;
  Eigen::VectorXd grad;
  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    fit.iterations = iter;
    grad = model.qif_gradient(beta, state, w);
    const bool small = grad.cwiseAbs().maxCoeff() < options.gradient_tolerance;
    const Eigen::MatrixXd G = model.jacobian(beta);
    auto fC = detail::range_inverse(state.C, P);
    Eigen::MatrixXd H = 2.0 * G.transpose() * fC->solve(G);
    if (fC->rank() > P) {
      if (auto Hd = difference_hessian(beta)) {
        Eigen::LDLT<Eigen::MatrixXd> check(*Hd);
        if (check.info() == Eigen::Success && check.isPositive() && check.rcond() > 1e-12) H = *Hd;
      }
    }
    Eigen::LDLT<Eigen::MatrixXd> hl(H);
    if (hl.info() != Eigen::Success || !(hl.rcond() > 1e-14)) {
      fit.converged = small;
      if (!small) fit.message = "singular Gauss-Newton Hessian";
      break;
    }
    Eigen::VectorXd dir = -hl.solve(grad);
    if (small) {
      // one polishing step, kept only if it lowers Q
      ScoreState ps;
      Eigen::VectorXd pw;
      const Eigen::VectorXd polished = beta + dir;
      const double Qp = evaluate(polished, ps, pw);
      if (Qp < Q) {
        const Eigen::VectorXd pg = model.qif_gradient(polished, ps, pw);
        if (pg.cwiseAbs().maxCoeff() < options.gradient_tolerance) {
          beta = polished;
          state = std::move(ps);
          w = std::move(pw);
          Q = Qp;
        }
      }
      fit.converged = true;
      break;
    }
    double slope = grad.dot(dir);
    if (!(slope < 0.0)) {
      dir = -grad;
      slope = -grad.squaredNorm();
    }

    double step = 1.0;
    bool accepted = false;
    ScoreState trial_state;
    Eigen::VectorXd trial_w;
    for (int h = 0; h < 40; ++h) {
      const Eigen::VectorXd trial = beta + step * dir;
      const double Qt = evaluate(trial, trial_state, trial_w);
      if (Qt <= Q + 1e-4 * step * slope) {
        previous_Q = Q;
        beta = trial;
        state = std::move(trial_state);
        w = std::move(trial_w);
        Q = Qt;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (accepted && over_identified && std::abs(previous_Q - Q) < options.objective_tolerance) {
      fit.converged = true;
      fit.message = "objective change below tolerance";
      break;
    }
    if (!accepted) {
      // Near the minimum the Armijo test drowns in rounding of Q_n; a full
      // step that shrinks the exact gradient is still progress.
      const Eigen::VectorXd trial = beta + dir;
      if (std::isfinite(evaluate(trial, trial_state, trial_w)) &&
          model.qif_gradient(trial, trial_state, trial_w).cwiseAbs().maxCoeff() <
              grad.cwiseAbs().maxCoeff()) {
        beta = trial;
        state = std::move(trial_state);
        w = std::move(trial_w);
        Q = evaluate(beta, state, w);
        continue;
      }
      grad = model.qif_gradient(beta, state, w);
      if (grad.cwiseAbs().maxCoeff() < options.gradient_tolerance) {
        fit.converged = true;
      } else {
        fit.message = "line search failed";
      }
      break;
    }
  }
  if (!fit.converged && fit.message.empty())
    fit.message = "no convergence after " + std::to_string(options.max_iterations) + " iterations";

  fit.beta = beta;
  fit.objective = Q;
  grad = model.qif_gradient(beta, state, w);
  fit.score_norm = grad.cwiseAbs().maxCoeff();

  // cov = [G' C^- G]^{-1}; with C_n = (1/n^2) sum u u' this is the
  // (1/n)[G' ((1/n) sum u u')^{-1} G]^{-1} sandwich.
  const Eigen::MatrixXd G = model.jacobian(beta);
  auto fC = detail::range_inverse(state.C, P);
  Eigen::MatrixXd info = G.transpose() * fC->solve(G);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(info);
  if (!lu.isInvertible()) {
    fit.converged = false;
    fit.message = "singular GMM information matrix";
    fit.set_covariance(Eigen::MatrixXd::Constant(P, P, std::numeric_limits<double>::quiet_NaN()));
    return fit;
  }
  fit.set_covariance(lu.inverse());
  return fit;
}

}  // namespace pseudogmm
