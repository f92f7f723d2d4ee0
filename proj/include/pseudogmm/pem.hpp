#pragma once

// Bayesian piecewise exponential proportional hazards model.

#include "pseudogmm/mcmc.hpp"
#include "pseudogmm/survival.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace pseudogmm {

/// M = max{5, min(floor(r / 8), 20)} for r observed events.
inline int interval_count(std::size_t events) {
  return std::max<int>(5, std::min<int>(static_cast<int>(events / 8), 20));
}

/// Interval m is (boundaries[m], boundaries[m+1]]; boundaries[0] = 0 and the
/// last boundary is the largest observed time.
struct PemSpec {
  std::vector<double> boundaries;
  /// Gamma(shape, rate) prior on each baseline hazard.
  double prior_shape = 1.0;
  double prior_rate = 1.0;
  /// Normal(0, sd^2) prior on each log hazard ratio.
  double beta_sd = std::sqrt(1e5);
  std::vector<std::string> warnings;

  int intervals() const { return static_cast<int>(boundaries.size()) - 1; }

  void validate() const {
    if (boundaries.size() < 2 || boundaries.front() != 0.0)
      throw std::invalid_argument("PEM boundaries must start at 0 and hold at least one interval");
    for (std::size_t m = 1; m < boundaries.size(); ++m)
      if (!(boundaries[m] > boundaries[m - 1]))
        throw std::invalid_argument("PEM boundaries must be strictly increasing");
    if (!(prior_shape > 0.0 && prior_rate > 0.0 && beta_sd > 0.0))
      throw std::invalid_argument("PEM prior parameters must be positive");
  }
};

/// Events over total follow-up: the exponential-model rate estimate.
inline double exponential_rate(const SurvivalDataset& data) {
  double exposure = 0.0;
  for (double t : data.time()) exposure += t;
  return static_cast<double>(data.event_count()) / exposure;
}

/// Cut points at event-time quantiles so intervals hold about r/M events each.
/// Coinciding cut points merge their intervals, with a warning.
inline PemSpec make_pem_spec(const SurvivalDataset& data, std::optional<int> intervals = std::nullopt) {
  std::vector<double> events;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.status()[i] == 1) events.push_back(data.time()[i]);
  if (events.empty()) throw std::invalid_argument("no events observed");
  std::sort(events.begin(), events.end());
  const int M = intervals ? *intervals : interval_count(events.size());
  if (M < 1) throw std::invalid_argument("PEM needs at least one interval");

  PemSpec spec;
  spec.prior_rate = exponential_rate(data);
  const double last = *std::max_element(data.time().begin(), data.time().end());
  spec.boundaries.push_back(0.0);
  const double r = static_cast<double>(events.size());
  for (int m = 1; m < M; ++m) {
    const auto idx = static_cast<std::size_t>(std::ceil(r * m / M)) - 1;
    const double cut = events[std::min(idx, events.size() - 1)];
    if (cut > spec.boundaries.back() && cut < last) spec.boundaries.push_back(cut);
    else
      spec.warnings.push_back("interval " + std::to_string(m) +
                              " has no exposure and was merged with its neighbour");
  }
  spec.boundaries.push_back(last);
  return spec;
}

/// Sufficient statistics grouped by distinct covariate rows. Parameters are
/// (log h_1..log h_M, beta), beta covering treatment then covariates.
class PemModel {
 public:
  PemModel(const SurvivalDataset& data, PemSpec spec, bool include_treatment = true,
           bool include_covariates = true)
      : spec_(std::move(spec)) {
    spec_.validate();
    const int M = spec_.intervals();
    const Eigen::Index C = include_covariates ? data.covariates().cols() : 0;
    covariates_ = (include_treatment ? 1 : 0) + C;
    for (int m = 0; m < M; ++m) names_.push_back("log_h" + std::to_string(m + 1));
    if (include_treatment) names_.push_back("treatment");
    for (Eigen::Index c = 0; c < C; ++c)
      names_.push_back(data.covariate_names()[static_cast<std::size_t>(c)]);

    std::map<std::vector<double>, std::size_t> index;
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::vector<double> x;
      if (include_treatment) x.push_back(data.arm()[i]);
      for (Eigen::Index c = 0; c < C; ++c)
        x.push_back(data.covariates()(static_cast<Eigen::Index>(i), c));
      auto [it, inserted] = index.emplace(x, groups_.size());
      if (inserted) groups_.push_back(Group{Eigen::Map<const Eigen::VectorXd>(x.data(), covariates_),
                                            Eigen::VectorXd::Zero(M), Eigen::VectorXd::Zero(M)});
      Group& g = groups_[it->second];
      const double t = data.time()[i];
      for (int m = 0; m < M; ++m) {
        const double lo = spec_.boundaries[static_cast<std::size_t>(m)];
        const double hi = spec_.boundaries[static_cast<std::size_t>(m) + 1];
        if (t <= lo) break;
        g.exposure(m) += std::min(t, hi) - lo;
        if (data.status()[i] == 1 && t <= hi) g.events(m) += 1.0;
      }
    }
  }

  const PemSpec& spec() const { return spec_; }
  Eigen::Index params() const { return spec_.intervals() + covariates_; }
  Eigen::Index treatment_index() const { return spec_.intervals(); }
  const std::vector<std::string>& names() const { return names_; }

  double log_likelihood(const Eigen::VectorXd& theta) const {
    const int M = spec_.intervals();
    const auto log_h = theta.head(M);
    const auto beta = theta.tail(covariates_);
    double ll = 0.0;
    for (const Group& g : groups_) {
      const double lin = covariates_ > 0 ? g.x.dot(beta) : 0.0;
      ll += g.events.dot(log_h.array().matrix() + Eigen::VectorXd::Constant(M, lin)) -
            (log_h.array() + lin).exp().matrix().dot(g.exposure);
    }
    return ll;
  }

  /// Gamma prior on h_m with the log-scale Jacobian, normal prior on beta,
  /// both up to additive constants.
  double log_prior(const Eigen::VectorXd& theta) const {
    const int M = spec_.intervals();
    const auto log_h = theta.head(M);
    double lp = spec_.prior_shape * log_h.sum() - spec_.prior_rate * log_h.array().exp().sum();
    lp -= 0.5 * theta.tail(covariates_).squaredNorm() / (spec_.beta_sd * spec_.beta_sd);
    return lp;
  }

  std::optional<double> log_posterior(const Eigen::VectorXd& theta) const {
    const double v = log_likelihood(theta) + log_prior(theta);
    if (!std::isfinite(v)) return std::nullopt;
    return v;
  }

  /// Gradient and negative Hessian of the log posterior.
  void derivatives(const Eigen::VectorXd& theta, Eigen::VectorXd& grad, Eigen::MatrixXd& neg_hess) const {
    const int M = spec_.intervals();
    const Eigen::Index D = params();
    grad = Eigen::VectorXd::Zero(D);
    neg_hess = Eigen::MatrixXd::Zero(D, D);
    const auto log_h = theta.head(M);
    const auto beta = theta.tail(covariates_);
    for (const Group& g : groups_) {
      const double lin = covariates_ > 0 ? g.x.dot(beta) : 0.0;
      const Eigen::VectorXd w = (log_h.array() + lin).exp().matrix().cwiseProduct(g.exposure);
      const Eigen::VectorXd resid = g.events - w;
      grad.head(M) += resid;
      neg_hess.topLeftCorner(M, M).diagonal() += w;
      if (covariates_ > 0) {
        grad.tail(covariates_) += resid.sum() * g.x;
        neg_hess.bottomRightCorner(covariates_, covariates_) += w.sum() * g.x * g.x.transpose();
        const Eigen::MatrixXd cross = w * g.x.transpose();
        neg_hess.topRightCorner(M, covariates_) += cross;
        neg_hess.bottomLeftCorner(covariates_, M) += cross.transpose();
      }
    }
    const Eigen::ArrayXd h = log_h.array().exp();
    grad.head(M).array() += spec_.prior_shape - spec_.prior_rate * h;
    neg_hess.topLeftCorner(M, M).diagonal().array() += spec_.prior_rate * h;
    const double prec = 1.0 / (spec_.beta_sd * spec_.beta_sd);
    grad.tail(covariates_) -= prec * beta;
    neg_hess.bottomRightCorner(covariates_, covariates_).diagonal().array() += prec;
  }

  /// Posterior mode by damped Newton; the log posterior is concave.
  Eigen::VectorXd mode(Eigen::MatrixXd* neg_hess_out = nullptr) const {
    const int M = spec_.intervals();
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(params());
    for (int m = 0; m < M; ++m) {
      double d = spec_.prior_shape, e = spec_.prior_rate;
      for (const Group& g : groups_) {
        d += g.events(m);
        e += g.exposure(m);
      }
      theta(m) = std::log(d / e);
    }
    Eigen::VectorXd grad;
    Eigen::MatrixXd H;
    double current = *log_posterior(theta);
    for (int iter = 0; iter < 100; ++iter) {
      derivatives(theta, grad, H);
      const Eigen::VectorXd delta = H.ldlt().solve(grad);
      double step = 1.0;
      std::optional<double> next = log_posterior(theta + delta);
      for (int h = 0; h < 40 && !(next && *next >= current); ++h) {
        step *= 0.5;
        next = log_posterior(theta + step * delta);
      }
      if (!next) break;
      theta += step * delta;
      current = *next;
      if ((step * delta).cwiseAbs().maxCoeff() < 1e-10) break;
    }
    if (neg_hess_out) {
      derivatives(theta, grad, H);
      *neg_hess_out = H;
    }
    return theta;
  }

 private:
  struct Group {
    Eigen::VectorXd x;
    Eigen::VectorXd events;
    Eigen::VectorXd exposure;
  };

  PemSpec spec_;
  Eigen::Index covariates_ = 0;
  std::vector<std::string> names_;
  std::vector<Group> groups_;
};

struct PemOptions {
  std::optional<int> intervals;
  bool include_treatment = true;
  bool include_covariates = true;
  McmcConfig mcmc;
  std::vector<TailQuery> tails;
  double level = 0.95;
  double rhat_threshold = 1.01;
};

struct PemFit {
  PemSpec spec;
  PosteriorDraws draws;
  PosteriorSummary summary;
  Eigen::VectorXd mode;
  bool flagged = false;
  std::string advice;
};

/// Chains start at the posterior mode shifted by -1, 0, +1 Laplace standard
/// deviations; the proposal covariance is the Laplace covariance.
inline PemFit fit_pem(const SurvivalDataset& data, const PemOptions& options = {}) {
  PemFit out;
  out.spec = make_pem_spec(data, options.intervals);
  const PemModel model(data, out.spec, options.include_treatment, options.include_covariates);

  Eigen::MatrixXd H;
  out.mode = model.mode(&H);
  McmcConfig cfg = options.mcmc;
  Eigen::MatrixXd cov = H.ldlt().solve(Eigen::MatrixXd::Identity(H.rows(), H.cols()));
  if (!cfg.proposal_covariance && cov.allFinite()) cfg.proposal_covariance = cov;
  const Eigen::VectorXd sd = cov.diagonal().cwiseMax(0.0).cwiseSqrt();

  std::vector<Eigen::VectorXd> inits;
  for (int c = 0; c < cfg.chains; ++c) {
    const double shift = cfg.chains > 1 ? 2.0 * c / (cfg.chains - 1) - 1.0 : 0.0;
    inits.push_back(out.mode + shift * sd);
  }
  const LogDensity target = [&](const Eigen::VectorXd& theta) { return model.log_posterior(theta); };
  out.draws = sample(target, inits, cfg, model.names());
  out.summary = summarize(out.draws, options.tails, options.level);
  const double worst = out.draws.max_rhat();
  if (!(worst < options.rhat_threshold)) {
    out.flagged = true;
    out.advice = "max R-hat " + std::to_string(worst) + " exceeds " +
                 std::to_string(options.rhat_threshold) + "; run longer chains";
  }
  return out;
}

}  // namespace pseudogmm
