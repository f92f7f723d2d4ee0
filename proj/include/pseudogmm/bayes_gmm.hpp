#pragma once

// Bayesian GMM: Gaussian pseudo-likelihood of the stacked scores, priors,
// and posterior sampling with the adaptive Metropolis engine.

#include "pseudogmm/gmm.hpp"
#include "pseudogmm/mcmc.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace pseudogmm {

/// log L(beta) = -1/2 U_n' Sigma_n^- U_n with Sigma_n = C_n - (1/n) U_n U_n',
/// taken on the numerical range of C_n. Defined only where that range has
/// dimension at least P and Sigma_n restricted to it is positive definite
/// with reciprocal condition above `detail::rcond_floor`.
class PseudoLikelihood {
 public:
  PseudoLikelihood(const PseudoObsMatrix& y, const DesignMatrix& X, BasisSet basis)
      : model_(y, X, std::move(basis)) {}

  const MomentModel& model() const { return model_; }

  Eigen::MatrixXd sigma(const ScoreState& s) const {
    return s.C - s.U * s.U.transpose() / static_cast<double>(model_.subjects());
  }
  Eigen::MatrixXd sigma(const Eigen::VectorXd& beta) const { return sigma(model_.scores(beta)); }

  /// Sigma_n in the coordinates of the range of C_n.
  struct Restricted {
    detail::RangeInverse range;
    Eigen::LDLT<Eigen::MatrixXd> factor;
  };

  std::optional<Restricted> restrict_sigma(const ScoreState& s) const {
    auto range = detail::range_inverse(s.C, model_.params());
    if (!range) return std::nullopt;
    const Eigen::MatrixXd reduced = range->basis.transpose() * sigma(s) * range->basis;
    Eigen::LDLT<Eigen::MatrixXd> f(reduced);
    if (f.info() != Eigen::Success || !f.isPositive() || !(f.rcond() > detail::rcond_floor) ||
        (f.vectorD().array() <= 0.0).any())
      return std::nullopt;
    return Restricted{std::move(*range), std::move(f)};
  }

  std::optional<double> operator()(const Eigen::VectorXd& beta) const {
    if (!beta.allFinite() || saturated(model_.design(), beta)) return std::nullopt;
    const ScoreState s = model_.scores(beta);
    auto r = restrict_sigma(s);
    if (!r) return std::nullopt;
    const Eigen::VectorXd z = r->range.project(s.U);
    const double q = z.dot(r->factor.solve(z));
    if (!std::isfinite(q) || q < 0.0) return std::nullopt;
    return -0.5 * q;
  }

 private:
  MomentModel model_;
};

enum class PriorFamily { Normal, Cauchy };

inline PriorFamily parse_prior_family(const std::string& name) {
  if (name == "normal" || name == "gaussian") return PriorFamily::Normal;
  if (name == "cauchy") return PriorFamily::Cauchy;
  throw std::invalid_argument("unknown prior family '" + name + "' (expected normal|cauchy)");
}

inline std::string to_string(PriorFamily f) { return f == PriorFamily::Normal ? "normal" : "cauchy"; }

/// Independent zero-centred priors on every coefficient.
struct PriorSpec {
  PriorFamily family = PriorFamily::Normal;
  double scale = 10.0;
  /// Per-coefficient scales; overrides `scale` when non-empty.
  std::vector<double> scales;

  /// N(0, 10^2), or N(0, 1) for n <= 100.
  static PriorSpec defaults(Eigen::Index subjects) {
    PriorSpec p;
    p.scale = subjects <= 100 ? 1.0 : 10.0;
    return p;
  }

  double scale_of(Eigen::Index p) const {
    return scales.empty() ? scale : scales.at(static_cast<std::size_t>(p));
  }

  void validate(Eigen::Index params) const {
    if (!scales.empty() && static_cast<Eigen::Index>(scales.size()) != params)
      throw std::invalid_argument("prior has " + std::to_string(scales.size()) +
                                  " scales for " + std::to_string(params) + " coefficients");
    for (Eigen::Index p = 0; p < params; ++p)
      if (!(scale_of(p) > 0.0 && std::isfinite(scale_of(p))))
        throw std::invalid_argument("prior scales must be positive and finite");
  }

  double log_density(const Eigen::VectorXd& beta) const {
    double lp = 0.0;
    for (Eigen::Index p = 0; p < beta.size(); ++p) {
      const double s = scale_of(p), z = beta(p) / s;
      if (family == PriorFamily::Normal)
        lp += -0.5 * z * z - std::log(s) - 0.5 * std::log(2.0 * std::numbers::pi);
      else
        lp += -std::log1p(z * z) - std::log(std::numbers::pi * s);
    }
    return lp;
  }

  /// Curvature of -log prior at zero, used for proposal scaling.
  double precision_at_zero(Eigen::Index p) const {
    const double s = scale_of(p);
    return family == PriorFamily::Normal ? 1.0 / (s * s) : 2.0 / (s * s);
  }
};

struct BayesGmmOptions {
  McmcConfig mcmc;
  /// Truncation levels for the chain initial values, cycled over chains.
  std::vector<double> epsilons{0.01, 0.05, 0.1};
  std::vector<TailQuery> tails;
  double level = 0.95;
  double rhat_threshold = 1.01;
};

struct BayesGmmFit {
  PosteriorDraws draws;
  PosteriorSummary summary;
  std::vector<Eigen::VectorXd> inits;
  bool flagged = false;
  std::string advice;
};

/// Inverse of G' Sigma_n^- G plus prior precision at beta, if defined.
inline std::optional<Eigen::MatrixXd> laplace_covariance(const PseudoLikelihood& target,
                                                         const PriorSpec& prior,
                                                         const Eigen::VectorXd& beta) {
  if (saturated(target.model().design(), beta)) return std::nullopt;
  const ScoreState s = target.model().scores(beta);
  auto r = target.restrict_sigma(s);
  if (!r) return std::nullopt;
  const Eigen::MatrixXd G = r->range.basis.transpose() * target.model().jacobian(beta);
  Eigen::MatrixXd info = G.transpose() * r->factor.solve(G);
  for (Eigen::Index p = 0; p < info.rows(); ++p) info(p, p) += prior.precision_at_zero(p);
  Eigen::LLT<Eigen::MatrixXd> llt(info);
  if (llt.info() != Eigen::Success) return std::nullopt;
  Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(info.rows(), info.cols()));
  if (!cov.allFinite()) return std::nullopt;
  return cov;
}

/// Posterior sampling of log L + log prior. Chains start from the
/// least-squares starting values at each epsilon. The proposal covariance is
/// the Laplace covariance at the QIF estimate when that fit converges.
inline BayesGmmFit fit_bayes_gmm(const PseudoObsMatrix& y, const DesignMatrix& X,
                                 const BasisSet& basis, const PriorSpec& prior,
                                 const BayesGmmOptions& options = {}) {
  if (options.epsilons.empty()) throw std::invalid_argument("at least one epsilon is required");
  prior.validate(X.params());
  const PseudoLikelihood likelihood(y, X, basis);

  BayesGmmFit out;
  for (int c = 0; c < options.mcmc.chains; ++c) {
    const double eps = options.epsilons[static_cast<std::size_t>(c) % options.epsilons.size()];
    out.inits.push_back(starting_values(y, X, eps));
    if (!likelihood(out.inits.back()))
      throw std::invalid_argument("initial value of chain " + std::to_string(c + 1) +
                                  " (epsilon " + std::to_string(eps) +
                                  ") lies outside the pseudo-likelihood support; "
                                  "try other epsilon values");
  }

  McmcConfig cfg = options.mcmc;
  if (!cfg.proposal_covariance) {
    std::optional<Eigen::MatrixXd> cov;
    try {
      GmmOptions g;
      g.start = out.inits[out.inits.size() / 2];
      const FitResult freq = fit_gmm(y, X, basis, g);
      if (freq.converged) cov = laplace_covariance(likelihood, prior, freq.beta);
    } catch (const SingularMatrixError&) {
    }
    for (std::size_t c = 0; !cov && c < out.inits.size(); ++c)
      cov = laplace_covariance(likelihood, prior, out.inits[c]);
    if (cov) cfg.proposal_covariance = *cov;
  }

  const LogDensity target = [&](const Eigen::VectorXd& beta) -> std::optional<double> {
    auto ll = likelihood(beta);
    if (!ll) return std::nullopt;
    return *ll + prior.log_density(beta);
  };
  out.draws = sample(target, out.inits, cfg, X.names);
  out.summary = summarize(out.draws, options.tails, options.level);
  const double worst = out.draws.max_rhat();
  if (!(worst < options.rhat_threshold)) {
    out.flagged = true;
    out.advice = "max R-hat " + std::to_string(worst) + " exceeds " +
                 std::to_string(options.rhat_threshold) +
                 "; rerun with other epsilon values for the initial values";
  }
  return out;
}

/// JSON record: coefficient table, diagnostics and tail probabilities.
inline nlohmann::json summary_json(const PosteriorSummary& summary, const PosteriorDraws& draws) {
  nlohmann::json j;
  j["level"] = summary.level;
  j["chains"] = draws.chains.size();
  j["draws_per_chain"] = draws.draws_per_chain();
  j["warmup"] = draws.warmup;
  j["thin"] = draws.thin;
  j["seed"] = draws.seed;
  j["acceptance"] = draws.acceptance;
  j["support_violations"] = draws.support_violations;
  for (const auto& p : summary.parameters)
    j["coefficients"].push_back({{"name", p.name},
                                 {"mean", p.mean},
                                 {"sd", p.sd},
                                 {"median", p.median},
                                 {"lower", p.lower},
                                 {"upper", p.upper},
                                 {"mcse_mean", p.mcse_mean},
                                 {"rhat", p.rhat},
                                 {"ess_bulk", p.ess_bulk},
                                 {"ess_tail", p.ess_tail}});
  j["tail_probabilities"] = nlohmann::json::array();
  for (const auto& t : summary.tails)
    j["tail_probabilities"].push_back({{"parameter", t.parameter},
                                       {"threshold", t.threshold},
                                       {"probability", t.probability},
                                       {"mcse", t.mcse}});
  return j;
}

}  // namespace pseudogmm
