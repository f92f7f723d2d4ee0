#pragma once

#include <Eigen/Dense>

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pseudogmm {

enum class CorrelationKind { Independence, Exchangeable, AR1 };

inline CorrelationKind parse_correlation(std::string name) {
  for (auto& c : name) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (name == "IND" || name == "INDEPENDENCE") return CorrelationKind::Independence;
  if (name == "EXCH" || name == "EXCHANGEABLE") return CorrelationKind::Exchangeable;
  if (name == "AR1" || name == "AR-1") return CorrelationKind::AR1;
  throw std::invalid_argument("unknown working correlation '" + name +
                              "' (expected IND, EXCH or AR1)");
}

inline std::string to_string(CorrelationKind kind) {
  switch (kind) {
    case CorrelationKind::Independence: return "IND";
    case CorrelationKind::Exchangeable: return "EXCH";
    case CorrelationKind::AR1: return "AR1";
  }
  return "?";
}

/// Working correlation R(alpha) of dimension K.
struct WorkingCorrelation {
  CorrelationKind kind = CorrelationKind::Independence;
  Eigen::Index dimension = 1;
  double alpha = 0.0;

  /// Open interval of admissible alpha.
  std::pair<double, double> alpha_range() const {
    if (kind == CorrelationKind::Exchangeable && dimension > 1)
      return {-1.0 / static_cast<double>(dimension - 1), 1.0};
    return {-1.0, 1.0};
  }

  Eigen::MatrixXd matrix() const {
    const Eigen::Index K = dimension;
    Eigen::MatrixXd R = Eigen::MatrixXd::Identity(K, K);
    if (kind == CorrelationKind::Independence) return R;
    auto [lo, hi] = alpha_range();
    if (!(alpha > lo && alpha < hi))
      throw std::invalid_argument("working correlation alpha " + std::to_string(alpha) +
                                  " outside (" + std::to_string(lo) + ", " +
                                  std::to_string(hi) + ")");
    for (Eigen::Index a = 0; a < K; ++a)
      for (Eigen::Index b = 0; b < K; ++b)
        if (a != b)
          R(a, b) = kind == CorrelationKind::Exchangeable
                        ? alpha
                        : std::pow(alpha, static_cast<double>(std::abs(a - b)));
    return R;
  }
};

/// Basis matrices M_1..M_J whose span approximates R^{-1}.
struct BasisSet {
  CorrelationKind kind = CorrelationKind::Independence;
  std::vector<Eigen::MatrixXd> matrices;

  Eigen::Index size() const { return static_cast<Eigen::Index>(matrices.size()); }
  Eigen::Index dimension() const { return matrices.empty() ? 0 : matrices.front().rows(); }
};

inline BasisSet make_basis(CorrelationKind kind, Eigen::Index K) {
  BasisSet basis{kind, {Eigen::MatrixXd::Identity(K, K)}};
  if (kind == CorrelationKind::Independence || K < 2) return basis;
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(K, K);
  if (kind == CorrelationKind::Exchangeable) {
    M.setOnes();
    M.diagonal().setZero();
  } else {
    for (Eigen::Index k = 0; k + 1 < K; ++k) M(k, k + 1) = M(k + 1, k) = 1.0;
  }
  basis.matrices.push_back(M);
  return basis;
}

}  // namespace pseudogmm
