#pragma once

#include <vector>

#include "twfm/model.hpp"

namespace twfm {

/// Limiting variances of the estimators, y = p/q:
///   sqrt(p) (L_hat_m. - L_m.)          -> N(0, diag(sigmaL))
///   sqrt(q) (Lambda_hat_k. - Lambda_k.) -> N(0, diag(sigmaLambda))
///   sqrt(p) (psiF_hat - psiF)           -> N(0, diag(varPsiF))
///   sqrt(q) (psiE_hat - psiE)           -> N(0, diag(varPsiE))
///   sqrt(pq) (corrected sigma2 - sigma2) -> N(0, varSigma2)
struct AsymptoticVariances {
  VectorXd sigmaL;       // r
  VectorXd sigmaLambda;  // c
  VectorXd varPsiF;      // r
  VectorXd varPsiE;      // c
  double varSigma2 = 0.0;
  double y = 1.0;
};

/// Throws ValidationError when y <= 0 or a row and a column variance
/// coincide (the loading variances diverge there).
AsymptoticVariances limiting_variances(const ModelParams& params, double y);

/// Asymptotic variance of a row-loading entry with one row and one column
/// factor, as a function of delta = sigmaF2 / sigmaE2:
///   sigma2 * (1 / sigmaF2 + (y + delta) / (delta - 1)^2).
/// Infinite at delta = 1.
double scalar_loading_variance(double sigma2, double sigmaF2, double y,
                               double delta);

struct CurvePoint {
  double delta = 0.0;
  double value = 0.0;
  bool valid = true;  // false at delta = 1
};

std::vector<CurvePoint> variance_curve(double sigma2, double sigmaF2, double y,
                                       const std::vector<double>& delta_grid);

/// Parses "start:stop:step" (inclusive of stop up to rounding) or a comma
/// separated list.
std::vector<double> parse_grid(const std::string& spec);

/// (1 + c/p + r/q) sigma2_hat.
double corrected_sigma2(double sigma2_hat, const Dims& dims);

struct LoadingIntervals {
  double level = 0.95;
  double z = 0.0;
  VectorXd half_width_L;       // r, z sqrt(sigmaL_j / p)
  VectorXd half_width_Lambda;  // c, z sqrt(sigmaLambda_i / q)
  MatrixXd L_lower, L_upper;
  MatrixXd Lambda_lower, Lambda_upper;
  /// False for columns whose variance ratio to some factor of the other
  /// kind is within 5% of one.
  std::vector<bool> L_reliable;
  std::vector<bool> Lambda_reliable;
};

/// Plug-in marginal intervals for every loading entry at the given level,
/// with y = p / q.
LoadingIntervals loading_ci(const ModelParams& theta_hat, double level);

}  // namespace twfm
