#pragma once

#include <cstdint>

#include "twfm/model.hpp"

namespace twfm {

enum class FactorKind { kGaussian, kCenteredChiSquare };

/// Distribution of the rows of F and E. The chi-square variant draws
/// (chi2_df - df) / sqrt(2 df), a zero-mean unit-variance base that is then
/// scaled by the standard deviation of the target factor.
struct FactorDistribution {
  FactorKind kind = FactorKind::kGaussian;
  int df = 1;
};

struct SampleBundle {
  DataMatrix X;
  FactorScores scores;
  MatrixXd noise;
  std::uint64_t seed = 0;
};

/// Random parameters with U[0,1] loading entries. Columns are orthonormalised
/// (Gram-Schmidt, in column order), sign-canonicalised and scaled so that
/// L^T L = q sigma2 I and Lambda^T Lambda = p sigma2 I. For a single factor
/// the direction is the normalised U[0,1] vector itself. Throws
/// ValidationError if the requested variances break the ordering or
/// separation conditions.
ModelParams sample_params(const Dims& dims, const VectorXd& psiF,
                          const VectorXd& psiE, double sigma2,
                          std::uint64_t seed);

/// Draws (F, E, eps) and X = F L^T + Lambda E^T + eps.
SampleBundle sample(const ModelParams& params, const FactorDistribution& dist,
                    std::uint64_t seed);

}  // namespace twfm
