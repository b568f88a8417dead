#pragma once

// Closed-form algebra for the Kronecker-sum covariance
//
//   Sigma_X = I_p (x) A + B (x) I_q + sigma2 I_pq,
//   A = L diag(psiF) L^T,  B = Lambda diag(psiE) Lambda^T,
//
// with vec(X) stacking the rows of X (entry (i, k) at position i*q + k).
// Under the scaled-orthonormality constraint the inverse is a combination of
// I, I (x) A_j, B_i (x) I and B_i (x) A_j, and the determinant factorises,
// so the likelihood costs O(pq (r + c)) and no pq x pq object is formed.

#include <Eigen/Dense>

#include "twfm/model.hpp"

namespace twfm {

struct SpectralCoefficients {
  double d1 = 0.0;
  VectorXd d2;  // r
  VectorXd d3;  // c
  MatrixXd d4;  // c x r, entry (i, j) pairs column factor i with row factor j
};

/// Squared-norm statistics of the data that enter the likelihood.
struct QuadraticForms {
  double q1 = 0.0;  // tr(X^T X)
  VectorXd q2;      // r: L_j^T X^T X L_j
  VectorXd q3;      // c: Lambda_i^T X X^T Lambda_i
  MatrixXd q4;      // c x r: (Lambda_i^T X L_j)^2
};

enum class KroneckerLayout {
  kLeft,   // W = G (x) I_N + I_M (x) E
  kRight,  // W = I_N (x) G + E (x) I_M
};

/// Inverse of G (x) I + I (x) E (or the transposed layout) for symmetric
/// positive definite G and symmetric positive semidefinite E, using the
/// eigendecomposition of E. Eigenvalues of E below 1e-12 * lambda_max are
/// treated as zero. Throws NumericalError if G is not positive definite.
MatrixXd miller_inverse(const MatrixXd& G, const MatrixXd& E,
                        KroneckerLayout layout, Index max_size = 4096);

SpectralCoefficients spectral_coeffs(const ModelParams& params);

/// ln |Sigma_X|, evaluated in log space.
double log_det_sigma(const ModelParams& params);

QuadraticForms quadratic_forms(const MatrixXd& X, const MatrixXd& L,
                               const MatrixXd& Lambda);

/// -ln|Sigma_X| - vec(X)^T Sigma_X^{-1} vec(X), i.e. twice the Gaussian
/// log-density without the -pq ln(2 pi) constant.
double log_likelihood(const ModelParams& params, const QuadraticForms& forms);
double log_likelihood(const ModelParams& params, const MatrixXd& X);
double log_likelihood(const ModelParams& params, const DataMatrix& X);

struct LikelihoodEvaluation {
  double value = 0.0;
  double ic1_residual = 0.0;
  /// False when the loadings are more than 1e-6 away from the scaled
  /// orthonormality constraint; the closed forms assume it holds.
  bool constraint_ok = true;
};

LikelihoodEvaluation evaluate_log_likelihood(const ModelParams& params,
                                             const MatrixXd& X);

/// Dense Sigma_X (test oracle). Throws CapExceededError if pq > max_pq.
MatrixXd dense_sigma(const ModelParams& params, Index max_pq = 4096);

/// Dense Sigma_X^{-1} assembled from the closed-form coefficients.
MatrixXd structured_inverse(const ModelParams& params,
                            const SpectralCoefficients& coeffs,
                            Index max_pq = 4096);

}  // namespace twfm
