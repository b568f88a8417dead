#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "twfm/model.hpp"

namespace twfm {

enum class InitMode { kSvd, kProvided, kRandom };

struct InitSpec {
  InitMode mode = InitMode::kSvd;
  std::optional<ModelParams> provided;
  std::uint64_t seed = 0;
};

struct FitConfig {
  double err0 = 0.01;
  double eps0 = 0.005;
  int max_outer = 500;
  int max_inner = 200;
  InitSpec init;
  /// Extra random starts (seeds init.seed + 1, + 2, ...) on top of the
  /// configured init. The best final likelihood wins.
  int restarts = 0;
  double variance_floor = 1e-10;
  bool compute_scores = true;
  bool compute_gradient = true;

  /// Throws ValidationError on non-positive tolerances or caps.
  void check() const;
};

enum class StopReason { kTolerance, kMaxOuter };

std::string to_string(StopReason reason);

struct InnerIterations {
  int update_L = 0;
  int update_Lambda = 0;
  int em = 0;
  bool L_cap_hit = false;
  bool Lambda_cap_hit = false;
  bool em_cap_hit = false;
};

struct FitResult {
  ModelParams theta_hat;
  /// Entry 0 is the starting value, entry m the value after outer step m.
  std::vector<double> loglik_trace;
  std::vector<InnerIterations> inner_iters;
  /// IC1 residual after the rotation of every outer step.
  std::vector<double> ic1_trace;
  bool converged = false;
  StopReason stop_reason = StopReason::kMaxOuter;
  FactorScores scores;
  double gradient_norm = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> warnings;
  /// Final log-likelihood of every start that was run, in run order.
  std::vector<double> restart_logliks;
  int selected_start = 0;
  /// Number of starts whose final likelihood is within err0 of the best one
  /// while giving a different parameter point.
  int tied_starts = 0;
  int floor_activations = 0;

  double loglik() const { return loglik_trace.empty() ? 0.0 : loglik_trace.back(); }
};

/// Parameters between the loading updates and the rotation: loadings with
/// L^T L = q I and Lambda^T Lambda = p I, and symmetric (not necessarily
/// diagonal) variance blocks. Sigma_X = I (x) L psiF L^T + Lambda psiE
/// Lambda^T (x) I + sigma2 I, as for ModelParams.
struct TildeParams {
  Dims dims;
  MatrixXd L;       // q x r
  MatrixXd Lambda;  // p x c
  MatrixXd psiF;    // r x r
  MatrixXd psiE;    // c x c
  double sigma2 = 1.0;
};

/// L~ = L / sigma, psiF~ = sigma2 diag(psiF); same Sigma_X.
TildeParams to_tilde(const ModelParams& params);

struct RotationResult {
  ModelParams params;
  /// Two eigenvalues of a variance block agree within 1e-10 (relative), so
  /// the rotated loadings are not unique.
  bool ambiguous = false;
};

/// Rediagonalises the variance blocks: with psiF~ / sigma2 = Q D Q^T (D
/// decreasing), L = sigma L~ Q and psiF = diag(D); mirror for Lambda. The
/// covariance is unchanged and the output satisfies IC1 and IC2.
RotationResult rotate_identify(const TildeParams& tilde);

struct TraceMaxResult {
  MatrixXd U;                      // orthonormal columns
  std::vector<double> objective;   // scaled sum u_j^T W_j u_j per iteration
  int iterations = 0;
  bool cap_hit = false;
};

/// Maximises sum_j u_j^T W_j u_j over matrices with orthonormal columns.
/// A single column takes the top eigenvector. Several columns iterate
/// U <- polar factor of [A_1 u_1, ..., A_k u_k] with A_j = W_j - lambda I,
/// lambda = min_j lambda_min(W_j) - eps0, which never decreases the
/// objective. Stops when `scale` times the change drops below tol.
TraceMaxResult maximize_quadratic_sum(const std::vector<MatrixXd>& W,
                                      const MatrixXd& start, double eps0,
                                      double tol, int max_iter,
                                      double scale = 1.0);

/// W_j = psiF_j X^T [d2_j I - sum_i psiE_i d4_ij Lambda_i Lambda_i^T] X, so
/// that the L-dependent part of the log-likelihood is sum_j L_j^T W_j L_j.
std::vector<MatrixXd> row_quadratic_matrices(const ModelParams& theta,
                                             const MatrixXd& X);

/// Mirror of row_quadratic_matrices for Lambda (p x p matrices).
std::vector<MatrixXd> column_quadratic_matrices(const ModelParams& theta,
                                                const MatrixXd& X);

struct LoadingUpdate {
  MatrixXd loadings;  // scaled to sqrt(q sigma2) (or sqrt(p sigma2))
  TraceMaxResult trace;
};

LoadingUpdate update_L(const ModelParams& theta, const MatrixXd& X,
                       const FitConfig& config);
LoadingUpdate update_Lambda(const ModelParams& theta, const MatrixXd& X,
                            const FitConfig& config);

struct VarianceUpdate {
  TildeParams params;
  /// Log-likelihood before the first and after every EM step.
  std::vector<double> h_trace;
  int iterations = 0;
  bool cap_hit = false;
  int floor_activations = 0;
};

/// One EM step for (psiF~, psiE~, sigma2) with the loadings held fixed.
TildeParams em_step(const TildeParams& start, const MatrixXd& X,
                    double variance_floor = 1e-10,
                    int* floor_activations = nullptr);

/// EM steps until the log-likelihood changes by less than config.err0.
VarianceUpdate em_update_variances(const TildeParams& start, const MatrixXd& X,
                                   const FitConfig& config);

/// Log-likelihood of tilde parameters (through the rotation).
double log_likelihood(const TildeParams& tilde, const MatrixXd& X);

/// Warm starts from the top r + c singular triplets of X: one candidate for
/// every way of assigning r of them to the row factors and the rest to the
/// column factors, in lexicographic order of the row indices. Throws
/// ValidationError if X has rank below r + c.
std::vector<ModelParams> svd_init_candidates(const MatrixXd& X,
                                             const Dims& dims);

/// Start value for the configured init mode. In svd mode, the candidate with
/// the largest log-likelihood.
ModelParams init_params(const MatrixXd& X, const Dims& dims,
                        const FitConfig& config);

/// Posterior means E[F | X] (p x r) and E[E | X] (q x c).
FactorScores posterior_scores(const ModelParams& theta, const MatrixXd& X);

struct GradientDiagnostic {
  double max_abs = 0.0;
  double variance_part = 0.0;  // psiF, psiE, sigma2
  double loading_part = 0.0;   // tangent directions of L and Lambda
};

/// Central differences of the log-likelihood at theta (relative step h) in
/// the variance coordinates and along the unit tangent directions
/// (I - U U^T) e_m e_j^T of the constraint set (U = L / sqrt(q sigma2)),
/// which keep IC1 to first order.
GradientDiagnostic estimating_equation_residual(const ModelParams& theta,
                                                const MatrixXd& X,
                                                double h = 1e-5);

/// Runs the alternating algorithm from a given start.
FitResult fit_from(const MatrixXd& X, const ModelParams& start,
                   const FitConfig& config);

/// Runs every configured start and returns the best fit. svd init runs all
/// role assignments of svd_init_candidates.
FitResult fit(const DataMatrix& X, const Dims& dims, const FitConfig& config);
FitResult fit(const MatrixXd& X, const Dims& dims, const FitConfig& config);

}  // namespace twfm
