#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "twfm/errors.hpp"

namespace twfm {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace tolerance {
/// IC1 tolerance for parameters built exactly (sampler, hand constructions).
inline constexpr double kExact = 1e-8;
/// IC1 tolerance for iteratively estimated parameters.
inline constexpr double kPostEstimation = 1e-6;
/// Relative gap below which a row and a column factor variance count as equal.
inline constexpr double kSeparation = 1e-6;
/// Relative gap below which a row/column variance pair is flagged as
/// near-degenerate (loading variance blows up as the ratio approaches one).
inline constexpr double kNearDegenerate = 0.05;
}  // namespace tolerance

/// Sizes of the data matrix (p x q) and the number of row (r) and column (c)
/// factors.
struct Dims {
  Index p = 0;
  Index q = 0;
  Index r = 0;
  Index c = 0;

  /// Throws DimensionError unless all sizes are positive and
  /// min(p, q) > max(r, c).
  void check() const;

  friend bool operator==(const Dims&, const Dims&) = default;
};

std::string to_string(const Dims& dims);

/// Parameters of the two-way factor model
///   X = F L^T + Lambda E^T + eps,
/// with F rows ~ N(0, diag(psiF)), E rows ~ N(0, diag(psiE)) and
/// eps entries ~ N(0, sigma2).
struct ModelParams {
  Dims dims;
  MatrixXd L;       // q x r
  MatrixXd Lambda;  // p x c
  VectorXd psiF;    // r, decreasing
  VectorXd psiE;    // c, decreasing
  double sigma2 = 1.0;

  /// Throws DimensionError if any member disagrees with dims.
  void check_shapes() const;
};

/// The observed p x q matrix.
struct DataMatrix {
  MatrixXd values;
  bool centered = false;

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }

  /// Throws InputError on NaN or infinite entries.
  void check_finite() const;

  /// Returns a copy with every column shifted to zero mean.
  DataMatrix centered_by_columns() const;
};

/// Factor scores: F is p x r, E is q x c.
struct FactorScores {
  MatrixXd F;
  MatrixXd E;
};

enum class Condition {
  kIC1Row,            // L^T L / (q sigma2) = I_r
  kIC1Column,         // Lambda^T Lambda / (p sigma2) = I_c
  kPositivity,        // all variances > 0
  kOrderingRow,       // psiF strictly decreasing
  kOrderingColumn,    // psiE strictly decreasing
  kSeparation,        // psiF_k != psiE_m
  kSignCanonical,     // IC2 representative chosen
};

std::string to_string(Condition condition);

struct Violation {
  Condition condition;
  double residual = 0.0;
  std::string detail;
};

struct ValidationReport {
  std::vector<Violation> violations;
  /// Conditions that hold but sit close to a boundary (e.g. psiF_k near
  /// psiE_m). Never a reason to reject parameters.
  std::vector<std::string> warnings;

  bool ok() const { return violations.empty(); }
  bool has(Condition condition) const;
  std::string summary() const;
};

/// Checks the model conditions (ordering, positivity, separation) and the
/// identification conditions at tolerance `tol_ic`. Shape mismatches throw
/// DimensionError instead of producing a report.
ValidationReport validate(const ModelParams& params,
                          double tol_ic = tolerance::kExact);

/// Largest entry of |L^T L / (q sigma2) - I| and its column counterpart.
double ic1_residual(const ModelParams& params);

/// Flips each column so that its largest-magnitude entry is positive (the
/// first one on ties). Throws DegenerateLoadingError on a zero column.
MatrixXd canonicalize_signs(const MatrixXd& loadings);

/// True when canonicalize_signs would leave `loadings` unchanged.
bool is_sign_canonical(const MatrixXd& loadings);

struct Alignment {
  ModelParams params;
  /// Columns whose inner product with the truth is zero; their sign is left
  /// as given.
  std::vector<bool> row_orthogonal;
  std::vector<bool> column_orthogonal;
};

/// Chooses the sign of every estimated loading column to agree with the
/// matching true column. Variances are left untouched.
Alignment align_for_comparison(const ModelParams& estimate,
                               const ModelParams& truth);

struct R2Result {
  VectorXd per_column;
  double average = 0.0;
};

/// R^2 of regressing each estimated column on the matching true column.
/// Throws ValidationError if a true column has zero variance.
R2Result loading_accuracy_r2(const MatrixXd& estimate, const MatrixXd& truth);

/// Dense check of uniqueness: if Sigma_X(a) == Sigma_X(b) (within 1e-10)
/// then the parameters must agree up to column signs. Returns false only for
/// a counterexample. Throws CapExceededError when p*q > max_pq.
bool identifiability_check(const ModelParams& a, const ModelParams& b,
                           Index max_pq = 4096);

}  // namespace twfm
