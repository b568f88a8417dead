#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "twfm/asymptotics.hpp"
#include "twfm/estimator.hpp"
#include "twfm/sampler.hpp"

namespace twfm {

struct StudyCell {
  Index p = 0;
  Index q = 0;
  VectorXd psiF;
  VectorXd psiE;
};

struct StudyConfig {
  std::vector<StudyCell> cells;
  double sigma2 = 0.01;
  int replicates = 100;
  FactorDistribution factor_dist;
  std::uint64_t base_seed = 1;
  FitConfig fit_config = default_fit_config();
  /// Start each fit from the warm-start role assignment that best matches the
  /// true loadings, instead of running every assignment.
  bool oracle_assignment = true;
  double ci_level = 0.95;
  int threads = 1;
  bool keep_replicates = true;
  /// Cells with p or q above 500 are rejected unless this is set.
  bool allow_large = false;

  static FitConfig default_fit_config();
  /// Throws ValidationError for empty or invalid cells and bad counts.
  void check() const;
};

struct ReplicateRecord {
  int index = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string failure;
  int outer_iterations = 0;
  double loglik = 0.0;
  VectorXd r2_L;
  VectorXd r2_Lambda;
  VectorXd psiF_hat;
  VectorXd psiE_hat;
  double sigma2_hat = 0.0;
  double sigma2_corrected = 0.0;
  VectorXd L_error;       // sqrt(p) (L_hat_.1 - L_.1)
  VectorXd Lambda_error;  // sqrt(q) (Lambda_hat_.1 - Lambda_.1)
  long L_covered = 0;
  long Lambda_covered = 0;
};

struct CellResult {
  StudyCell cell;
  ModelParams truth;
  int successes = 0;
  int failures = 0;
  double meanR2_L = 0.0;
  double meanR2_Lambda = 0.0;
  VectorXd meanR2_L_columns;
  VectorXd meanR2_Lambda_columns;
  double maePsiF = 0.0;
  double msePsiF = 0.0;
  double maePsiE = 0.0;
  double msePsiE = 0.0;
  double maeSigma2 = 0.0;
  double mseSigma2 = 0.0;
  /// Mean over entries m of the replicate variance of sqrt(p)(L_hat_m1 - L_m1).
  double varL = 0.0;
  double varLambda = 0.0;
  /// Replicate variance of sqrt(pq)(corrected sigma2 - sigma2).
  double varSigma2 = 0.0;
  AsymptoticVariances theory;
  double coverageL = 0.0;
  double coverageLambda = 0.0;
  double convergence_rate = 0.0;
  double mean_outer_iterations = 0.0;
  std::vector<ReplicateRecord> replicates;
};

struct StudyResult {
  std::vector<CellResult> cells;
};

/// Seed of replicate `replicate` in cell `cell`; the loadings of a cell use
/// replicate index -1.
std::uint64_t derive_seed(std::uint64_t base, std::size_t cell, long replicate);

StudyResult run_study(const StudyConfig& config);

enum class CltTarget { kLoadings, kPsiF, kPsiE, kSigma2 };

std::string to_string(CltTarget target);
CltTarget clt_target_from_string(const std::string& name);

struct CltReport {
  CltTarget target = CltTarget::kLoadings;
  double empirical_variance = 0.0;
  double theoretical_variance = 0.0;
  double ratio = 0.0;
  /// Correlation of the sorted centred samples with normal quantiles.
  double qq_correlation = 0.0;
  std::vector<double> sorted_samples;
  bool degenerate = false;  // some variance ratio within 5% of one
  bool small_sample = false;  // fewer than 200 successful replicates
  int successes = 0;
};

/// Scaled estimation errors of the first cell against their limiting
/// variances.
CltReport clt_check(const StudyConfig& config, CltTarget target);
CltReport clt_report(const CellResult& cell, CltTarget target);

struct DeltaRow {
  double delta = 0.0;
  bool valid = true;
  std::string note;
  double meanR2_L = 0.0;
  double meanR2_Lambda = 0.0;
  int successes = 0;
};

/// One-factor cells with psiF = delta * psiE for every delta; p, q and psiE
/// come from the first cell of the configuration.
std::vector<DeltaRow> delta_sweep(const StudyConfig& config,
                                  const std::vector<double>& delta_grid);

}  // namespace twfm
