#include "twfm/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "twfm/spectral.hpp"

namespace twfm {

void Dims::check() const {
  if (p <= 0 || q <= 0 || r <= 0 || c <= 0) {
    throw DimensionError("dimensions must be positive, got " + to_string(*this));
  }
  if (std::min(p, q) <= std::max(r, c)) {
    throw DimensionError("need min(p, q) > max(r, c), got " + to_string(*this));
  }
}

std::string to_string(const Dims& dims) {
  std::ostringstream os;
  os << "(p=" << dims.p << ", q=" << dims.q << ", r=" << dims.r
     << ", c=" << dims.c << ")";
  return os.str();
}

void ModelParams::check_shapes() const {
  auto expect = [](bool ok, const char* what) {
    if (!ok) throw DimensionError(what);
  };
  expect(L.rows() == dims.q && L.cols() == dims.r, "L must be q x r");
  expect(Lambda.rows() == dims.p && Lambda.cols() == dims.c,
         "Lambda must be p x c");
  expect(psiF.size() == dims.r, "psiF must have r entries");
  expect(psiE.size() == dims.c, "psiE must have c entries");
}

void DataMatrix::check_finite() const {
  if (!values.allFinite()) {
    for (Index i = 0; i < values.rows(); ++i) {
      for (Index k = 0; k < values.cols(); ++k) {
        if (!std::isfinite(values(i, k))) {
          std::ostringstream os;
          os << "non-finite entry at row " << i << ", column " << k;
          throw InputError(os.str());
        }
      }
    }
  }
}

DataMatrix DataMatrix::centered_by_columns() const {
  DataMatrix out;
  out.values = values.rowwise() - values.colwise().mean();
  out.centered = true;
  return out;
}

std::string to_string(Condition condition) {
  switch (condition) {
    case Condition::kIC1Row: return "IC1-row";
    case Condition::kIC1Column: return "IC1-column";
    case Condition::kPositivity: return "MC5-positivity";
    case Condition::kOrderingRow: return "MC5-ordering-row";
    case Condition::kOrderingColumn: return "MC5-ordering-column";
    case Condition::kSeparation: return "MC5-separation";
    case Condition::kSignCanonical: return "IC2-sign";
  }
  return "unknown";
}

bool ValidationReport::has(Condition condition) const {
  return std::any_of(violations.begin(), violations.end(),
                     [&](const Violation& v) { return v.condition == condition; });
}

std::string ValidationReport::summary() const {
  std::ostringstream os;
  for (const auto& v : violations) {
    os << to_string(v.condition) << " (residual " << v.residual << ")";
    if (!v.detail.empty()) os << ": " << v.detail;
    os << "; ";
  }
  return os.str();
}

namespace {

double orthonormality_residual(const MatrixXd& M, double scale) {
  const MatrixXd gram = M.transpose() * M / scale;
  return (gram - MatrixXd::Identity(M.cols(), M.cols())).cwiseAbs().maxCoeff();
}

void check_ordering(const VectorXd& v, Condition condition, const char* name,
                    ValidationReport& report) {
  for (Index k = 0; k + 1 < v.size(); ++k) {
    if (!(v(k) > v(k + 1))) {
      std::ostringstream os;
      os << name << "[" << k << "]=" << v(k) << " <= " << name << "[" << k + 1
         << "]=" << v(k + 1);
      report.violations.push_back({condition, v(k + 1) - v(k), os.str()});
    }
  }
}

}  // namespace

double ic1_residual(const ModelParams& params) {
  params.check_shapes();
  const auto& d = params.dims;
  return std::max(
      orthonormality_residual(params.L, static_cast<double>(d.q) * params.sigma2),
      orthonormality_residual(params.Lambda,
                              static_cast<double>(d.p) * params.sigma2));
}

ValidationReport validate(const ModelParams& params, double tol_ic) {
  params.check_shapes();
  ValidationReport report;
  const auto& d = params.dims;

  bool positive = params.sigma2 > 0.0 && std::isfinite(params.sigma2);
  for (Index k = 0; k < d.r; ++k) positive = positive && params.psiF(k) > 0.0;
  for (Index k = 0; k < d.c; ++k) positive = positive && params.psiE(k) > 0.0;
  if (!positive) {
    report.violations.push_back(
        {Condition::kPositivity,
         std::min({params.sigma2, params.psiF.minCoeff(), params.psiE.minCoeff()}),
         "variances must be strictly positive"});
    // IC1 is scaled by sigma2 and meaningless without positivity.
    return report;
  }

  const double res_row =
      orthonormality_residual(params.L, static_cast<double>(d.q) * params.sigma2);
  if (!(res_row <= tol_ic)) {
    report.violations.push_back({Condition::kIC1Row, res_row, ""});
  }
  const double res_col = orthonormality_residual(
      params.Lambda, static_cast<double>(d.p) * params.sigma2);
  if (!(res_col <= tol_ic)) {
    report.violations.push_back({Condition::kIC1Column, res_col, ""});
  }

  check_ordering(params.psiF, Condition::kOrderingRow, "psiF", report);
  check_ordering(params.psiE, Condition::kOrderingColumn, "psiE", report);

  for (Index k = 0; k < d.r; ++k) {
    for (Index m = 0; m < d.c; ++m) {
      const double f = params.psiF(k);
      const double e = params.psiE(m);
      const double gap = std::abs(f - e) / std::max(f, e);
      std::ostringstream os;
      os << "psiF[" << k << "]=" << f << ", psiE[" << m << "]=" << e;
      if (gap <= tolerance::kSeparation) {
        report.violations.push_back({Condition::kSeparation, gap, os.str()});
      } else if (gap < tolerance::kNearDegenerate) {
        report.warnings.push_back("near-equal row/column variances " + os.str() +
                                  "; loading variance is inflated near ratio 1");
      }
    }
  }

  if (!is_sign_canonical(params.L) || !is_sign_canonical(params.Lambda)) {
    report.violations.push_back(
        {Condition::kSignCanonical, 0.0,
         "a loading column has a negative largest-magnitude entry"});
  }
  return report;
}

namespace {

Index argmax_abs(const Eigen::Ref<const VectorXd>& col) {
  Index best = 0;
  double best_abs = -1.0;
  for (Index i = 0; i < col.size(); ++i) {
    const double a = std::abs(col(i));
    if (a > best_abs) {  // strict: first index wins ties
      best_abs = a;
      best = i;
    }
  }
  return best;
}

}  // namespace

MatrixXd canonicalize_signs(const MatrixXd& loadings) {
  MatrixXd out = loadings;
  for (Index j = 0; j < out.cols(); ++j) {
    const Index i = argmax_abs(out.col(j));
    if (out(i, j) == 0.0) {
      throw DegenerateLoadingError("loading column " + std::to_string(j) +
                                   " is identically zero");
    }
    if (out(i, j) < 0.0) out.col(j) *= -1.0;
  }
  return out;
}

bool is_sign_canonical(const MatrixXd& loadings) {
  for (Index j = 0; j < loadings.cols(); ++j) {
    if (loadings(argmax_abs(loadings.col(j)), j) < 0.0) return false;
  }
  return true;
}

Alignment align_for_comparison(const ModelParams& estimate,
                               const ModelParams& truth) {
  estimate.check_shapes();
  truth.check_shapes();
  if (!(estimate.dims == truth.dims)) {
    throw DimensionError("cannot align " + to_string(estimate.dims) +
                         " against " + to_string(truth.dims));
  }
  Alignment out{estimate, {}, {}};
  auto align = [](MatrixXd& est, const MatrixXd& tru, std::vector<bool>& orth) {
    orth.assign(static_cast<std::size_t>(est.cols()), false);
    for (Index j = 0; j < est.cols(); ++j) {
      const double dot = est.col(j).dot(tru.col(j));
      if (dot < 0.0) {
        est.col(j) *= -1.0;
      } else if (dot == 0.0) {
        orth[static_cast<std::size_t>(j)] = true;
      }
    }
  };
  align(out.params.L, truth.L, out.row_orthogonal);
  align(out.params.Lambda, truth.Lambda, out.column_orthogonal);
  return out;
}

R2Result loading_accuracy_r2(const MatrixXd& estimate, const MatrixXd& truth) {
  if (estimate.rows() != truth.rows() || estimate.cols() != truth.cols()) {
    throw DimensionError("loading_accuracy_r2: shape mismatch");
  }
  R2Result out;
  out.per_column.resize(truth.cols());
  for (Index j = 0; j < truth.cols(); ++j) {
    const VectorXd x = truth.col(j).array() - truth.col(j).mean();
    const VectorXd y = estimate.col(j).array() - estimate.col(j).mean();
    const double sxx = x.squaredNorm();
    if (!(sxx > 0.0)) {
      throw ValidationError("true loading column " + std::to_string(j) +
                            " has zero variance; R^2 is undefined");
    }
    const double syy = y.squaredNorm();
    const double sxy = x.dot(y);
    out.per_column(j) = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 0.0;
  }
  out.average = truth.cols() > 0 ? out.per_column.mean() : 0.0;
  return out;
}

bool identifiability_check(const ModelParams& a, const ModelParams& b,
                           Index max_pq) {
  const MatrixXd sa = dense_sigma(a, max_pq);
  const MatrixXd sb = dense_sigma(b, max_pq);
  if (sa.rows() != sb.rows()) return true;
  const double scale = std::max(1.0, sa.cwiseAbs().maxCoeff());
  if ((sa - sb).cwiseAbs().maxCoeff() > 1e-10 * scale) return true;

  if (!(a.dims == b.dims)) return false;
  constexpr double kTol = 1e-8;
  auto close = [&](const MatrixXd& x, const MatrixXd& y) {
    return (x - y).cwiseAbs().maxCoeff() <= kTol * std::max(1.0, x.cwiseAbs().maxCoeff());
  };
  return close(canonicalize_signs(a.L), canonicalize_signs(b.L)) &&
         close(canonicalize_signs(a.Lambda), canonicalize_signs(b.Lambda)) &&
         close(a.psiF, b.psiF) && close(a.psiE, b.psiE) &&
         std::abs(a.sigma2 - b.sigma2) <= kTol * std::max(1.0, a.sigma2);
}

}  // namespace twfm
