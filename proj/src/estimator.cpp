#include "twfm/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "latent.hpp"
#include "twfm/spectral.hpp"

namespace twfm {

namespace {

double dbl(Index n) { return static_cast<double>(n); }

void check_data(const MatrixXd& X, const Dims& dims) {
  dims.check();
  if (X.rows() != dims.p || X.cols() != dims.q) {
    throw DimensionError("X is " + std::to_string(X.rows()) + "x" +
                         std::to_string(X.cols()) + " but dims are " +
                         to_string(dims));
  }
  if (!X.allFinite()) throw InputError("X has non-finite entries");
}

MatrixXd gram_cols(const MatrixXd& X) {
  MatrixXd G = MatrixXd::Zero(X.cols(), X.cols());
  G.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose());
  return G.selfadjointView<Eigen::Lower>();
}

MatrixXd gram_rows(const MatrixXd& X) {
  MatrixXd G = MatrixXd::Zero(X.rows(), X.rows());
  G.selfadjointView<Eigen::Lower>().rankUpdate(X);
  return G.selfadjointView<Eigen::Lower>();
}

// Orthonormal factor of M closest in Frobenius norm.
MatrixXd polar(const MatrixXd& M) {
  Eigen::JacobiSVD<MatrixXd> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return svd.matrixU() * svd.matrixV().transpose();
}

struct SortedEigen {
  VectorXd values;   // decreasing
  MatrixXd vectors;
};

SortedEigen sorted_eigen(const MatrixXd& S) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(0.5 * (S + S.transpose()));
  if (eig.info() != Eigen::Success) {
    throw NumericalError("eigendecomposition of a variance block failed");
  }
  const Index k = S.rows();
  SortedEigen out{VectorXd(k), MatrixXd(k, k)};
  for (Index j = 0; j < k; ++j) {
    out.values(j) = eig.eigenvalues()(k - 1 - j);
    out.vectors.col(j) = eig.eigenvectors().col(k - 1 - j);
  }
  return out;
}

bool has_close_pair(const VectorXd& v) {
  for (Index j = 0; j + 1 < v.size(); ++j) {
    if (std::abs(v(j) - v(j + 1)) <= 1e-10 * std::max(std::abs(v(j)), 1e-300)) {
      return true;
    }
  }
  return false;
}

// Moves variances apart until ordering and separation hold with a margin.
void spread_variances(VectorXd& psiF, VectorXd& psiE) {
  constexpr double kStep = 1.1;
  auto order = [&](VectorXd& v) {
    std::sort(v.data(), v.data() + v.size(), std::greater<>());
    for (Index k = 1; k < v.size(); ++k) {
      if (v(k) > v(k - 1) / kStep) v(k) = v(k - 1) / kStep;
    }
  };
  order(psiF);
  order(psiE);
  for (int pass = 0; pass < 64; ++pass) {
    bool moved = false;
    for (Index k = 0; k < psiF.size(); ++k) {
      for (Index m = 0; m < psiE.size(); ++m) {
        const double gap = std::abs(psiF(k) - psiE(m)) / std::max(psiF(k), psiE(m));
        if (gap < 0.01) {
          psiE(m) = psiE(m) < psiF(k) ? psiF(k) / kStep : psiF(k) * kStep;
          moved = true;
        }
      }
    }
    order(psiE);
    if (!moved) break;
  }
}

// ---------------------------------------------------------------------------
// Likelihood in the orthonormal-basis parameterisation used by the EM loop:
// A = U PhiF U^T, B = V PhiE V^T, noise sigma2.

struct BasisState {
  MatrixXd PhiF;  // r x r
  MatrixXd PhiE;  // c x c
  double sigma2 = 1.0;
};

BasisState to_basis(const TildeParams& t) {
  return {dbl(t.dims.q) * t.psiF, dbl(t.dims.p) * t.psiE, t.sigma2};
}

TildeParams from_basis(const BasisState& s, const TildeParams& shape) {
  TildeParams out = shape;
  out.psiF = s.PhiF / dbl(shape.dims.q);
  out.psiE = s.PhiE / dbl(shape.dims.p);
  out.sigma2 = s.sigma2;
  return out;
}

double basis_loglik(const detail::Projections& proj, const BasisState& s,
                    const Dims& dims) {
  const SortedEigen ef = sorted_eigen(s.PhiF);
  const SortedEigen ee = sorted_eigen(s.PhiE);
  ModelParams params;
  params.dims = dims;
  params.L = MatrixXd::Zero(dims.q, dims.r);
  params.Lambda = MatrixXd::Zero(dims.p, dims.c);
  params.sigma2 = s.sigma2;
  params.psiF = ef.values / (dbl(dims.q) * s.sigma2);
  params.psiE = ee.values / (dbl(dims.p) * s.sigma2);
  const double qs = dbl(dims.q) * s.sigma2;
  const double ps = dbl(dims.p) * s.sigma2;
  QuadraticForms forms;
  forms.q1 = proj.q1;
  forms.q2 = qs * (proj.XU * ef.vectors).colwise().squaredNorm().transpose();
  forms.q3 = ps * (ee.vectors.transpose() * proj.VX).rowwise().squaredNorm();
  forms.q4 = (qs * ps) *
             (ee.vectors.transpose() * proj.VXU * ef.vectors).array().square().matrix();
  return log_likelihood(params, forms);
}

BasisState basis_em_step(const detail::Projections& proj, const MatrixXd& U,
                         const MatrixXd& V, const BasisState& s,
                         const Dims& dims, double floor, int* activations) {
  const detail::LatentMoments mom =
      detail::latent_moments(proj, U, V, s.PhiF, s.PhiE, s.sigma2, false);
  BasisState out;
  out.PhiF = mom.sum_FF / dbl(dims.p);
  out.PhiE = mom.sum_EE / dbl(dims.q);
  out.PhiF = 0.5 * (out.PhiF + out.PhiF.transpose()).eval();
  out.PhiE = 0.5 * (out.PhiE + out.PhiE.transpose()).eval();
  out.sigma2 = mom.residual_ss / (dbl(dims.p) * dbl(dims.q));
  int hits = 0;
  if (!(out.sigma2 >= floor)) {
    out.sigma2 = floor;
    ++hits;
  }
  // Floor the identified variances psi = eig(Phi) / (n sigma2).
  auto clamp = [&](MatrixXd& Phi, double n) {
    const SortedEigen e = sorted_eigen(Phi);
    const double lo = floor * n * out.sigma2;
    VectorXd vals = e.values;
    bool any = false;
    for (Index k = 0; k < vals.size(); ++k) {
      if (!(vals(k) >= lo)) {
        vals(k) = lo;
        any = true;
        ++hits;
      }
    }
    if (any) Phi = e.vectors * vals.asDiagonal() * e.vectors.transpose();
  };
  clamp(out.PhiF, dbl(dims.q));
  clamp(out.PhiE, dbl(dims.p));
  if (activations != nullptr) *activations += hits;
  return out;
}

// ---------------------------------------------------------------------------

LoadingUpdate update_L_with(const ModelParams& theta, const MatrixXd& X,
                            const MatrixXd& XtX, const FitConfig& config) {
  const auto& d = theta.dims;
  const SpectralCoefficients k = spectral_coeffs(theta);
  const MatrixXd XtLam = X.transpose() * theta.Lambda;  // q x c
  std::vector<MatrixXd> W(static_cast<std::size_t>(d.r));
  for (Index j = 0; j < d.r; ++j) {
    MatrixXd inner = k.d2(j) * XtX;
    for (Index i = 0; i < d.c; ++i) {
      inner.noalias() -= (theta.psiE(i) * k.d4(i, j)) * XtLam.col(i) *
                         XtLam.col(i).transpose();
    }
    W[static_cast<std::size_t>(j)] = theta.psiF(j) * inner;
  }
  const double scale = dbl(d.q) * theta.sigma2;
  LoadingUpdate out;
  out.trace = maximize_quadratic_sum(W, theta.L / std::sqrt(scale), config.eps0,
                                     config.err0, config.max_inner, scale);
  out.loadings = std::sqrt(scale) * out.trace.U;
  return out;
}

LoadingUpdate update_Lambda_with(const ModelParams& theta, const MatrixXd& X,
                                 const MatrixXd& XXt, const FitConfig& config) {
  const auto& d = theta.dims;
  const SpectralCoefficients k = spectral_coeffs(theta);
  const MatrixXd XL = X * theta.L;  // p x r
  std::vector<MatrixXd> W(static_cast<std::size_t>(d.c));
  for (Index i = 0; i < d.c; ++i) {
    MatrixXd inner = k.d3(i) * XXt;
    for (Index j = 0; j < d.r; ++j) {
      inner.noalias() -= (theta.psiF(j) * k.d4(i, j)) * XL.col(j) *
                         XL.col(j).transpose();
    }
    W[static_cast<std::size_t>(i)] = theta.psiE(i) * inner;
  }
  const double scale = dbl(d.p) * theta.sigma2;
  LoadingUpdate out;
  out.trace = maximize_quadratic_sum(W, theta.Lambda / std::sqrt(scale),
                                     config.eps0, config.err0, config.max_inner,
                                     scale);
  out.loadings = std::sqrt(scale) * out.trace.U;
  return out;
}

ModelParams random_init(const MatrixXd& X, const Dims& dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.5, 10.0);
  auto orthonormal = [&](Index n, Index k) {
    MatrixXd G(n, k);
    for (Index j = 0; j < k; ++j) {
      for (Index i = 0; i < n; ++i) G(i, j) = normal(rng);
    }
    Eigen::HouseholderQR<MatrixXd> qr(G);
    return canonicalize_signs(qr.householderQ() * MatrixXd::Identity(n, k));
  };
  ModelParams out;
  out.dims = dims;
  out.sigma2 = std::max(0.5 * X.squaredNorm() / (dbl(dims.p) * dbl(dims.q)), 1e-8);
  out.L = orthonormal(dims.q, dims.r) * std::sqrt(dbl(dims.q) * out.sigma2);
  out.Lambda = orthonormal(dims.p, dims.c) * std::sqrt(dbl(dims.p) * out.sigma2);
  out.psiF.resize(dims.r);
  out.psiE.resize(dims.c);
  for (Index j = 0; j < dims.r; ++j) out.psiF(j) = unif(rng);
  for (Index i = 0; i < dims.c; ++i) out.psiE(i) = unif(rng);
  spread_variances(out.psiF, out.psiE);
  return out;
}

void check_start(const ModelParams& start, const Dims& dims) {
  start.check_shapes();
  if (!(start.dims == dims)) {
    throw DimensionError("start value has dims " + to_string(start.dims) +
                         ", expected " + to_string(dims));
  }
  const ValidationReport report = validate(
      ModelParams{start.dims, canonicalize_signs(start.L),
                  canonicalize_signs(start.Lambda), start.psiF, start.psiE,
                  start.sigma2},
      tolerance::kPostEstimation);
  if (!report.ok()) {
    throw ValidationError("invalid start value: " + report.summary());
  }
}

}  // namespace

// ---------------------------------------------------------------------------

void FitConfig::check() const {
  if (!(err0 > 0.0)) throw ValidationError("err0 must be positive");
  if (!(eps0 > 0.0)) throw ValidationError("eps0 must be positive");
  if (max_outer < 1 || max_inner < 1) {
    throw ValidationError("iteration caps must be at least 1");
  }
  if (restarts < 0) throw ValidationError("restarts must be non-negative");
  if (!(variance_floor > 0.0)) {
    throw ValidationError("variance_floor must be positive");
  }
  if (init.mode == InitMode::kProvided && !init.provided) {
    throw ValidationError("provided init without parameters");
  }
}

std::string to_string(StopReason reason) {
  return reason == StopReason::kTolerance ? "tolerance" : "max_outer";
}

TildeParams to_tilde(const ModelParams& params) {
  params.check_shapes();
  const double s = std::sqrt(params.sigma2);
  TildeParams out;
  out.dims = params.dims;
  out.L = params.L / s;
  out.Lambda = params.Lambda / s;
  out.psiF = params.sigma2 * params.psiF.asDiagonal().toDenseMatrix();
  out.psiE = params.sigma2 * params.psiE.asDiagonal().toDenseMatrix();
  out.sigma2 = params.sigma2;
  return out;
}

RotationResult rotate_identify(const TildeParams& tilde) {
  const auto& d = tilde.dims;
  if (tilde.L.rows() != d.q || tilde.L.cols() != d.r ||
      tilde.Lambda.rows() != d.p || tilde.Lambda.cols() != d.c ||
      tilde.psiF.rows() != d.r || tilde.psiF.cols() != d.r ||
      tilde.psiE.rows() != d.c || tilde.psiE.cols() != d.c) {
    throw DimensionError("rotate_identify: shapes do not match " + to_string(d));
  }
  if (!(tilde.sigma2 > 0.0)) throw NumericalError("rotate_identify: sigma2 <= 0");
  const SortedEigen ef = sorted_eigen(tilde.psiF / tilde.sigma2);
  const SortedEigen ee = sorted_eigen(tilde.psiE / tilde.sigma2);
  if (!(ef.values.minCoeff() > 0.0) || !(ee.values.minCoeff() > 0.0)) {
    throw NumericalError("rotate_identify: variance block is not positive definite");
  }
  const double s = std::sqrt(tilde.sigma2);
  RotationResult out;
  out.params.dims = d;
  out.params.sigma2 = tilde.sigma2;
  out.params.psiF = ef.values;
  out.params.psiE = ee.values;
  out.params.L = canonicalize_signs(s * tilde.L * ef.vectors);
  out.params.Lambda = canonicalize_signs(s * tilde.Lambda * ee.vectors);
  out.ambiguous = has_close_pair(ef.values) || has_close_pair(ee.values);
  return out;
}

TraceMaxResult maximize_quadratic_sum(const std::vector<MatrixXd>& W,
                                      const MatrixXd& start, double eps0,
                                      double tol, int max_iter, double scale) {
  const Index k = start.cols();
  const Index n = start.rows();
  if (static_cast<Index>(W.size()) != k || k == 0) {
    throw DimensionError("maximize_quadratic_sum: need one matrix per column");
  }
  for (const auto& Wj : W) {
    if (Wj.rows() != n || Wj.cols() != n) {
      throw DimensionError("maximize_quadratic_sum: W_j must be n x n");
    }
    if (!Wj.allFinite()) throw NumericalError("non-finite quadratic form matrix");
  }
  auto objective = [&](const MatrixXd& U) {
    double f = 0.0;
    for (Index j = 0; j < k; ++j) {
      f += U.col(j).dot(W[static_cast<std::size_t>(j)] * U.col(j));
    }
    return scale * f;
  };

  TraceMaxResult out;
  if (k == 1) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(W[0]);
    if (eig.info() != Eigen::Success) {
      throw NumericalError("eigendecomposition of W failed");
    }
    out.objective.push_back(objective(start));
    out.U = canonicalize_signs(eig.eigenvectors().col(n - 1));
    out.objective.push_back(objective(out.U));
    out.iterations = 1;
    return out;
  }

  double lambda_min = std::numeric_limits<double>::infinity();
  for (const auto& Wj : W) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(Wj, Eigen::EigenvaluesOnly);
    if (eig.info() != Eigen::Success) {
      throw NumericalError("eigendecomposition of W failed");
    }
    lambda_min = std::min(lambda_min, eig.eigenvalues()(0));
  }
  const double shift = lambda_min - eps0;

  MatrixXd U = polar(start);
  double f = objective(U);
  out.objective.push_back(f);
  MatrixXd M(n, k);
  for (int it = 0; it < max_iter; ++it) {
    for (Index j = 0; j < k; ++j) {
      M.col(j) = W[static_cast<std::size_t>(j)] * U.col(j) - shift * U.col(j);
    }
    U = polar(M);
    const double f_new = objective(U);
    out.objective.push_back(f_new);
    out.iterations = it + 1;
    const bool done = std::abs(f_new - f) < tol;
    f = f_new;
    if (done) break;
    if (it + 1 == max_iter) out.cap_hit = true;
  }
  out.U = canonicalize_signs(U);
  return out;
}

std::vector<MatrixXd> row_quadratic_matrices(const ModelParams& theta,
                                             const MatrixXd& X) {
  const SpectralCoefficients k = spectral_coeffs(theta);
  const MatrixXd XtX = gram_cols(X);
  const MatrixXd XtLam = X.transpose() * theta.Lambda;
  std::vector<MatrixXd> W;
  for (Index j = 0; j < theta.dims.r; ++j) {
    MatrixXd inner = k.d2(j) * XtX;
    for (Index i = 0; i < theta.dims.c; ++i) {
      inner -= (theta.psiE(i) * k.d4(i, j)) * XtLam.col(i) * XtLam.col(i).transpose();
    }
    W.push_back(theta.psiF(j) * inner);
  }
  return W;
}

std::vector<MatrixXd> column_quadratic_matrices(const ModelParams& theta,
                                                const MatrixXd& X) {
  const SpectralCoefficients k = spectral_coeffs(theta);
  const MatrixXd XXt = gram_rows(X);
  const MatrixXd XL = X * theta.L;
  std::vector<MatrixXd> W;
  for (Index i = 0; i < theta.dims.c; ++i) {
    MatrixXd inner = k.d3(i) * XXt;
    for (Index j = 0; j < theta.dims.r; ++j) {
      inner -= (theta.psiF(j) * k.d4(i, j)) * XL.col(j) * XL.col(j).transpose();
    }
    W.push_back(theta.psiE(i) * inner);
  }
  return W;
}

LoadingUpdate update_L(const ModelParams& theta, const MatrixXd& X,
                       const FitConfig& config) {
  check_data(X, theta.dims);
  return update_L_with(theta, X, gram_cols(X), config);
}

LoadingUpdate update_Lambda(const ModelParams& theta, const MatrixXd& X,
                            const FitConfig& config) {
  check_data(X, theta.dims);
  return update_Lambda_with(theta, X, gram_rows(X), config);
}

TildeParams em_step(const TildeParams& start, const MatrixXd& X,
                    double variance_floor, int* floor_activations) {
  const auto& d = start.dims;
  check_data(X, d);
  const MatrixXd U = start.L / std::sqrt(dbl(d.q));
  const MatrixXd V = start.Lambda / std::sqrt(dbl(d.p));
  const detail::Projections proj = detail::Projections::compute(X, U, V);
  const BasisState next = basis_em_step(proj, U, V, to_basis(start), d,
                                        variance_floor, floor_activations);
  return from_basis(next, start);
}

VarianceUpdate em_update_variances(const TildeParams& start, const MatrixXd& X,
                                   const FitConfig& config) {
  const auto& d = start.dims;
  check_data(X, d);
  const MatrixXd U = start.L / std::sqrt(dbl(d.q));
  const MatrixXd V = start.Lambda / std::sqrt(dbl(d.p));
  const detail::Projections proj = detail::Projections::compute(X, U, V);
  BasisState state = to_basis(start);
  VarianceUpdate out;
  double h = basis_loglik(proj, state, d);
  out.h_trace.push_back(h);
  for (int it = 0; it < config.max_inner; ++it) {
    state = basis_em_step(proj, U, V, state, d, config.variance_floor,
                          &out.floor_activations);
    const double h_new = basis_loglik(proj, state, d);
    out.h_trace.push_back(h_new);
    out.iterations = it + 1;
    const bool done = std::abs(h_new - h) < config.err0;
    h = h_new;
    if (done) break;
    if (it + 1 == config.max_inner) out.cap_hit = true;
  }
  out.params = from_basis(state, start);
  return out;
}

double log_likelihood(const TildeParams& tilde, const MatrixXd& X) {
  return log_likelihood(rotate_identify(tilde).params, X);
}

std::vector<ModelParams> svd_init_candidates(const MatrixXd& X, const Dims& dims) {
  check_data(X, dims);
  const Index p = dims.p;
  const Index q = dims.q;
  const Index K = dims.r + dims.c;
  const Index n = std::min(p, q);
  if (n < K) {
    throw ValidationError("X has rank below r + c = " + std::to_string(K) +
                          "; try smaller r, c");
  }
  // Singular triplets from the eigendecomposition of the smaller Gram matrix.
  const bool use_cols = q <= p;
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(use_cols ? gram_cols(X) : gram_rows(X));
  if (eig.info() != Eigen::Success) throw NumericalError("SVD of X failed");
  VectorXd s2(K);
  MatrixXd left(p, K);
  MatrixXd right(q, K);
  for (Index k = 0; k < K; ++k) {
    s2(k) = std::max(eig.eigenvalues()(n - 1 - k), 0.0);
    const VectorXd vec = eig.eigenvectors().col(n - 1 - k);
    const double s = std::sqrt(s2(k));
    if (use_cols) {
      right.col(k) = vec;
      left.col(k) = s > 0.0 ? VectorXd(X * vec / s) : VectorXd::Zero(p);
    } else {
      left.col(k) = vec;
      right.col(k) = s > 0.0 ? VectorXd(X.transpose() * vec / s) : VectorXd::Zero(q);
    }
  }
  if (!(s2(K - 1) > 1e-12 * s2(0)) || !(s2(0) > 0.0)) {
    throw ValidationError("X has rank below r + c = " + std::to_string(K) +
                          "; try smaller r, c");
  }
  const double big = dbl(std::max(p, q));
  const double total = X.squaredNorm();
  double sigma2 = n > K ? (total - s2.sum()) / (dbl(n - K) * big)
                        : 0.1 * s2(K - 1) / big;
  sigma2 = std::max({sigma2, 1e-12 * total / (dbl(p) * dbl(q)), 1e-300});

  std::vector<ModelParams> out;
  std::vector<int> pick(static_cast<std::size_t>(K), 0);
  std::fill(pick.begin(), pick.begin() + dims.r, 1);
  // prev_permutation on a 1...10...0 mask walks the row-index subsets in
  // lexicographic order.
  do {
    ModelParams cand;
    cand.dims = dims;
    cand.sigma2 = sigma2;
    cand.L.resize(q, dims.r);
    cand.Lambda.resize(p, dims.c);
    cand.psiF.resize(dims.r);
    cand.psiE.resize(dims.c);
    Index jr = 0;
    Index jc = 0;
    for (Index k = 0; k < K; ++k) {
      if (pick[static_cast<std::size_t>(k)] == 1) {
        cand.L.col(jr) = right.col(k);
        const double a = s2(k) / dbl(p) - sigma2;
        cand.psiF(jr) = (a > 0.0 ? a : 0.1 * s2(k) / dbl(p)) / (dbl(q) * sigma2);
        ++jr;
      } else {
        cand.Lambda.col(jc) = left.col(k);
        const double b = s2(k) / dbl(q) - sigma2;
        cand.psiE(jc) = (b > 0.0 ? b : 0.1 * s2(k) / dbl(q)) / (dbl(p) * sigma2);
        ++jc;
      }
    }
    spread_variances(cand.psiF, cand.psiE);
    cand.L = canonicalize_signs(cand.L) * std::sqrt(dbl(q) * sigma2);
    cand.Lambda = canonicalize_signs(cand.Lambda) * std::sqrt(dbl(p) * sigma2);
    out.push_back(std::move(cand));
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return out;
}

ModelParams init_params(const MatrixXd& X, const Dims& dims,
                        const FitConfig& config) {
  check_data(X, dims);
  switch (config.init.mode) {
    case InitMode::kProvided: {
      if (!config.init.provided) throw ValidationError("provided init is empty");
      check_start(*config.init.provided, dims);
      ModelParams out = *config.init.provided;
      out.L = canonicalize_signs(out.L);
      out.Lambda = canonicalize_signs(out.Lambda);
      return out;
    }
    case InitMode::kRandom:
      return random_init(X, dims, config.init.seed);
    case InitMode::kSvd:
      break;
  }
  const std::vector<ModelParams> cands = svd_init_candidates(X, dims);
  std::size_t best = 0;
  double best_ll = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cands.size(); ++k) {
    const double ll = log_likelihood(cands[k], X);
    if (ll > best_ll) {
      best_ll = ll;
      best = k;
    }
  }
  return cands[best];
}

FactorScores posterior_scores(const ModelParams& theta, const MatrixXd& X) {
  const auto& d = theta.dims;
  check_data(X, d);
  theta.check_shapes();
  const double qs = dbl(d.q) * theta.sigma2;
  const double ps = dbl(d.p) * theta.sigma2;
  const MatrixXd U = theta.L / std::sqrt(qs);
  const MatrixXd V = theta.Lambda / std::sqrt(ps);
  const detail::Projections proj = detail::Projections::compute(X, U, V);
  const MatrixXd PhiF = qs * theta.psiF.asDiagonal().toDenseMatrix();
  const MatrixXd PhiE = ps * theta.psiE.asDiagonal().toDenseMatrix();
  const detail::LatentMoments mom =
      detail::latent_moments(proj, U, V, PhiF, PhiE, theta.sigma2, true);
  return {mom.mean_F / std::sqrt(qs), mom.mean_E / std::sqrt(ps)};
}

GradientDiagnostic estimating_equation_residual(const ModelParams& theta,
                                                const MatrixXd& X, double h) {
  const auto& d = theta.dims;
  check_data(X, d);
  theta.check_shapes();
  const double qs = dbl(d.q) * theta.sigma2;
  const double ps = dbl(d.p) * theta.sigma2;
  const MatrixXd U = theta.L / std::sqrt(qs);
  const MatrixXd V = theta.Lambda / std::sqrt(ps);
  const detail::Projections proj = detail::Projections::compute(X, U, V);

  // Unit-scale statistics; forms at noise variance s2 rescale them.
  const VectorXd xu2 = proj.XU.colwise().squaredNorm().transpose();
  const VectorXd vx2 = proj.VX.rowwise().squaredNorm();
  const MatrixXd vxu2 = proj.VXU.array().square().matrix();
  auto forms_at = [&](double s2, const VectorXd& a, const VectorXd& b,
                      const MatrixXd& c) {
    QuadraticForms f;
    f.q1 = proj.q1;
    f.q2 = dbl(d.q) * s2 * a;
    f.q3 = dbl(d.p) * s2 * b;
    f.q4 = dbl(d.p) * dbl(d.q) * s2 * s2 * c;
    return f;
  };
  auto eval = [&](const ModelParams& prm, const VectorXd& a, const VectorXd& b,
                  const MatrixXd& c) {
    return log_likelihood(prm, forms_at(prm.sigma2, a, b, c));
  };

  GradientDiagnostic out;
  auto variance_fd = [&](auto&& set) {
    ModelParams plus = theta;
    ModelParams minus = theta;
    const double step = set(plus, minus);
    const double g = (eval(plus, xu2, vx2, vxu2) - eval(minus, xu2, vx2, vxu2)) /
                     (2.0 * step);
    out.variance_part = std::max(out.variance_part, std::abs(g));
  };
  for (Index j = 0; j < d.r; ++j) {
    variance_fd([&](ModelParams& a, ModelParams& b) {
      const double t = h * theta.psiF(j);
      a.psiF(j) += t;
      b.psiF(j) -= t;
      return t;
    });
  }
  for (Index i = 0; i < d.c; ++i) {
    variance_fd([&](ModelParams& a, ModelParams& b) {
      const double t = h * theta.psiE(i);
      a.psiE(i) += t;
      b.psiE(i) -= t;
      return t;
    });
  }
  variance_fd([&](ModelParams& a, ModelParams& b) {
    const double t = h * theta.sigma2;
    a.sigma2 += t;
    b.sigma2 -= t;
    return t;
  });

  // Tangent directions (I - U U^T) e_m for column j of U, and the mirror
  // for V. The step is relative to the unit column norm.
  for (Index m = 0; m < d.q; ++m) {
    const double nrm2 = 1.0 - U.row(m).squaredNorm();
    if (!(nrm2 > 1e-12)) continue;
    const double nrm = std::sqrt(nrm2);
    const VectorXd xd = (X.col(m) - proj.XU * U.row(m).transpose()) / nrm;
    const VectorXd vd = (proj.VX.col(m) - proj.VXU * U.row(m).transpose()) / nrm;
    for (Index j = 0; j < d.r; ++j) {
      double val[2];
      for (int s = 0; s < 2; ++s) {
        const double t = s == 0 ? h : -h;
        VectorXd a = xu2;
        MatrixXd c = vxu2;
        a(j) = (proj.XU.col(j) + t * xd).squaredNorm();
        c.col(j) = (proj.VXU.col(j) + t * vd).array().square().matrix();
        val[s] = eval(theta, a, vx2, c);
      }
      const double g = (val[0] - val[1]) / (2.0 * h) / std::sqrt(qs);
      out.loading_part = std::max(out.loading_part, std::abs(g));
    }
  }
  for (Index k = 0; k < d.p; ++k) {
    const double nrm2 = 1.0 - V.row(k).squaredNorm();
    if (!(nrm2 > 1e-12)) continue;
    const double nrm = std::sqrt(nrm2);
    const VectorXd dx =
        (X.row(k).transpose() - proj.VX.transpose() * V.row(k).transpose()) / nrm;
    const VectorXd du =
        (proj.XU.row(k).transpose() - proj.VXU.transpose() * V.row(k).transpose()) / nrm;
    for (Index i = 0; i < d.c; ++i) {
      double val[2];
      for (int s = 0; s < 2; ++s) {
        const double t = s == 0 ? h : -h;
        VectorXd b = vx2;
        MatrixXd c = vxu2;
        b(i) = (proj.VX.row(i).transpose() + t * dx).squaredNorm();
        c.row(i) = (proj.VXU.row(i).transpose() + t * du).array().square().matrix().transpose();
        val[s] = eval(theta, xu2, b, c);
      }
      const double g = (val[0] - val[1]) / (2.0 * h) / std::sqrt(ps);
      out.loading_part = std::max(out.loading_part, std::abs(g));
    }
  }
  out.max_abs = std::max(out.variance_part, out.loading_part);
  return out;
}

FitResult fit_from(const MatrixXd& X, const ModelParams& start,
                   const FitConfig& config) {
  config.check();
  const Dims& dims = start.dims;
  check_data(X, dims);
  check_start(start, dims);

  const MatrixXd XtX = gram_cols(X);
  const MatrixXd XXt = gram_rows(X);

  FitResult out;
  ModelParams theta = start;
  theta.L = canonicalize_signs(theta.L);
  theta.Lambda = canonicalize_signs(theta.Lambda);
  double ll = log_likelihood(theta, X);
  if (!std::isfinite(ll)) throw NumericalError("non-finite log-likelihood at start");
  out.loglik_trace.push_back(ll);
  bool ambiguous_seen = false;

  for (int m = 0; m < config.max_outer; ++m) {
    InnerIterations inner;
    const LoadingUpdate upL = update_L_with(theta, X, XtX, config);
    theta.L = upL.loadings;
    inner.update_L = upL.trace.iterations;
    inner.L_cap_hit = upL.trace.cap_hit;

    const LoadingUpdate upLam = update_Lambda_with(theta, X, XXt, config);
    theta.Lambda = upLam.loadings;
    inner.update_Lambda = upLam.trace.iterations;
    inner.Lambda_cap_hit = upLam.trace.cap_hit;

    const VarianceUpdate var = em_update_variances(to_tilde(theta), X, config);
    inner.em = var.iterations;
    inner.em_cap_hit = var.cap_hit;
    out.floor_activations += var.floor_activations;

    const RotationResult rot = rotate_identify(var.params);
    theta = rot.params;
    if (rot.ambiguous && !ambiguous_seen) {
      out.warnings.push_back("repeated variance eigenvalues: rotation is ambiguous");
      ambiguous_seen = true;
    }
    const double ll_new = log_likelihood(theta, X);
    if (!std::isfinite(ll_new)) {
      throw NumericalError("non-finite log-likelihood at outer step " +
                           std::to_string(m + 1));
    }
    out.loglik_trace.push_back(ll_new);
    out.inner_iters.push_back(inner);
    out.ic1_trace.push_back(ic1_residual(theta));
    const bool done = std::abs(ll_new - ll) < config.err0;
    ll = ll_new;
    if (done) {
      out.converged = true;
      out.stop_reason = StopReason::kTolerance;
      break;
    }
  }
  if (out.floor_activations > 0) {
    out.warnings.push_back("variance floor " + std::to_string(config.variance_floor) +
                           " activated " + std::to_string(out.floor_activations) +
                           " times");
  }
  const ValidationReport report = validate(theta, tolerance::kPostEstimation);
  for (const auto& v : report.violations) {
    out.warnings.push_back("estimate violates " + to_string(v.condition) +
                           (v.detail.empty() ? "" : ": " + v.detail));
  }
  for (Index k = 0; k < dims.r; ++k) {
    for (Index j = 0; j < dims.c; ++j) {
      const double gap = std::abs(theta.psiF(k) - theta.psiE(j)) / theta.psiF(k);
      if (gap < tolerance::kNearDegenerate) {
        std::ostringstream os;
        os << "row variance " << theta.psiF(k) << " and column variance "
           << theta.psiE(j)
           << " are within 5%; loading estimates may fluctuate strongly";
        out.warnings.push_back(os.str());
      }
    }
  }
  out.theta_hat = theta;
  if (config.compute_scores) out.scores = posterior_scores(theta, X);
  if (config.compute_gradient) {
    out.gradient_norm = estimating_equation_residual(theta, X).max_abs;
  }
  return out;
}

FitResult fit(const MatrixXd& X, const Dims& dims, const FitConfig& config) {
  config.check();
  check_data(X, dims);
  std::vector<ModelParams> starts;
  switch (config.init.mode) {
    case InitMode::kSvd:
      starts = svd_init_candidates(X, dims);
      break;
    case InitMode::kProvided:
    case InitMode::kRandom:
      starts.push_back(init_params(X, dims, config));
      break;
  }
  for (int k = 1; k <= config.restarts; ++k) {
    starts.push_back(random_init(X, dims, config.init.seed + static_cast<std::uint64_t>(k)));
  }

  std::vector<FitResult> fits;
  std::vector<double> finals;
  std::string last_error;
  for (const ModelParams& s : starts) {
    try {
      fits.push_back(fit_from(X, s, config));
      finals.push_back(fits.back().loglik());
    } catch (const NumericalError& e) {
      last_error = e.what();
      fits.emplace_back();
      finals.push_back(-std::numeric_limits<double>::infinity());
    }
  }
  const auto best_it = std::max_element(finals.begin(), finals.end());
  if (!std::isfinite(*best_it)) {
    throw NumericalError("every start failed: " + last_error);
  }
  const auto best = static_cast<std::size_t>(best_it - finals.begin());
  FitResult out = std::move(fits[best]);
  out.restart_logliks = finals;
  out.selected_start = static_cast<int>(best);
  const ModelParams& tb = out.theta_hat;
  for (std::size_t k = 0; k < fits.size(); ++k) {
    if (k == best || !(std::abs(finals[k] - finals[best]) < config.err0)) continue;
    const ModelParams& tk = fits[k].theta_hat;
    if (tk.L.size() == 0) continue;
    const MatrixXd overlap = (tk.L.transpose() * tb.L) /
                             (dbl(dims.q) * std::sqrt(tk.sigma2 * tb.sigma2));
    if (overlap.diagonal().cwiseAbs().minCoeff() < 1.0 - 1e-3) ++out.tied_starts;
  }
  if (out.tied_starts > 0) {
    out.warnings.push_back(
        std::to_string(out.tied_starts) +
        " other start(s) reach the same likelihood at a different point; "
        "the row/column roles of the factors are not separated by this sample");
  }
  return out;
}

FitResult fit(const DataMatrix& X, const Dims& dims, const FitConfig& config) {
  X.check_finite();
  return fit(X.values, dims, config);
}

}  // namespace twfm
