#include "twfm/spectral.hpp"

#include <unsupported/Eigen/KroneckerProduct>

#include <cmath>

namespace twfm {

namespace {

void check_symmetric(const MatrixXd& M, const char* name) {
  if (M.rows() != M.cols()) {
    throw DimensionError(std::string(name) + " must be square");
  }
  const double scale = std::max(1.0, M.cwiseAbs().maxCoeff());
  if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw NumericalError(std::string(name) + " is not symmetric");
  }
}

void check_dense_cap(Index n, Index cap) {
  if (n > cap) {
    throw CapExceededError("dense matrix of order " + std::to_string(n) +
                           " exceeds the cap " + std::to_string(cap));
  }
}

}  // namespace

MatrixXd miller_inverse(const MatrixXd& G, const MatrixXd& E,
                        KroneckerLayout layout, Index max_size) {
  check_symmetric(G, "G");
  check_symmetric(E, "E");
  const Index M = G.rows();
  const Index N = E.rows();
  check_dense_cap(M * N, max_size);

  Eigen::LLT<MatrixXd> g_llt(G);
  if (g_llt.info() != Eigen::Success) {
    throw NumericalError("G is not positive definite");
  }
  const MatrixXd G_inv = g_llt.solve(MatrixXd::Identity(M, M));

  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(E);
  if (eig.info() != Eigen::Success) {
    throw NumericalError("eigendecomposition of E failed");
  }
  const VectorXd& lambda = eig.eigenvalues();
  const double lambda_max = lambda.cwiseAbs().maxCoeff();
  const double rank_tol = 1e-12 * lambda_max;

  const MatrixXd I_M = MatrixXd::Identity(M, M);
  const MatrixXd I_N = MatrixXd::Identity(N, N);
  MatrixXd W_inv = layout == KroneckerLayout::kLeft
                       ? MatrixXd(Eigen::kroneckerProduct(G_inv, I_N))
                       : MatrixXd(Eigen::kroneckerProduct(I_N, G_inv));
  for (Index i = 0; i < N; ++i) {
    if (!(lambda(i) > rank_tol)) continue;
    const VectorXd e = eig.eigenvectors().col(i);
    const MatrixXd E_i = lambda(i) * e * e.transpose();
    const MatrixXd shifted = (G + lambda(i) * I_M).llt().solve(G_inv);
    if (layout == KroneckerLayout::kLeft) {
      W_inv -= Eigen::kroneckerProduct(shifted, E_i);
    } else {
      W_inv -= Eigen::kroneckerProduct(E_i, shifted);
    }
  }
  return W_inv;
}

SpectralCoefficients spectral_coeffs(const ModelParams& params) {
  params.check_shapes();
  const auto& d = params.dims;
  const double s2 = params.sigma2;
  const double s4 = s2 * s2;
  const double s6 = s4 * s2;
  SpectralCoefficients out;
  out.d1 = 1.0 / s2;
  out.d2.resize(d.r);
  out.d3.resize(d.c);
  out.d4.resize(d.c, d.r);
  for (Index j = 0; j < d.r; ++j) {
    out.d2(j) = 1.0 / (s4 * (1.0 + static_cast<double>(d.q) * params.psiF(j)));
  }
  for (Index i = 0; i < d.c; ++i) {
    out.d3(i) = 1.0 / (s4 * (1.0 + static_cast<double>(d.p) * params.psiE(i)));
  }
  // 1 - 1/(1+x) - 1/(1+y) + 1/(1+x+y) = xy(2+x+y) / ((1+x)(1+y)(1+x+y));
  // the xy factor cancels the 1/(pq psiF psiE) prefactor.
  for (Index i = 0; i < d.c; ++i) {
    const double y = static_cast<double>(d.p) * params.psiE(i);
    for (Index j = 0; j < d.r; ++j) {
      const double x = static_cast<double>(d.q) * params.psiF(j);
      out.d4(i, j) = (2.0 + x + y) / (s6 * (1.0 + x) * (1.0 + y) * (1.0 + x + y));
    }
  }
  return out;
}

double log_det_sigma(const ModelParams& params) {
  params.check_shapes();
  const auto& d = params.dims;
  const double p = static_cast<double>(d.p);
  const double q = static_cast<double>(d.q);
  double out = p * q * std::log(params.sigma2);
  for (Index j = 0; j < d.r; ++j) {
    out += (p - static_cast<double>(d.c)) * std::log1p(q * params.psiF(j));
  }
  for (Index i = 0; i < d.c; ++i) {
    out += (q - static_cast<double>(d.r)) * std::log1p(p * params.psiE(i));
  }
  for (Index i = 0; i < d.c; ++i) {
    for (Index j = 0; j < d.r; ++j) {
      out += std::log1p(q * params.psiF(j) + p * params.psiE(i));
    }
  }
  return out;
}

QuadraticForms quadratic_forms(const MatrixXd& X, const MatrixXd& L,
                               const MatrixXd& Lambda) {
  if (L.rows() != X.cols() || Lambda.rows() != X.rows()) {
    throw DimensionError("quadratic_forms: X is " + std::to_string(X.rows()) +
                         "x" + std::to_string(X.cols()) +
                         " but loadings do not match");
  }
  QuadraticForms out;
  out.q1 = X.squaredNorm();
  const MatrixXd XL = X * L;                      // p x r
  const MatrixXd LamX = Lambda.transpose() * X;   // c x q
  out.q2 = XL.colwise().squaredNorm().transpose();
  out.q3 = LamX.rowwise().squaredNorm();
  out.q4 = (Lambda.transpose() * XL).array().square().matrix();  // c x r
  return out;
}

double log_likelihood(const ModelParams& params, const QuadraticForms& forms) {
  const auto& d = params.dims;
  if (forms.q2.size() != d.r || forms.q3.size() != d.c ||
      forms.q4.rows() != d.c || forms.q4.cols() != d.r) {
    throw DimensionError("quadratic forms do not match the parameter dims");
  }
  const SpectralCoefficients k = spectral_coeffs(params);
  double quad = k.d1 * forms.q1;
  for (Index j = 0; j < d.r; ++j) quad -= params.psiF(j) * k.d2(j) * forms.q2(j);
  for (Index i = 0; i < d.c; ++i) quad -= params.psiE(i) * k.d3(i) * forms.q3(i);
  for (Index i = 0; i < d.c; ++i) {
    for (Index j = 0; j < d.r; ++j) {
      quad += params.psiF(j) * params.psiE(i) * k.d4(i, j) * forms.q4(i, j);
    }
  }
  return -log_det_sigma(params) - quad;
}

double log_likelihood(const ModelParams& params, const MatrixXd& X) {
  params.check_shapes();
  if (X.rows() != params.dims.p || X.cols() != params.dims.q) {
    throw DimensionError("X must be p x q for " + to_string(params.dims));
  }
  return log_likelihood(params, quadratic_forms(X, params.L, params.Lambda));
}

double log_likelihood(const ModelParams& params, const DataMatrix& X) {
  return log_likelihood(params, X.values);
}

LikelihoodEvaluation evaluate_log_likelihood(const ModelParams& params,
                                             const MatrixXd& X) {
  LikelihoodEvaluation out;
  out.value = log_likelihood(params, X);
  out.ic1_residual = ic1_residual(params);
  out.constraint_ok = out.ic1_residual < tolerance::kPostEstimation;
  return out;
}

MatrixXd dense_sigma(const ModelParams& params, Index max_pq) {
  params.check_shapes();
  const auto& d = params.dims;
  check_dense_cap(d.p * d.q, max_pq);
  const MatrixXd A = params.L * params.psiF.asDiagonal() * params.L.transpose();
  const MatrixXd B =
      params.Lambda * params.psiE.asDiagonal() * params.Lambda.transpose();
  MatrixXd sigma = Eigen::kroneckerProduct(MatrixXd::Identity(d.p, d.p), A);
  sigma += Eigen::kroneckerProduct(B, MatrixXd::Identity(d.q, d.q));
  sigma.diagonal().array() += params.sigma2;
  return sigma;
}

MatrixXd structured_inverse(const ModelParams& params,
                            const SpectralCoefficients& coeffs, Index max_pq) {
  params.check_shapes();
  const auto& d = params.dims;
  check_dense_cap(d.p * d.q, max_pq);
  const MatrixXd I_p = MatrixXd::Identity(d.p, d.p);
  const MatrixXd I_q = MatrixXd::Identity(d.q, d.q);
  MatrixXd out = coeffs.d1 * MatrixXd::Identity(d.p * d.q, d.p * d.q);
  std::vector<MatrixXd> A(static_cast<std::size_t>(d.r));
  std::vector<MatrixXd> B(static_cast<std::size_t>(d.c));
  for (Index j = 0; j < d.r; ++j) {
    A[j] = params.psiF(j) * params.L.col(j) * params.L.col(j).transpose();
    out -= coeffs.d2(j) * MatrixXd(Eigen::kroneckerProduct(I_p, A[j]));
  }
  for (Index i = 0; i < d.c; ++i) {
    B[i] = params.psiE(i) * params.Lambda.col(i) * params.Lambda.col(i).transpose();
    out -= coeffs.d3(i) * MatrixXd(Eigen::kroneckerProduct(B[i], I_q));
  }
  for (Index i = 0; i < d.c; ++i) {
    for (Index j = 0; j < d.r; ++j) {
      out += coeffs.d4(i, j) * MatrixXd(Eigen::kroneckerProduct(B[i], A[j]));
    }
  }
  return out;
}

}  // namespace twfm
