#pragma once

// Dense reference computations used as independent oracles. Everything here
// forms pq x pq matrices and is only meant for small dimensions.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>

#include "twfm/model.hpp"

namespace oracle {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline MatrixXd random_orthonormal(Index n, Index k, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  MatrixXd G(n, k);
  for (Index j = 0; j < k; ++j) {
    for (Index i = 0; i < n; ++i) G(i, j) = normal(rng);
  }
  Eigen::HouseholderQR<MatrixXd> qr(G);
  return qr.householderQ() * MatrixXd::Identity(n, k);
}

// Random valid parameters: scaled orthonormal loadings, strictly decreasing
// variances drawn on a log scale and kept at least 20% apart across kinds.
inline twfm::ModelParams random_params(const twfm::Dims& d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> logu(std::log(0.2), std::log(20.0));
  std::uniform_real_distribution<double> s2u(0.05, 2.0);
  twfm::ModelParams out;
  out.dims = d;
  out.sigma2 = s2u(rng);
  for (;;) {
    std::vector<double> all;
    for (Index k = 0; k < d.r + d.c; ++k) all.push_back(std::exp(logu(rng)));
    std::sort(all.begin(), all.end(), std::greater<>());
    bool spaced = true;
    for (std::size_t k = 1; k < all.size(); ++k) spaced = spaced && all[k] < all[k - 1] / 1.2;
    if (!spaced) continue;
    std::shuffle(all.begin(), all.end(), rng);
    std::vector<double> f(all.begin(), all.begin() + d.r);
    std::vector<double> e(all.begin() + d.r, all.end());
    std::sort(f.begin(), f.end(), std::greater<>());
    std::sort(e.begin(), e.end(), std::greater<>());
    out.psiF = Eigen::Map<VectorXd>(f.data(), d.r);
    out.psiE = Eigen::Map<VectorXd>(e.data(), d.c);
    break;
  }
  out.L = twfm::canonicalize_signs(random_orthonormal(d.q, d.r, rng)) *
          std::sqrt(static_cast<double>(d.q) * out.sigma2);
  out.Lambda = twfm::canonicalize_signs(random_orthonormal(d.p, d.c, rng)) *
               std::sqrt(static_cast<double>(d.p) * out.sigma2);
  return out;
}

// Sigma_X from its definition, with vec stacking rows: entry (i, k) of X is
// element i*q + k. Built entry by entry rather than with Kronecker products.
inline MatrixXd covariance(const twfm::ModelParams& t) {
  const Index p = t.dims.p;
  const Index q = t.dims.q;
  const MatrixXd A = t.L * t.psiF.asDiagonal() * t.L.transpose();
  const MatrixXd B = t.Lambda * t.psiE.asDiagonal() * t.Lambda.transpose();
  MatrixXd S = MatrixXd::Zero(p * q, p * q);
  for (Index i = 0; i < p; ++i) {
    for (Index k = 0; k < q; ++k) {
      for (Index i2 = 0; i2 < p; ++i2) {
        for (Index k2 = 0; k2 < q; ++k2) {
          double v = 0.0;
          if (i == i2) v += A(k, k2);
          if (k == k2) v += B(i, i2);
          if (i == i2 && k == k2) v += t.sigma2;
          S(i * q + k, i2 * q + k2) = v;
        }
      }
    }
  }
  return S;
}

inline VectorXd vec_rows(const MatrixXd& X) {
  VectorXd v(X.size());
  for (Index i = 0; i < X.rows(); ++i) {
    for (Index k = 0; k < X.cols(); ++k) v(i * X.cols() + k) = X(i, k);
  }
  return v;
}

inline double log_det(const MatrixXd& S) {
  Eigen::LLT<MatrixXd> llt(S);
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

// -ln|S| - x^T S^{-1} x.
inline double log_density2(const MatrixXd& S, const MatrixXd& X) {
  Eigen::LLT<MatrixXd> llt(S);
  const VectorXd x = vec_rows(X);
  return -log_det(S) - x.dot(llt.solve(x));
}

inline double rel_frobenius(const MatrixXd& a, const MatrixXd& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

inline MatrixXd random_spd(Index n, std::mt19937_64& rng, double ridge = 0.5) {
  std::normal_distribution<double> normal;
  MatrixXd G(n, n);
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < n; ++i) G(i, j) = normal(rng);
  }
  MatrixXd S = G * G.transpose() / static_cast<double>(n);
  S.diagonal().array() += ridge;
  return S;
}

inline MatrixXd random_psd(Index n, Index rank, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  MatrixXd G(n, rank);
  for (Index j = 0; j < rank; ++j) {
    for (Index i = 0; i < n; ++i) G(i, j) = normal(rng);
  }
  return G * G.transpose();
}

}  // namespace oracle
