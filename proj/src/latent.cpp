#include "latent.hpp"

#include "twfm/errors.hpp"

namespace twfm::detail {

Projections Projections::compute(const MatrixXd& X, const MatrixXd& U,
                                 const MatrixXd& V) {
  Projections out;
  out.p = X.rows();
  out.q = X.cols();
  out.q1 = X.squaredNorm();
  out.XU = X * U;
  out.VX = V.transpose() * X;
  out.VXU = out.VX * U;
  return out;
}

namespace {

// Gain Phi (Phi + s2 I)^{-1}; Phi and (Phi + s2 I) commute, so the gain is
// symmetric and the posterior covariance of a row is s2 * gain.
MatrixXd gain(const MatrixXd& Phi, double sigma2) {
  MatrixXd shifted = Phi;
  shifted.diagonal().array() += sigma2;
  Eigen::LLT<MatrixXd> llt(shifted);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("latent gain: Phi + sigma2 I is not positive definite");
  }
  const MatrixXd K = llt.solve(Phi);
  return 0.5 * (K + K.transpose());
}

}  // namespace

LatentMoments latent_moments(const Projections& proj, const MatrixXd& U,
                             const MatrixXd& V, const MatrixXd& PhiF,
                             const MatrixXd& PhiE, double sigma2,
                             bool want_means) {
  const Index p = proj.p;
  const Index q = proj.q;
  const Index r = PhiF.rows();
  const Index c = PhiE.rows();
  const MatrixXd& Y11 = proj.VXU;

  LatentMoments out;

  // Rows of V_perp^T X U: y = f + eps, f ~ N(0, PhiF).
  const MatrixXd S21 = proj.XU.transpose() * proj.XU - Y11.transpose() * Y11;
  const MatrixXd KF = gain(PhiF, sigma2);
  const MatrixXd RF = MatrixXd::Identity(r, r) - KF;
  out.sum_FF = KF * S21 * KF + static_cast<double>(p - c) * sigma2 * KF;
  double resid = (RF * S21 * RF).trace() +
                 static_cast<double>(p - c) * sigma2 * KF.trace();

  // Columns of V^T X U_perp: y = e + eps, e ~ N(0, PhiE).
  const MatrixXd S12 = proj.VX * proj.VX.transpose() - Y11 * Y11.transpose();
  const MatrixXd KE = gain(PhiE, sigma2);
  const MatrixXd RE = MatrixXd::Identity(c, c) - KE;
  out.sum_EE = KE * S12 * KE + static_cast<double>(q - r) * sigma2 * KE;
  resid += (RE * S12 * RE).trace() +
           static_cast<double>(q - r) * sigma2 * KE.trace();

  // V_perp^T X U_perp is pure noise.
  resid += proj.q1 - proj.XU.squaredNorm() - proj.VX.squaredNorm() +
           Y11.squaredNorm();

  // Coupled block Y11 = F1 + G + eps, F1 (c x r) with rows ~ N(0, PhiF),
  // G (c x r) with columns ~ N(0, PhiE). Row-major vec: (i, j) -> i*r + j.
  const Index n = r * c;
  MatrixXd TF = MatrixXd::Zero(n, n);
  MatrixXd TE = MatrixXd::Zero(n, n);
  for (Index i = 0; i < c; ++i) {
    TF.block(i * r, i * r, r, r) = PhiF;
    for (Index i2 = 0; i2 < c; ++i2) {
      for (Index j = 0; j < r; ++j) TE(i * r + j, i2 * r + j) = PhiE(i, i2);
    }
  }
  MatrixXd S = TF + TE;
  S.diagonal().array() += sigma2;
  Eigen::LLT<MatrixXd> s_llt(S);
  if (s_llt.info() != Eigen::Success) {
    throw NumericalError("latent coupled block is not positive definite");
  }
  Eigen::VectorXd y(n);
  for (Index i = 0; i < c; ++i) {
    for (Index j = 0; j < r; ++j) y(i * r + j) = Y11(i, j);
  }
  const Eigen::VectorXd alpha = s_llt.solve(y);
  const Eigen::VectorXd mF = TF * alpha;
  const Eigen::VectorXd mG = TE * alpha;
  const MatrixXd CF = TF - TF * s_llt.solve(TF);
  const MatrixXd CG = TE - TE * s_llt.solve(TE);
  for (Index i = 0; i < c; ++i) {
    const Eigen::VectorXd f = mF.segment(i * r, r);
    out.sum_FF += f * f.transpose() + CF.block(i * r, i * r, r, r);
  }
  for (Index j = 0; j < r; ++j) {
    Eigen::VectorXd g(c);
    MatrixXd Cg(c, c);
    for (Index i = 0; i < c; ++i) {
      g(i) = mG(i * r + j);
      for (Index i2 = 0; i2 < c; ++i2) Cg(i, i2) = CG(i * r + j, i2 * r + j);
    }
    out.sum_EE += g * g.transpose() + Cg;
  }
  const MatrixXd S_inv = s_llt.solve(MatrixXd::Identity(n, n));
  resid += (sigma2 * alpha).squaredNorm() +
           sigma2 * (static_cast<double>(n) - sigma2 * S_inv.trace());
  out.residual_ss = resid;

  if (want_means) {
    MatrixXd M1(c, r);
    MatrixXd G(c, r);
    for (Index i = 0; i < c; ++i) {
      for (Index j = 0; j < r; ++j) {
        M1(i, j) = mF(i * r + j);
        G(i, j) = mG(i * r + j);
      }
    }
    out.mean_F = V * M1 + (proj.XU - V * Y11) * KF;
    out.mean_E = U * G.transpose() +
                 (proj.VX.transpose() - U * Y11.transpose()) * KE;
  }
  return out;
}

}  // namespace twfm::detail
