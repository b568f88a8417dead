#pragma once

// Exact Gaussian conditioning of the latent factors on X for fixed
// orthonormal loading bases. Writing X = Fb U^T + V Eb^T + eps with U (q x r)
// and V (p x c) orthonormal, rows of Fb ~ N(0, PhiF) and rows of Eb ~
// N(0, PhiE), and rotating X into [V V_perp]^T X [U U_perp], the posterior
// splits into p - c independent r-dimensional problems, q - r independent
// c-dimensional problems and one coupled 2rc-dimensional block observed
// through V^T X U. Nothing of size pq x pq is formed.

#include <Eigen/Dense>

namespace twfm::detail {

using Eigen::Index;
using Eigen::MatrixXd;

struct Projections {
  Index p = 0;
  Index q = 0;
  double q1 = 0.0;  // ||X||_F^2
  MatrixXd XU;      // p x r
  MatrixXd VX;      // c x q
  MatrixXd VXU;     // c x r

  static Projections compute(const MatrixXd& X, const MatrixXd& U,
                             const MatrixXd& V);
};

struct LatentMoments {
  MatrixXd sum_FF;             // E[Fb^T Fb], r x r
  MatrixXd sum_EE;             // E[Eb^T Eb], c x c
  double residual_ss = 0.0;    // E||X - Fb U^T - V Eb^T||^2
  MatrixXd mean_F;             // p x r, only when requested
  MatrixXd mean_E;             // q x c, only when requested
};

LatentMoments latent_moments(const Projections& proj, const MatrixXd& U,
                             const MatrixXd& V, const MatrixXd& PhiF,
                             const MatrixXd& PhiE, double sigma2,
                             bool want_means);

}  // namespace twfm::detail
