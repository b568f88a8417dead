#include <doctest.h>

#include <unsupported/Eigen/KroneckerProduct>

#include "../oracles.hpp"
#include "twfm/spectral.hpp"

using namespace twfm;

TEST_CASE("structured inverse matches the dense inverse") {
  std::mt19937_64 rng(21);
  for (int k = 0; k < 10; ++k) {
    const ModelParams t = oracle::random_params({5, 4, 2, 1}, rng);
    const MatrixXd S = oracle::covariance(t);
    const MatrixXd inv = structured_inverse(t, spectral_coeffs(t));
    CHECK(oracle::rel_frobenius(inv, S.inverse()) < 1e-10);
    CHECK(oracle::rel_frobenius(dense_sigma(t), S) < 1e-14);
  }
}

TEST_CASE("fourth coefficient equals the four-term form") {
  std::mt19937_64 rng(22);
  for (int k = 0; k < 20; ++k) {
    const ModelParams t = oracle::random_params({9, 7, 2, 2}, rng);
    const SpectralCoefficients c = spectral_coeffs(t);
    const double p = 9, q = 7, s2 = t.sigma2;
    for (Index i = 0; i < 2; ++i) {
      for (Index j = 0; j < 2; ++j) {
        const double x = q * t.psiF(j), y = p * t.psiE(i);
        const double ref = (1.0 - 1.0 / (1 + x) - 1.0 / (1 + y) + 1.0 / (1 + x + y)) /
                           (p * q * s2 * s2 * s2 * t.psiF(j) * t.psiE(i));
        CHECK(c.d4(i, j) == doctest::Approx(ref).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("log-determinant and likelihood match dense evaluation") {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> normal;
  for (int k = 0; k < 10; ++k) {
    const ModelParams t = oracle::random_params({4, 6, 1, 2}, rng);
    const MatrixXd S = oracle::covariance(t);
    CHECK(log_det_sigma(t) == doctest::Approx(oracle::log_det(S)).epsilon(1e-12));
    MatrixXd X(4, 6);
    for (Index i = 0; i < X.size(); ++i) X(i) = normal(rng);
    CHECK(log_likelihood(t, X) ==
          doctest::Approx(oracle::log_density2(S, X)).epsilon(1e-11));
  }
}

TEST_CASE("likelihood rejects mismatched data") {
  std::mt19937_64 rng(24);
  const ModelParams t = oracle::random_params({4, 6, 1, 1}, rng);
  CHECK_THROWS_AS(log_likelihood(t, MatrixXd::Zero(6, 4)), DimensionError);
}

TEST_CASE("constraint flag on the likelihood evaluation") {
  std::mt19937_64 rng(25);
  ModelParams t = oracle::random_params({5, 5, 1, 1}, rng);
  const MatrixXd X = MatrixXd::Random(5, 5);
  CHECK(evaluate_log_likelihood(t, X).constraint_ok);
  t.L *= 1.1;
  CHECK_FALSE(evaluate_log_likelihood(t, X).constraint_ok);
}

TEST_CASE("miller inverse in both layouts") {
  std::mt19937_64 rng(26);
  for (int k = 0; k < 10; ++k) {
    const MatrixXd G = oracle::random_spd(3, rng);
    const MatrixXd E = oracle::random_psd(4, 2, rng);  // singular on purpose
    const MatrixXd I3 = MatrixXd::Identity(3, 3);
    const MatrixXd I4 = MatrixXd::Identity(4, 4);
    const MatrixXd left = Eigen::kroneckerProduct(G, I4).eval() +
                          Eigen::kroneckerProduct(I3, E).eval();
    const MatrixXd right = Eigen::kroneckerProduct(I4, G).eval() +
                           Eigen::kroneckerProduct(E, I3).eval();
    CHECK(oracle::rel_frobenius(miller_inverse(G, E, KroneckerLayout::kLeft),
                                left.inverse()) < 1e-10);
    CHECK(oracle::rel_frobenius(miller_inverse(G, E, KroneckerLayout::kRight),
                                right.inverse()) < 1e-10);
  }
  CHECK_THROWS_AS(miller_inverse(-MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2),
                                 KroneckerLayout::kLeft),
                  NumericalError);
  CHECK_THROWS_AS(miller_inverse(MatrixXd::Identity(40, 40), MatrixXd::Identity(40, 40),
                                 KroneckerLayout::kLeft, 1000),
                  CapExceededError);
}
