#include <doctest.h>

#include "../oracles.hpp"
#include "twfm/sampler.hpp"

using namespace twfm;

TEST_CASE("sampled parameters satisfy the identification conditions") {
  const ModelParams t = sample_params({20, 15, 2, 3}, (VectorXd(2) << 10, 8).finished(),
                                      (VectorXd(3) << 6, 4, 2).finished(), 0.01, 7);
  CHECK(validate(t).ok());
  CHECK(ic1_residual(t) < 1e-12);
}

TEST_CASE("single loading column is the normalised uniform draw") {
  const ModelParams t = sample_params({10, 12, 1, 1}, VectorXd::Constant(1, 8),
                                      VectorXd::Constant(1, 1), 0.01, 3);
  CHECK(t.L.minCoeff() >= 0.0);
  CHECK(t.Lambda.minCoeff() >= 0.0);
}

TEST_CASE("sampling is deterministic in the seed") {
  const ModelParams t = sample_params({6, 5, 1, 1}, VectorXd::Constant(1, 8),
                                      VectorXd::Constant(1, 1), 0.01, 1);
  const SampleBundle a = sample(t, {}, 42);
  const SampleBundle b = sample(t, {}, 42);
  const SampleBundle c = sample(t, {}, 43);
  CHECK(a.X.values == b.X.values);
  CHECK(a.X.values != c.X.values);
  CHECK((a.X.values - (a.scores.F * t.L.transpose() +
                       t.Lambda * a.scores.E.transpose() + a.noise))
            .norm() == doctest::Approx(0.0));
}

TEST_CASE("invalid variances are rejected") {
  CHECK_THROWS_AS(sample_params({6, 5, 1, 1}, VectorXd::Constant(1, 1),
                                VectorXd::Constant(1, 1), 0.01, 1),
                  ValidationError);
  CHECK_THROWS_AS(sample_params({6, 5, 1, 1}, VectorXd::Constant(1, 1),
                                VectorXd::Constant(1, 2), -0.01, 1),
                  ValidationError);
}

TEST_CASE("empirical covariance of X approaches the model covariance") {
  std::mt19937_64 rng(5);
  const ModelParams t = oracle::random_params({3, 3, 1, 1}, rng);
  const MatrixXd S = oracle::covariance(t);
  MatrixXd acc = MatrixXd::Zero(9, 9);
  const int n = 20000;
  for (int k = 0; k < n; ++k) {
    const VectorXd x = oracle::vec_rows(sample(t, {}, 1000 + k).X.values);
    acc += x * x.transpose();
  }
  acc /= n;
  CHECK((acc - S).cwiseAbs().maxCoeff() < 0.06 * S.cwiseAbs().maxCoeff());
}

TEST_CASE("centred chi-square factors have the target moments") {
  const ModelParams t = sample_params({4000, 5, 1, 1}, VectorXd::Constant(1, 4),
                                      VectorXd::Constant(1, 1), 0.01, 9);
  const SampleBundle b = sample(t, {FactorKind::kCenteredChiSquare, 3}, 10);
  const VectorXd f = b.scores.F.col(0);
  const double mean = f.mean();
  const double var = (f.array() - mean).square().mean();
  CHECK(std::abs(mean) < 0.15);
  CHECK(var == doctest::Approx(4.0).epsilon(0.1));
  CHECK_THROWS_AS(sample(t, {FactorKind::kCenteredChiSquare, 0}, 1), ValidationError);
}
