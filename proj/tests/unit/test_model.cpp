#include <doctest.h>

#include "../oracles.hpp"
#include "twfm/model.hpp"

using namespace twfm;

namespace {

ModelParams simple(double psiF, double psiE) {
  std::mt19937_64 rng(11);
  ModelParams t = oracle::random_params({6, 5, 1, 1}, rng);
  t.psiF(0) = psiF;
  t.psiE(0) = psiE;
  return t;
}

}  // namespace

TEST_CASE("dims require min(p, q) > max(r, c)") {
  CHECK_NOTHROW((Dims{5, 4, 3, 2}.check()));
  CHECK_THROWS_AS((Dims{5, 3, 3, 1}.check()), DimensionError);
  CHECK_THROWS_AS((Dims{5, 4, 0, 1}.check()), DimensionError);
}

TEST_CASE("validate accepts random valid parameters") {
  std::mt19937_64 rng(1);
  for (int k = 0; k < 20; ++k) {
    const ModelParams t = oracle::random_params({7, 6, 2, 3}, rng);
    const ValidationReport rep = validate(t);
    CHECK(rep.ok());
  }
}

TEST_CASE("validate reports each broken condition") {
  ModelParams t = simple(8.0, 1.0);
  CHECK(validate(t).ok());

  ModelParams bad = t;
  bad.L *= 1.01;
  CHECK(validate(bad).has(Condition::kIC1Row));

  bad = t;
  bad.Lambda *= 0.99;
  CHECK(validate(bad).has(Condition::kIC1Column));

  bad = simple(1.0, 1.0);
  CHECK(validate(bad).has(Condition::kSeparation));

  bad = simple(1.0, 1.02);
  CHECK(validate(bad).ok());
  CHECK_FALSE(validate(bad).warnings.empty());

  bad = t;
  bad.sigma2 = -1.0;
  CHECK(validate(bad).has(Condition::kPositivity));

  bad = t;
  bad.L *= -1.0;
  CHECK(validate(bad).has(Condition::kSignCanonical));

  std::mt19937_64 rng(2);
  ModelParams two = oracle::random_params({7, 6, 2, 1}, rng);
  std::swap(two.psiF(0), two.psiF(1));
  CHECK(validate(two).has(Condition::kOrderingRow));
}

TEST_CASE("shape mismatches throw instead of reporting") {
  ModelParams t = simple(8.0, 1.0);
  t.psiF.resize(2);
  CHECK_THROWS_AS(validate(t), DimensionError);
}

TEST_CASE("canonical signs") {
  MatrixXd M(3, 2);
  M << -1, 2, 0.5, -2, 0.2, 1;
  const MatrixXd C = canonicalize_signs(M);
  CHECK(C(0, 0) == 1.0);
  CHECK(C(0, 1) == 2.0);  // tie between |2| and |-2|: first entry decides
  CHECK(is_sign_canonical(C));
  CHECK_THROWS_AS(canonicalize_signs(MatrixXd::Zero(3, 1)), DegenerateLoadingError);
}

TEST_CASE("alignment flips columns towards the truth") {
  std::mt19937_64 rng(3);
  const ModelParams t = oracle::random_params({8, 7, 2, 2}, rng);
  ModelParams e = t;
  e.L.col(1) *= -1.0;
  e.Lambda.col(0) *= -1.0;
  const Alignment a = align_for_comparison(e, t);
  CHECK((a.params.L - t.L).norm() == doctest::Approx(0.0));
  CHECK((a.params.Lambda - t.Lambda).norm() == doctest::Approx(0.0));
}

TEST_CASE("loading R^2") {
  MatrixXd truth(4, 1);
  truth << 1, 2, 3, 5;
  CHECK(loading_accuracy_r2(truth, truth).average == doctest::Approx(1.0));
  CHECK(loading_accuracy_r2(2.0 * truth.array() + 1.0, truth).average ==
        doctest::Approx(1.0));
  MatrixXd noisy = truth;
  noisy(0) += 1.0;
  const double r2 = loading_accuracy_r2(noisy, truth).average;
  CHECK(r2 < 1.0);
  CHECK(r2 > 0.0);
  CHECK_THROWS_AS(loading_accuracy_r2(truth, MatrixXd::Ones(4, 1)), ValidationError);
  CHECK(loading_accuracy_r2(MatrixXd::Ones(4, 1), truth).average == 0.0);
}

TEST_CASE("identifiability check agrees up to column signs") {
  std::mt19937_64 rng(4);
  const ModelParams a = oracle::random_params({4, 4, 1, 2}, rng);
  ModelParams b = a;
  b.L *= -1.0;
  CHECK(identifiability_check(a, b));
  ModelParams c = a;
  c.psiF(0) *= 1.5;
  CHECK(identifiability_check(a, c));
  CHECK_THROWS_AS(identifiability_check(a, a, 8), CapExceededError);
}

TEST_CASE("column centering") {
  DataMatrix X{MatrixXd::Random(5, 3)};
  const DataMatrix C = X.centered_by_columns();
  CHECK(C.centered);
  CHECK(C.values.colwise().mean().cwiseAbs().maxCoeff() < 1e-14);
  X.values(2, 1) = std::nan("");
  CHECK_THROWS_AS(X.check_finite(), InputError);
}
