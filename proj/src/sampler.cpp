#include "twfm/sampler.hpp"

#include <cmath>
#include <random>

namespace twfm {

namespace {

using Engine = std::mt19937_64;

Engine make_engine(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                    static_cast<std::uint32_t>(seed >> 32), 0x2f4du};
  return Engine(seq);
}

MatrixXd uniform_orthonormal(Index rows, Index cols, Engine& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  MatrixXd M(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) M(i, j) = unif(rng);
  }
  // Modified Gram-Schmidt keeps the first column equal to the normalised
  // draw, so r = 1 reproduces plain normalisation.
  for (Index j = 0; j < cols; ++j) {
    for (Index k = 0; k < j; ++k) {
      M.col(j) -= M.col(k).dot(M.col(j)) * M.col(k);
    }
    const double norm = M.col(j).norm();
    if (!(norm > 1e-12)) {
      throw NumericalError("degenerate uniform loading draw");
    }
    M.col(j) /= norm;
  }
  return canonicalize_signs(M);
}

MatrixXd draw_factors(Index n, const VectorXd& variances,
                      const FactorDistribution& dist, Engine& rng) {
  MatrixXd out(n, variances.size());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::chi_squared_distribution<double> chi2(static_cast<double>(dist.df));
  const double df = static_cast<double>(dist.df);
  const double scale = 1.0 / std::sqrt(2.0 * df);
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < variances.size(); ++k) {
      const double base = dist.kind == FactorKind::kGaussian
                              ? normal(rng)
                              : (chi2(rng) - df) * scale;
      out(i, k) = std::sqrt(variances(k)) * base;
    }
  }
  return out;
}

}  // namespace

ModelParams sample_params(const Dims& dims, const VectorXd& psiF,
                          const VectorXd& psiE, double sigma2,
                          std::uint64_t seed) {
  dims.check();
  ModelParams out;
  out.dims = dims;
  out.psiF = psiF;
  out.psiE = psiE;
  out.sigma2 = sigma2;
  if (psiF.size() != dims.r || psiE.size() != dims.c) {
    throw DimensionError("variance vectors do not match r and c");
  }
  // Validate the variance part before spending random draws on loadings.
  out.L = MatrixXd::Zero(dims.q, dims.r);
  out.Lambda = MatrixXd::Zero(dims.p, dims.c);
  {
    ModelParams probe = out;
    probe.L.setIdentity();
    probe.L *= std::sqrt(static_cast<double>(dims.q) * std::max(sigma2, 0.0));
    probe.Lambda.setIdentity();
    probe.Lambda *= std::sqrt(static_cast<double>(dims.p) * std::max(sigma2, 0.0));
    const ValidationReport report = validate(probe, tolerance::kExact);
    if (!report.ok()) {
      throw ValidationError("requested variances are invalid: " + report.summary());
    }
  }
  Engine rng = make_engine(seed);
  out.L = uniform_orthonormal(dims.q, dims.r, rng) *
          std::sqrt(static_cast<double>(dims.q) * sigma2);
  out.Lambda = uniform_orthonormal(dims.p, dims.c, rng) *
               std::sqrt(static_cast<double>(dims.p) * sigma2);
  return out;
}

SampleBundle sample(const ModelParams& params, const FactorDistribution& dist,
                    std::uint64_t seed) {
  params.check_shapes();
  if (dist.df < 1) throw ValidationError("chi-square df must be >= 1");
  const auto& d = params.dims;
  Engine rng = make_engine(seed ^ 0x9e3779b97f4a7c15ull);
  SampleBundle out;
  out.seed = seed;
  out.scores.F = draw_factors(d.p, params.psiF, dist, rng);
  out.scores.E = draw_factors(d.q, params.psiE, dist, rng);
  std::normal_distribution<double> normal(0.0, std::sqrt(params.sigma2));
  out.noise.resize(d.p, d.q);
  for (Index k = 0; k < d.q; ++k) {
    for (Index i = 0; i < d.p; ++i) out.noise(i, k) = normal(rng);
  }
  out.X.values = out.scores.F * params.L.transpose() +
                 params.Lambda * out.scores.E.transpose() + out.noise;
  return out;
}

}  // namespace twfm
