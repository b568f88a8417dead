#include "twfm/study.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

#include "twfm/spectral.hpp"

namespace twfm {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double variance(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size() - 1);
}

// Largest squared overlap of a candidate with the true loading directions.
double assignment_overlap(const ModelParams& cand, const ModelParams& truth) {
  const double qs = static_cast<double>(truth.dims.q);
  const double ps = static_cast<double>(truth.dims.p);
  const MatrixXd a = truth.L.transpose() * cand.L /
                     (qs * std::sqrt(truth.sigma2 * cand.sigma2));
  const MatrixXd b = truth.Lambda.transpose() * cand.Lambda /
                     (ps * std::sqrt(truth.sigma2 * cand.sigma2));
  return a.squaredNorm() + b.squaredNorm();
}

ReplicateRecord run_replicate(const StudyConfig& config, const ModelParams& truth,
                              std::size_t cell_index, int index) {
  ReplicateRecord rec;
  rec.index = index;
  rec.seed = derive_seed(config.base_seed, cell_index, index);
  const Dims& d = truth.dims;
  try {
    const SampleBundle bundle = sample(truth, config.factor_dist, rec.seed);
    FitResult res;
    if (config.oracle_assignment) {
      const std::vector<ModelParams> cands = svd_init_candidates(bundle.X.values, d);
      std::size_t best = 0;
      double best_overlap = -1.0;
      for (std::size_t k = 0; k < cands.size(); ++k) {
        const double o = assignment_overlap(cands[k], truth);
        if (o > best_overlap) {
          best_overlap = o;
          best = k;
        }
      }
      res = fit_from(bundle.X.values, cands[best], config.fit_config);
    } else {
      res = fit(bundle.X.values, d, config.fit_config);
    }
    rec.outer_iterations = static_cast<int>(res.inner_iters.size());
    rec.loglik = res.loglik();
    if (!res.converged) {
      rec.failure = "iteration cap reached";
      return rec;
    }
    const ModelParams est = align_for_comparison(res.theta_hat, truth).params;
    rec.r2_L = loading_accuracy_r2(est.L, truth.L).per_column;
    rec.r2_Lambda = loading_accuracy_r2(est.Lambda, truth.Lambda).per_column;
    rec.psiF_hat = est.psiF;
    rec.psiE_hat = est.psiE;
    rec.sigma2_hat = est.sigma2;
    rec.sigma2_corrected = corrected_sigma2(est.sigma2, d);
    rec.L_error = std::sqrt(static_cast<double>(d.p)) * (est.L.col(0) - truth.L.col(0));
    rec.Lambda_error =
        std::sqrt(static_cast<double>(d.q)) * (est.Lambda.col(0) - truth.Lambda.col(0));
    const LoadingIntervals ci = loading_ci(est, config.ci_level);
    rec.L_covered = ((truth.L.array() >= ci.L_lower.array()) &&
                     (truth.L.array() <= ci.L_upper.array())).count();
    rec.Lambda_covered = ((truth.Lambda.array() >= ci.Lambda_lower.array()) &&
                          (truth.Lambda.array() <= ci.Lambda_upper.array())).count();
    rec.ok = true;
  } catch (const std::exception& e) {
    rec.failure = e.what();
  }
  return rec;
}

CellResult aggregate(const StudyConfig& config, const StudyCell& cell,
                     const ModelParams& truth, std::vector<ReplicateRecord> recs) {
  const Dims& d = truth.dims;
  CellResult out;
  out.cell = cell;
  out.truth = truth;
  out.meanR2_L_columns = VectorXd::Zero(d.r);
  out.meanR2_Lambda_columns = VectorXd::Zero(d.c);
  std::vector<double> sig;
  std::vector<std::vector<double>> lerr(static_cast<std::size_t>(d.q));
  std::vector<std::vector<double>> lamerr(static_cast<std::size_t>(d.p));
  long covL = 0;
  long covLam = 0;
  double iters = 0.0;
  int converged_or_not = 0;
  for (const auto& rec : recs) {
    if (rec.outer_iterations > 0 || rec.ok) {
      ++converged_or_not;
      iters += rec.outer_iterations;
    }
    if (!rec.ok) {
      ++out.failures;
      continue;
    }
    ++out.successes;
    out.meanR2_L_columns += rec.r2_L;
    out.meanR2_Lambda_columns += rec.r2_Lambda;
    out.maePsiF += (rec.psiF_hat - truth.psiF).cwiseAbs().mean();
    out.msePsiF += (rec.psiF_hat - truth.psiF).squaredNorm() / static_cast<double>(d.r);
    out.maePsiE += (rec.psiE_hat - truth.psiE).cwiseAbs().mean();
    out.msePsiE += (rec.psiE_hat - truth.psiE).squaredNorm() / static_cast<double>(d.c);
    out.maeSigma2 += std::abs(rec.sigma2_hat - truth.sigma2);
    out.mseSigma2 += (rec.sigma2_hat - truth.sigma2) * (rec.sigma2_hat - truth.sigma2);
    sig.push_back(std::sqrt(static_cast<double>(d.p) * static_cast<double>(d.q)) *
                  (rec.sigma2_corrected - truth.sigma2));
    for (Index m = 0; m < d.q; ++m) lerr[static_cast<std::size_t>(m)].push_back(rec.L_error(m));
    for (Index k = 0; k < d.p; ++k) {
      lamerr[static_cast<std::size_t>(k)].push_back(rec.Lambda_error(k));
    }
    covL += rec.L_covered;
    covLam += rec.Lambda_covered;
  }
  if (out.successes > 0) {
    const double n = out.successes;
    out.meanR2_L_columns /= n;
    out.meanR2_Lambda_columns /= n;
    out.meanR2_L = out.meanR2_L_columns.mean();
    out.meanR2_Lambda = out.meanR2_Lambda_columns.mean();
    out.maePsiF /= n;
    out.msePsiF /= n;
    out.maePsiE /= n;
    out.msePsiE /= n;
    out.maeSigma2 /= n;
    out.mseSigma2 /= n;
    for (const auto& v : lerr) out.varL += variance(v);
    out.varL /= static_cast<double>(d.q);
    for (const auto& v : lamerr) out.varLambda += variance(v);
    out.varLambda /= static_cast<double>(d.p);
    out.varSigma2 = variance(sig);
    out.coverageL = static_cast<double>(covL) / (n * static_cast<double>(d.q * d.r));
    out.coverageLambda =
        static_cast<double>(covLam) / (n * static_cast<double>(d.p * d.c));
  }
  const int total = static_cast<int>(recs.size());
  int converged = 0;
  for (const auto& rec : recs) converged += rec.ok ? 1 : 0;
  out.convergence_rate = total > 0 ? static_cast<double>(converged) / total : 0.0;
  out.mean_outer_iterations = converged_or_not > 0 ? iters / converged_or_not : 0.0;
  try {
    out.theory = limiting_variances(
        truth, static_cast<double>(d.p) / static_cast<double>(d.q));
  } catch (const ValidationError&) {
  }
  if (config.keep_replicates) out.replicates = std::move(recs);
  return out;
}

}  // namespace

FitConfig StudyConfig::default_fit_config() {
  FitConfig cfg;
  cfg.compute_scores = false;
  cfg.compute_gradient = false;
  return cfg;
}

void StudyConfig::check() const {
  if (cells.empty()) throw ValidationError("study needs at least one cell");
  if (replicates < 1) throw ValidationError("replicates must be at least 1");
  if (threads < 1) throw ValidationError("threads must be at least 1");
  if (!(sigma2 > 0.0)) throw ValidationError("sigma2 must be positive");
  if (!(ci_level > 0.0 && ci_level < 1.0)) throw ValidationError("ci_level must be in (0, 1)");
  fit_config.check();
  for (const auto& c : cells) {
    const Dims d{c.p, c.q, c.psiF.size(), c.psiE.size()};
    d.check();
    if (!allow_large && (c.p > 500 || c.q > 500)) {
      throw ValidationError("cell " + to_string(d) +
                            " exceeds 500; set allow_large for full-scale runs");
    }
    ModelParams probe{d,
                      MatrixXd::Identity(d.q, d.r) * std::sqrt(static_cast<double>(d.q) * sigma2),
                      MatrixXd::Identity(d.p, d.c) * std::sqrt(static_cast<double>(d.p) * sigma2),
                      c.psiF, c.psiE, sigma2};
    const ValidationReport report = validate(probe);
    if (!report.ok()) {
      throw ValidationError("cell " + to_string(d) + ": " + report.summary());
    }
  }
}

std::uint64_t derive_seed(std::uint64_t base, std::size_t cell, long replicate) {
  return splitmix64(base ^ splitmix64(static_cast<std::uint64_t>(cell) * 0x10001ull +
                                      static_cast<std::uint64_t>(replicate + 1)));
}

StudyResult run_study(const StudyConfig& config) {
  config.check();
  StudyResult out;
  for (std::size_t ci = 0; ci < config.cells.size(); ++ci) {
    const StudyCell& cell = config.cells[ci];
    const Dims d{cell.p, cell.q, cell.psiF.size(), cell.psiE.size()};
    const ModelParams truth = sample_params(d, cell.psiF, cell.psiE, config.sigma2,
                                            derive_seed(config.base_seed, ci, -1));
    std::vector<ReplicateRecord> recs(static_cast<std::size_t>(config.replicates));
    std::atomic<int> next{0};
    auto worker = [&]() {
      for (int i = next++; i < config.replicates; i = next++) {
        recs[static_cast<std::size_t>(i)] = run_replicate(config, truth, ci, i);
      }
    };
    const int nthreads = std::min(config.threads, config.replicates);
    std::vector<std::thread> pool;
    for (int t = 1; t < nthreads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    out.cells.push_back(aggregate(config, cell, truth, std::move(recs)));
  }
  return out;
}

std::string to_string(CltTarget target) {
  switch (target) {
    case CltTarget::kLoadings: return "loadings";
    case CltTarget::kPsiF: return "psiF";
    case CltTarget::kPsiE: return "psiE";
    case CltTarget::kSigma2: return "sigma2";
  }
  return "unknown";
}

CltTarget clt_target_from_string(const std::string& name) {
  for (CltTarget t : {CltTarget::kLoadings, CltTarget::kPsiF, CltTarget::kPsiE,
                      CltTarget::kSigma2}) {
    if (to_string(t) == name) return t;
  }
  throw InputError("unknown CLT target '" + name + "'");
}

CltReport clt_report(const CellResult& cell, CltTarget target) {
  const Dims& d = cell.truth.dims;
  const double p = static_cast<double>(d.p);
  const double q = static_cast<double>(d.q);
  CltReport out;
  out.target = target;
  out.successes = cell.successes;
  out.small_sample = cell.successes < 200;
  for (Index j = 0; j < d.r; ++j) {
    for (Index i = 0; i < d.c; ++i) {
      if (std::abs(cell.truth.psiF(j) / cell.truth.psiE(i) - 1.0) <
          tolerance::kNearDegenerate) {
        out.degenerate = true;
      }
    }
  }
  std::vector<double> samples;
  switch (target) {
    case CltTarget::kLoadings: {
      // Pool the per-entry errors after removing each entry's mean.
      std::vector<double> mean(static_cast<std::size_t>(d.q), 0.0);
      for (const auto& rec : cell.replicates) {
        if (!rec.ok) continue;
        for (Index m = 0; m < d.q; ++m) mean[static_cast<std::size_t>(m)] += rec.L_error(m);
      }
      for (auto& m : mean) m /= std::max(cell.successes, 1);
      for (const auto& rec : cell.replicates) {
        if (!rec.ok) continue;
        for (Index m = 0; m < d.q; ++m) {
          samples.push_back(rec.L_error(m) - mean[static_cast<std::size_t>(m)]);
        }
      }
      out.empirical_variance = cell.varL;
      out.theoretical_variance = cell.theory.sigmaL.size() > 0 ? cell.theory.sigmaL(0) : 0.0;
      break;
    }
    case CltTarget::kPsiF:
      for (const auto& rec : cell.replicates) {
        if (rec.ok) samples.push_back(std::sqrt(p) * (rec.psiF_hat(0) - cell.truth.psiF(0)));
      }
      out.empirical_variance = variance(samples);
      out.theoretical_variance = cell.theory.varPsiF.size() > 0 ? cell.theory.varPsiF(0) : 0.0;
      break;
    case CltTarget::kPsiE:
      for (const auto& rec : cell.replicates) {
        if (rec.ok) samples.push_back(std::sqrt(q) * (rec.psiE_hat(0) - cell.truth.psiE(0)));
      }
      out.empirical_variance = variance(samples);
      out.theoretical_variance = cell.theory.varPsiE.size() > 0 ? cell.theory.varPsiE(0) : 0.0;
      break;
    case CltTarget::kSigma2:
      for (const auto& rec : cell.replicates) {
        if (rec.ok) {
          samples.push_back(std::sqrt(p * q) * (rec.sigma2_corrected - cell.truth.sigma2));
        }
      }
      out.empirical_variance = variance(samples);
      out.theoretical_variance = cell.theory.varSigma2;
      break;
  }
  out.ratio = out.theoretical_variance > 0.0
                  ? out.empirical_variance / out.theoretical_variance
                  : 0.0;
  std::sort(samples.begin(), samples.end());
  out.sorted_samples = samples;
  const std::size_t n = samples.size();
  if (n >= 3) {
    const boost::math::normal normal;
    std::vector<double> z(n);
    for (std::size_t k = 0; k < n; ++k) {
      z[k] = boost::math::quantile(normal, (static_cast<double>(k) + 0.5) /
                                               static_cast<double>(n));
    }
    const Eigen::Map<const VectorXd> a(samples.data(), static_cast<Index>(n));
    const Eigen::Map<const VectorXd> b(z.data(), static_cast<Index>(n));
    const VectorXd ac = a.array() - a.mean();
    const VectorXd bc = b.array() - b.mean();
    const double den = ac.norm() * bc.norm();
    out.qq_correlation = den > 0.0 ? ac.dot(bc) / den : 0.0;
  }
  return out;
}

CltReport clt_check(const StudyConfig& config, CltTarget target) {
  StudyConfig cfg = config;
  cfg.cells.resize(1);
  cfg.keep_replicates = true;
  const StudyResult res = run_study(cfg);
  return clt_report(res.cells.front(), target);
}

std::vector<DeltaRow> delta_sweep(const StudyConfig& config,
                                  const std::vector<double>& delta_grid) {
  if (config.cells.empty()) throw ValidationError("delta_sweep needs a base cell");
  const StudyCell& base = config.cells.front();
  if (base.psiE.size() != 1) throw ValidationError("delta_sweep needs one column factor");
  std::vector<DeltaRow> out;
  for (double delta : delta_grid) {
    DeltaRow row;
    row.delta = delta;
    StudyConfig cfg = config;
    cfg.keep_replicates = false;
    cfg.cells = {StudyCell{base.p, base.q, VectorXd::Constant(1, delta * base.psiE(0)),
                           base.psiE}};
    try {
      const StudyResult res = run_study(cfg);
      row.meanR2_L = res.cells.front().meanR2_L;
      row.meanR2_Lambda = res.cells.front().meanR2_Lambda;
      row.successes = res.cells.front().successes;
    } catch (const ValidationError& e) {
      row.valid = false;
      row.note = e.what();
    }
    out.push_back(row);
  }
  return out;
}

}  // namespace twfm
