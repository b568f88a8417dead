// twfm: simulate, fit, study, asymp, curve and loglik.
//
// Every command writes its outputs and a manifest.json into --out-dir.
// Exit codes: 0 success, 1 input or structural error, 2 iteration cap hit.

#include <CLI11.hpp>
#include <boost/math/distributions/normal.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "twfm/asymptotics.hpp"
#include "twfm/estimator.hpp"
#include "twfm/io.hpp"
#include "twfm/sampler.hpp"
#include "twfm/spectral.hpp"
#include "twfm/study.hpp"

namespace fs = std::filesystem;
using namespace twfm;
using io::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitCap = 2;

struct Globals {
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string out_dir = ".";
  bool quiet = false;
};

void say(const Globals& g, const std::string& line) {
  if (!g.quiet) std::cout << line << "\n";
}

fs::path out_path(const Globals& g, const std::string& name) {
  return fs::path(g.out_dir) / name;
}

VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size()));
}

void write_json(const fs::path& path, const json& j) { io::write_text(path, j.dump(2) + "\n"); }

// simulate ----------------------------------------------------------------

struct SimulateArgs {
  Index p = 0, q = 0, r = 1, c = 1;
  std::vector<double> psiF, psiE;
  double sigma2 = 0.01;
  std::string dist = "gaussian";
  int df = 1;
  bool bundle = false;
};

int run_simulate(const Globals& g, const SimulateArgs& a) {
  const std::uint64_t seed = g.seed.value_or(1);
  const Dims dims{a.p, a.q, a.r, a.c};
  FactorDistribution dist;
  if (a.dist == "chisq") {
    dist = {FactorKind::kCenteredChiSquare, a.df};
  } else if (a.dist != "gaussian") {
    throw InputError("--dist must be gaussian or chisq");
  }
  const ModelParams params = sample_params(dims, to_vector(a.psiF), to_vector(a.psiE), a.sigma2, seed);
  const SampleBundle b = sample(params, dist, seed);

  io::Manifest manifest("simulate");
  manifest.set_config(json{{"p", a.p}, {"q", a.q}, {"r", a.r}, {"c", a.c}, {"psiF", a.psiF},
                           {"psiE", a.psiE}, {"sigma2", a.sigma2}, {"dist", a.dist},
                           {"df", a.df}, {"bundle", a.bundle}, {"out_dir", g.out_dir}});
  manifest.add_seed("seed", seed);
  const fs::path x_path = out_path(g, "X.csv");
  io::write_csv(x_path, b.X.values);
  manifest.add_output(x_path);
  if (a.bundle) {
    const fs::path bundle_path = out_path(g, "bundle.json");
    write_json(bundle_path, json{{"schema_version", io::kSchemaVersion},
                                 {"seed", seed},
                                 {"params", io::to_json(params)},
                                 {"F", io::matrix_to_json(b.scores.F)},
                                 {"E", io::matrix_to_json(b.scores.E)},
                                 {"noise", io::matrix_to_json(b.noise)}});
    manifest.add_output(bundle_path);
  }
  manifest.write(g.out_dir);
  say(g, "wrote " + x_path.string() + " (" + std::to_string(a.p) + "x" + std::to_string(a.q) + ")");
  return kExitOk;
}

// fit ---------------------------------------------------------------------

struct FitArgs {
  std::string input;
  bool header = false;
  Index r = 1, c = 1;
  bool center = false;
  double err0 = 0.01;
  double eps0 = 0.005;
  int max_outer = 500;
  std::string init = "svd";
  int restarts = 0;
  std::string out = "fit.json";
  std::string scores_out;
};

InitSpec parse_init(const std::string& text) {
  InitSpec spec;
  if (text == "svd") {
    spec.mode = InitMode::kSvd;
    return spec;
  }
  const std::string prefix = "random:";
  if (text.rfind(prefix, 0) == 0) {
    spec.mode = InitMode::kRandom;
    try {
      spec.seed = std::stoull(text.substr(prefix.size()));
    } catch (const std::exception&) {
      throw InputError("--init random:<seed> needs an unsigned integer seed");
    }
    return spec;
  }
  throw InputError("--init must be svd or random:<seed>");
}

int run_fit(const Globals& g, const FitArgs& a) {
  DataMatrix X;
  X.values = io::read_csv(a.input, a.header);
  X.check_finite();
  if (a.center) X = X.centered_by_columns();
  const Dims dims{X.rows(), X.cols(), a.r, a.c};

  FitConfig cfg;
  cfg.err0 = a.err0;
  cfg.eps0 = a.eps0;
  cfg.max_outer = a.max_outer;
  cfg.restarts = a.restarts;
  cfg.init = parse_init(a.init);
  if (g.seed && cfg.init.mode == InitMode::kSvd) cfg.init.seed = *g.seed;
  cfg.check();

  const FitResult res = fit(X, dims, cfg);

  io::Manifest manifest("fit");
  json echo = io::to_json(cfg);
  echo["input"] = a.input;
  echo["header"] = a.header;
  echo["center"] = a.center;
  echo["r"] = a.r;
  echo["c"] = a.c;
  echo["out_dir"] = g.out_dir;
  manifest.set_config(echo);
  manifest.add_seed("init_seed", cfg.init.seed);
  manifest.add_input(a.input);

  json doc = io::to_json(res);
  doc["schema_version"] = io::kSchemaVersion;
  doc["input_centered"] = a.center;
  doc["max_abs_column_mean"] =
      X.values.colwise().mean().cwiseAbs().maxCoeff();
  const fs::path fit_path = out_path(g, a.out);
  write_json(fit_path, doc);
  manifest.add_output(fit_path);
  if (!a.scores_out.empty()) {
    const Index r = res.scores.F.cols();
    const Index c = res.scores.E.cols();
    // F rows first (one per data row), then E rows (one per data column).
    MatrixXd table = MatrixXd::Constant(res.scores.F.rows() + res.scores.E.rows(), r + c,
                                        std::numeric_limits<double>::quiet_NaN());
    table.topLeftCorner(res.scores.F.rows(), r) = res.scores.F;
    table.bottomRightCorner(res.scores.E.rows(), c) = res.scores.E;
    std::vector<std::string> header;
    for (Index j = 0; j < r; ++j) header.push_back("F" + std::to_string(j + 1));
    for (Index i = 0; i < c; ++i) header.push_back("E" + std::to_string(i + 1));
    const fs::path scores_path = out_path(g, a.scores_out);
    io::write_csv(scores_path, table, header);
    manifest.add_output(scores_path);
  }
  manifest.write(g.out_dir);
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
  say(g, "loglik " + io::format_double(res.loglik()) + ", " +
             std::to_string(res.loglik_trace.size() - 1) + " outer iterations, " +
             to_string(res.stop_reason));
  return res.converged ? kExitOk : kExitCap;
}

// study -------------------------------------------------------------------

int run_study_cmd(const Globals& g, const std::string& config_path, bool threads_set) {
  const json raw = json::parse(io::read_text(config_path));
  StudyConfig cfg = io::study_config_from_json(raw);
  if (g.seed) cfg.base_seed = *g.seed;
  if (threads_set) cfg.threads = g.threads;
  cfg.check();
  if (cfg.allow_large) {
    std::cerr << "warning: cells above 500 allowed; expect long runtimes\n";
  }

  io::Manifest manifest("study");
  json echo = io::to_json(cfg);
  if (raw.contains("delta_grid")) echo["delta_grid"] = raw["delta_grid"];
  echo["out_dir"] = g.out_dir;
  manifest.set_config(echo);
  manifest.add_seed("base_seed", cfg.base_seed);
  manifest.add_input(config_path);

  const StudyResult result = run_study(cfg);
  const fs::path table_path = out_path(g, "table.csv");
  io::write_text(table_path, io::study_table_csv(result));
  manifest.add_output(table_path);

  if (cfg.keep_replicates) {
    std::string rows = "cell,replicate,seed,ok,failure,r2_L,r2_Lambda,psiF_hat,psiE_hat,sigma2_hat\n";
    for (std::size_t k = 0; k < result.cells.size(); ++k) {
      for (const auto& rep : result.cells[k].replicates) {
        auto first = [](const VectorXd& v) {
          return v.size() > 0 ? io::format_double(v(0)) : std::string();
        };
        rows += std::to_string(k) + "," + std::to_string(rep.index) + "," +
                std::to_string(rep.seed) + "," + (rep.ok ? "1" : "0") + "," + rep.failure +
                "," + (rep.ok ? io::format_double(rep.r2_L.mean()) : "") + "," +
                (rep.ok ? io::format_double(rep.r2_Lambda.mean()) : "") + "," +
                first(rep.psiF_hat) + "," + first(rep.psiE_hat) + "," +
                (rep.ok ? io::format_double(rep.sigma2_hat) : "") + "\n";
      }
    }
    const fs::path rep_path = out_path(g, "replicates.csv");
    io::write_text(rep_path, rows);
    manifest.add_output(rep_path);

    for (std::size_t k = 0; k < result.cells.size(); ++k) {
      for (CltTarget t : {CltTarget::kLoadings, CltTarget::kPsiF, CltTarget::kPsiE,
                          CltTarget::kSigma2}) {
        const CltReport rep = clt_report(result.cells[k], t);
        const std::size_t n = rep.sorted_samples.size();
        if (n == 0) continue;
        boost::math::normal normal;
        std::string qq = "rank,sample,normal_quantile\n";
        for (std::size_t i = 0; i < n; ++i) {
          const double z = boost::math::quantile(
              normal, (static_cast<double>(i) + 0.5) / static_cast<double>(n));
          qq += std::to_string(i + 1) + "," + io::format_double(rep.sorted_samples[i]) + "," +
                io::format_double(z) + "\n";
        }
        const fs::path qq_path =
            out_path(g, "qq_cell" + std::to_string(k) + "_" + to_string(t) + ".csv");
        io::write_text(qq_path, qq);
        manifest.add_output(qq_path);
      }
    }
  }

  if (raw.contains("delta_grid")) {
    std::vector<double> grid;
    if (raw["delta_grid"].is_string()) {
      grid = parse_grid(raw["delta_grid"].get<std::string>());
    } else {
      grid = raw["delta_grid"].get<std::vector<double>>();
    }
    std::string rows = "delta,valid,successes,meanR2_L,meanR2_Lambda,note\n";
    for (const auto& row : delta_sweep(cfg, grid)) {
      rows += io::format_double(row.delta) + "," + (row.valid ? "1" : "0") + "," +
              std::to_string(row.successes) + "," +
              (row.valid ? io::format_double(row.meanR2_L) : "") + "," +
              (row.valid ? io::format_double(row.meanR2_Lambda) : "") + "," + row.note + "\n";
    }
    const fs::path sweep_path = out_path(g, "delta_sweep.csv");
    io::write_text(sweep_path, rows);
    manifest.add_output(sweep_path);
  }
  manifest.write(g.out_dir);

  for (const auto& cell : result.cells) {
    say(g, "p=" + std::to_string(cell.cell.p) + " q=" + std::to_string(cell.cell.q) +
               ": R2(L) " + io::format_double(cell.meanR2_L) + ", R2(Lambda) " +
               io::format_double(cell.meanR2_Lambda) + ", " + std::to_string(cell.successes) +
               " ok, " + std::to_string(cell.failures) + " failed");
    if (cell.failures > 0) {
      std::cerr << "warning: " << cell.failures
                << " replicates hit the iteration cap and were excluded\n";
    }
  }
  return kExitOk;
}

// asymp -------------------------------------------------------------------

int run_asymp(const Globals& g, const std::string& fit_path, double level) {
  const json doc = json::parse(io::read_text(fit_path));
  const ModelParams theta = io::params_from_json(doc);
  const double y = static_cast<double>(theta.dims.p) / static_cast<double>(theta.dims.q);
  const AsymptoticVariances v = limiting_variances(theta, y);
  const LoadingIntervals ci = loading_ci(theta, level);

  io::Manifest manifest("asymp");
  manifest.set_config(json{{"fit", fit_path}, {"level", level}, {"out_dir", g.out_dir}});
  manifest.add_input(fit_path);

  std::string table = "quantity,index,variance,scaling\n";
  auto add = [&](const char* name, const VectorXd& values, const char* scaling) {
    for (Index k = 0; k < values.size(); ++k) {
      table += std::string(name) + "," + std::to_string(k + 1) + "," +
               io::format_double(values(k)) + "," + scaling + "\n";
    }
  };
  add("L", v.sigmaL, "sqrt(p)");
  add("Lambda", v.sigmaLambda, "sqrt(q)");
  add("psiF", v.varPsiF, "sqrt(p)");
  add("psiE", v.varPsiE, "sqrt(q)");
  table += "sigma2,1," + io::format_double(v.varSigma2) + ",sqrt(pq)\n";
  const fs::path var_path = out_path(g, "variances.csv");
  io::write_text(var_path, table);
  manifest.add_output(var_path);

  std::string rows = "loading,row,column,estimate,lower,upper,reliable\n";
  auto emit = [&](const char* name, const MatrixXd& est, const MatrixXd& lo, const MatrixXd& hi,
                  const std::vector<bool>& reliable) {
    for (Index j = 0; j < est.cols(); ++j) {
      for (Index m = 0; m < est.rows(); ++m) {
        rows += std::string(name) + "," + std::to_string(m + 1) + "," + std::to_string(j + 1) +
                "," + io::format_double(est(m, j)) + "," + io::format_double(lo(m, j)) + "," +
                io::format_double(hi(m, j)) + "," +
                (reliable[static_cast<std::size_t>(j)] ? "1" : "0") + "\n";
      }
    }
  };
  emit("L", theta.L, ci.L_lower, ci.L_upper, ci.L_reliable);
  emit("Lambda", theta.Lambda, ci.Lambda_lower, ci.Lambda_upper, ci.Lambda_reliable);
  const fs::path ci_path = out_path(g, "ci.csv");
  io::write_text(ci_path, rows);
  manifest.add_output(ci_path);
  manifest.write(g.out_dir);
  for (bool ok : ci.L_reliable) {
    if (!ok) std::cerr << "warning: some row/column variance ratio is near 1; intervals are wide\n";
  }
  say(g, "wrote " + var_path.string() + " and " + ci_path.string());
  return kExitOk;
}

// curve -------------------------------------------------------------------

int run_curve(const Globals& g, double sigma2, double psiF, double y, const std::string& grid) {
  const auto points = variance_curve(sigma2, psiF, y, parse_grid(grid));
  std::string rows = "delta,variance,valid\n";
  for (const auto& pt : points) {
    rows += io::format_double(pt.delta) + "," + (pt.valid ? io::format_double(pt.value) : "") +
            "," + (pt.valid ? "1" : "0") + "\n";
  }
  io::Manifest manifest("curve");
  manifest.set_config(json{{"sigma2", sigma2}, {"psiF", psiF}, {"y", y}, {"grid", grid},
                           {"out_dir", g.out_dir}});
  const fs::path path = out_path(g, "curve.csv");
  io::write_text(path, rows);
  manifest.add_output(path);
  manifest.write(g.out_dir);
  say(g, "wrote " + path.string() + " (" + std::to_string(points.size()) + " points)");
  return kExitOk;
}

// loglik ------------------------------------------------------------------

int run_loglik(const Globals& g, const std::string& params_path, const std::string& input,
               bool header) {
  const ModelParams params = io::params_from_json(json::parse(io::read_text(params_path)));
  DataMatrix X;
  X.values = io::read_csv(input, header);
  X.check_finite();
  const LikelihoodEvaluation ev = evaluate_log_likelihood(params, X.values);

  io::Manifest manifest("loglik");
  manifest.set_config(json{{"params", params_path}, {"input", input}, {"header", header},
                           {"out_dir", g.out_dir}});
  manifest.add_input(params_path);
  manifest.add_input(input);
  const fs::path path = out_path(g, "loglik.json");
  write_json(path, json{{"schema_version", io::kSchemaVersion},
                        {"loglik", ev.value},
                        {"ic1_residual", ev.ic1_residual},
                        {"constraint_ok", ev.constraint_ok}});
  manifest.add_output(path);
  manifest.write(g.out_dir);
  if (!ev.constraint_ok) {
    std::cerr << "warning: loadings violate the orthonormality constraint by "
              << ev.ic1_residual << "; the closed form does not apply\n";
  }
  if (!g.quiet) std::cout << io::format_double(ev.value) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-way factor model: simulation, estimation and inference"};
  app.set_version_flag("--version", io::version());
  app.require_subcommand(1);
  // Global flags are accepted before or after the subcommand.
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Random seed");
  auto* threads_opt = app.add_option("--threads", g.threads, "Worker threads for studies")
                          ->check(CLI::PositiveNumber);
  app.add_option("--out-dir", g.out_dir, "Directory for outputs and manifest.json");
  app.add_flag("--quiet", g.quiet, "Suppress progress output");

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Draw a data matrix from the model");
  simulate->add_option("--p", sim.p, "Rows")->required();
  simulate->add_option("--q", sim.q, "Columns")->required();
  simulate->add_option("--r", sim.r, "Row factors");
  simulate->add_option("--c", sim.c, "Column factors");
  simulate->add_option("--psiF", sim.psiF, "Row factor variances")->required()->delimiter(',');
  simulate->add_option("--psiE", sim.psiE, "Column factor variances")->required()->delimiter(',');
  simulate->add_option("--sigma2", sim.sigma2, "Noise variance");
  simulate->add_option("--dist", sim.dist, "Factor distribution: gaussian or chisq");
  simulate->add_option("--df", sim.df, "Chi-square degrees of freedom");
  simulate->add_flag("--bundle", sim.bundle, "Also write F, E, noise and params");

  FitArgs fa;
  auto* fitc = app.add_subcommand("fit", "Maximum likelihood fit of a CSV matrix");
  fitc->add_option("--input", fa.input, "CSV data matrix")->required();
  fitc->add_flag("--header", fa.header, "Skip the first line of the CSV");
  fitc->add_option("--r", fa.r, "Row factors")->required();
  fitc->add_option("--c", fa.c, "Column factors")->required();
  fitc->add_flag("--center", fa.center, "Center every column before fitting");
  fitc->add_option("--err0", fa.err0, "Outer tolerance on the log-likelihood");
  fitc->add_option("--eps0", fa.eps0, "Loading update tolerance");
  fitc->add_option("--max-outer", fa.max_outer, "Outer iteration cap");
  fitc->add_option("--init", fa.init, "svd or random:<seed>");
  fitc->add_option("--restarts", fa.restarts, "Extra random restarts");
  fitc->add_option("--out", fa.out, "FitResult JSON file name");
  fitc->add_option("--scores-out", fa.scores_out, "CSV for the posterior factor scores");

  std::string study_config;
  auto* study = app.add_subcommand("study", "Monte Carlo study from a JSON configuration");
  study->add_option("--config", study_config, "StudyConfig JSON")->required();

  std::string asymp_fit;
  double level = 0.95;
  auto* asymp = app.add_subcommand("asymp", "Limiting variances and loading intervals");
  asymp->add_option("--fit", asymp_fit, "FitResult or params JSON")->required();
  asymp->add_option("--level", level, "Confidence level")->check(CLI::Range(0.0, 1.0));

  double c_sigma2 = 1.0, c_psiF = 1.0, c_y = 1.0;
  std::string c_grid = "0:50:0.1";
  auto* curve = app.add_subcommand("curve", "Loading variance as a function of the variance ratio");
  curve->add_option("--sigma2", c_sigma2, "Noise variance");
  curve->add_option("--psiF", c_psiF, "Row factor variance");
  curve->add_option("--y", c_y, "Limit of p/q");
  curve->add_option("--grid", c_grid, "start:stop:step or comma list");

  std::string ll_params, ll_input;
  bool ll_header = false;
  auto* loglik = app.add_subcommand("loglik", "Closed-form log-likelihood of a CSV matrix");
  loglik->add_option("--params", ll_params, "Parameter JSON")->required();
  loglik->add_option("--input", ll_input, "CSV data matrix")->required();
  loglik->add_flag("--header", ll_header, "Skip the first line of the CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitError;
  }

  try {
    fs::create_directories(g.out_dir);
    if (simulate->parsed()) return run_simulate(g, sim);
    if (fitc->parsed()) return run_fit(g, fa);
    if (study->parsed()) return run_study_cmd(g, study_config, threads_opt->count() > 0);
    if (asymp->parsed()) return run_asymp(g, asymp_fit, level);
    if (curve->parsed()) return run_curve(g, c_sigma2, c_psiF, c_y, c_grid);
    if (loglik->parsed()) return run_loglik(g, ll_params, ll_input, ll_header);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
