#include "twfm/io.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace twfm::io {

namespace fs = std::filesystem;

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

double parse_cell(const std::string& cell, std::size_t line, std::size_t col) {
  double v = 0.0;
  const char* b = cell.data();
  const char* e = cell.data() + cell.size();
  if (b != e && *b == '+') ++b;
  const auto res = std::from_chars(b, e, v);
  if (cell.empty() || res.ec != std::errc() || res.ptr != e) {
    throw InputError("line " + std::to_string(line) + ", column " +
                     std::to_string(col) + ": cannot parse '" + cell + "'");
  }
  if (!std::isfinite(v)) {
    throw InputError("line " + std::to_string(line) + ", column " +
                     std::to_string(col) + ": non-finite value");
  }
  return v;
}

}  // namespace

MatrixXd parse_csv(const std::string& text, bool header) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (header && lineno == 1) continue;
    if (trim(line).empty()) continue;
    std::vector<double> row;
    std::size_t start = 0;
    std::size_t col = 1;
    while (true) {
      const std::size_t comma = line.find(',', start);
      const std::string cell =
          trim(std::string_view(line).substr(start, comma == std::string::npos
                                                        ? std::string::npos
                                                        : comma - start));
      row.push_back(parse_cell(cell, lineno, col));
      if (comma == std::string::npos) break;
      start = comma + 1;
      ++col;
    }
    if (rows.empty()) {
      width = row.size();
    } else if (row.size() != width) {
      throw InputError("line " + std::to_string(lineno) + ": expected " +
                       std::to_string(width) + " columns, found " +
                       std::to_string(row.size()));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InputError("CSV has no data rows");
  MatrixXd out(static_cast<Index>(rows.size()), static_cast<Index>(width));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t k = 0; k < width; ++k) {
      out(static_cast<Index>(i), static_cast<Index>(k)) = rows[i][k];
    }
  }
  return out;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

MatrixXd read_csv(const fs::path& path, bool header) {
  try {
    return parse_csv(read_text(path), header);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

std::string to_csv(const MatrixXd& values, const std::vector<std::string>& header) {
  std::string out;
  if (!header.empty()) {
    for (std::size_t k = 0; k < header.size(); ++k) {
      if (k > 0) out += ',';
      out += header[k];
    }
    out += '\n';
  }
  for (Index i = 0; i < values.rows(); ++i) {
    for (Index k = 0; k < values.cols(); ++k) {
      if (k > 0) out += ',';
      out += format_double(values(i, k));
    }
    out += '\n';
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

void write_csv(const fs::path& path, const MatrixXd& values,
               const std::vector<std::string>& header) {
  write_text(path, to_csv(values, header));
}

json matrix_to_json(const MatrixXd& m) {
  json out = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    out.push_back(row);
  }
  return out;
}

MatrixXd matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw InputError("expected a non-empty matrix");
  const auto rows = static_cast<Index>(j.size());
  const auto cols = static_cast<Index>(j.at(0).size());
  MatrixXd out(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const json& row = j.at(static_cast<std::size_t>(i));
    if (!row.is_array() || static_cast<Index>(row.size()) != cols) {
      throw InputError("ragged matrix at row " + std::to_string(i));
    }
    for (Index k = 0; k < cols; ++k) out(i, k) = row.at(static_cast<std::size_t>(k)).get<double>();
  }
  return out;
}

json vector_to_json(const VectorXd& v) {
  json out = json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

VectorXd vector_from_json(const json& j) {
  if (j.is_number()) return VectorXd::Constant(1, j.get<double>());
  if (!j.is_array()) throw InputError("expected a number or an array");
  VectorXd out(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) out(static_cast<Index>(i)) = j[i].get<double>();
  return out;
}

json to_json(const Dims& d) {
  return json{{"p", d.p}, {"q", d.q}, {"r", d.r}, {"c", d.c}};
}

Dims dims_from_json(const json& j) {
  return Dims{j.at("p").get<Index>(), j.at("q").get<Index>(), j.at("r").get<Index>(),
              j.at("c").get<Index>()};
}

json to_json(const ModelParams& p) {
  return json{{"dims", to_json(p.dims)},       {"L", matrix_to_json(p.L)},
              {"Lambda", matrix_to_json(p.Lambda)}, {"psiF", vector_to_json(p.psiF)},
              {"psiE", vector_to_json(p.psiE)},     {"sigma2", p.sigma2}};
}

ModelParams params_from_json(const json& j) {
  try {
    if (j.contains("theta_hat")) return params_from_json(j.at("theta_hat"));
    if (j.contains("params")) return params_from_json(j.at("params"));
    ModelParams out;
    out.L = matrix_from_json(j.at("L"));
    out.Lambda = matrix_from_json(j.at("Lambda"));
    out.psiF = vector_from_json(j.at("psiF"));
    out.psiE = vector_from_json(j.at("psiE"));
    out.sigma2 = j.at("sigma2").get<double>();
    out.dims = j.contains("dims")
                   ? dims_from_json(j.at("dims"))
                   : Dims{out.Lambda.rows(), out.L.rows(), out.L.cols(), out.Lambda.cols()};
    out.check_shapes();
    return out;
  } catch (const json::exception& e) {
    throw InputError(std::string("bad parameter JSON: ") + e.what());
  }
}

json to_json(const FitConfig& c) {
  json init;
  switch (c.init.mode) {
    case InitMode::kSvd: init = "svd"; break;
    case InitMode::kRandom: init = "random:" + std::to_string(c.init.seed); break;
    case InitMode::kProvided: init = "provided"; break;
  }
  return json{{"err0", c.err0},       {"eps0", c.eps0},
              {"max_outer", c.max_outer}, {"max_inner", c.max_inner},
              {"init", init},         {"restarts", c.restarts},
              {"variance_floor", c.variance_floor}};
}

namespace {

double json_number(double v) { return std::isfinite(v) ? v : 0.0; }

}  // namespace

json to_json(const FitResult& r) {
  json inner = json::array();
  for (const auto& it : r.inner_iters) {
    inner.push_back(json{{"update_L", it.update_L},
                         {"update_Lambda", it.update_Lambda},
                         {"em", it.em},
                         {"L_cap_hit", it.L_cap_hit},
                         {"Lambda_cap_hit", it.Lambda_cap_hit},
                         {"em_cap_hit", it.em_cap_hit}});
  }
  json out{{"schema_version", kSchemaVersion},
           {"theta_hat", to_json(r.theta_hat)},
           {"loglik", r.loglik()},
           {"loglik_trace", r.loglik_trace},
           {"inner_iters", inner},
           {"ic1_trace", r.ic1_trace},
           {"converged", r.converged},
           {"stop_reason", to_string(r.stop_reason)},
           {"warnings", r.warnings},
           {"restart_logliks", json::array()},
           {"selected_start", r.selected_start},
           {"tied_starts", r.tied_starts},
           {"floor_activations", r.floor_activations}};
  for (double ll : r.restart_logliks) {
    out["restart_logliks"].push_back(std::isfinite(ll) ? json(ll) : json(nullptr));
  }
  out["gradient_norm"] = std::isfinite(r.gradient_norm) ? json(r.gradient_norm) : json(nullptr);
  if (r.scores.F.size() > 0) {
    out["scores"] = json{{"F", matrix_to_json(r.scores.F)}, {"E", matrix_to_json(r.scores.E)}};
  }
  return out;
}

json to_json(const AsymptoticVariances& v) {
  return json{{"sigmaL", vector_to_json(v.sigmaL)},
              {"sigmaLambda", vector_to_json(v.sigmaLambda)},
              {"varPsiF", vector_to_json(v.varPsiF)},
              {"varPsiE", vector_to_json(v.varPsiE)},
              {"varSigma2", json_number(v.varSigma2)},
              {"y", v.y}};
}

StudyConfig study_config_from_json(const json& j) {
  try {
    StudyConfig c;
    c.sigma2 = j.value("sigma2", c.sigma2);
    c.replicates = j.value("replicates", c.replicates);
    c.base_seed = j.value("base_seed", c.base_seed);
    c.oracle_assignment = j.value("oracle_assignment", c.oracle_assignment);
    c.ci_level = j.value("ci_level", c.ci_level);
    c.threads = j.value("threads", c.threads);
    c.allow_large = j.value("allow_large", c.allow_large);
    c.keep_replicates = j.value("keep_replicates", c.keep_replicates);
    if (j.contains("factor_dist")) {
      const json& fd = j.at("factor_dist");
      const std::string kind = fd.value("kind", std::string("gaussian"));
      if (kind == "gaussian") {
        c.factor_dist.kind = FactorKind::kGaussian;
      } else if (kind == "chisq") {
        c.factor_dist.kind = FactorKind::kCenteredChiSquare;
      } else {
        throw InputError("factor_dist.kind must be gaussian or chisq");
      }
      c.factor_dist.df = fd.value("df", c.factor_dist.df);
    }
    if (j.contains("fit")) {
      const json& f = j.at("fit");
      c.fit_config.err0 = f.value("err0", c.fit_config.err0);
      c.fit_config.eps0 = f.value("eps0", c.fit_config.eps0);
      c.fit_config.max_outer = f.value("max_outer", c.fit_config.max_outer);
      c.fit_config.max_inner = f.value("max_inner", c.fit_config.max_inner);
    }
    if (j.contains("cells")) {
      for (const json& cell : j.at("cells")) {
        c.cells.push_back(StudyCell{cell.at("p").get<Index>(), cell.at("q").get<Index>(),
                                    vector_from_json(cell.at("psiF")),
                                    vector_from_json(cell.at("psiE"))});
      }
    }
    if (j.contains("grid")) {
      const VectorXd psiF = vector_from_json(j.at("psiF"));
      const VectorXd psiE = vector_from_json(j.at("psiE"));
      for (const json& pq : j.at("grid")) {
        c.cells.push_back(StudyCell{pq.at(0).get<Index>(), pq.at(1).get<Index>(), psiF, psiE});
      }
    }
    return c;
  } catch (const json::exception& e) {
    throw InputError(std::string("bad study configuration: ") + e.what());
  }
}

json to_json(const StudyConfig& c) {
  json cells = json::array();
  for (const auto& cell : c.cells) {
    cells.push_back(json{{"p", cell.p}, {"q", cell.q},
                         {"psiF", vector_to_json(cell.psiF)},
                         {"psiE", vector_to_json(cell.psiE)}});
  }
  return json{{"cells", cells},
              {"sigma2", c.sigma2},
              {"replicates", c.replicates},
              {"factor_dist",
               {{"kind", c.factor_dist.kind == FactorKind::kGaussian ? "gaussian" : "chisq"},
                {"df", c.factor_dist.df}}},
              {"base_seed", c.base_seed},
              {"oracle_assignment", c.oracle_assignment},
              {"ci_level", c.ci_level},
              {"threads", c.threads},
              {"allow_large", c.allow_large},
              {"fit",
               {{"err0", c.fit_config.err0},
                {"eps0", c.fit_config.eps0},
                {"max_outer", c.fit_config.max_outer},
                {"max_inner", c.fit_config.max_inner}}}};
}

std::vector<std::string> study_table_header() {
  return {"p",         "q",          "r",          "c",           "successes",
          "failures",  "meanR2_L",   "meanR2_Lambda", "maePsiF",   "msePsiF",
          "maePsiE",   "msePsiE",    "maeSigma2",  "mseSigma2",   "varL",
          "theoryL",   "varLambda",  "theoryLambda", "varSigma2", "theorySigma2",
          "coverageL", "coverageLambda", "convergence_rate", "mean_outer_iterations"};
}

std::string study_table_csv(const StudyResult& result) {
  std::ostringstream os;
  const auto header = study_table_header();
  for (std::size_t k = 0; k < header.size(); ++k) os << (k ? "," : "") << header[k];
  os << '\n';
  for (const auto& c : result.cells) {
    const auto& d = c.truth.dims;
    const double theoryL = c.theory.sigmaL.size() ? c.theory.sigmaL(0) : 0.0;
    const double theoryLam = c.theory.sigmaLambda.size() ? c.theory.sigmaLambda(0) : 0.0;
    const std::vector<double> vals{c.meanR2_L,  c.meanR2_Lambda, c.maePsiF,   c.msePsiF,
                                   c.maePsiE,   c.msePsiE,       c.maeSigma2, c.mseSigma2,
                                   c.varL,      theoryL,         c.varLambda, theoryLam,
                                   c.varSigma2, c.theory.varSigma2, c.coverageL,
                                   c.coverageLambda, c.convergence_rate,
                                   c.mean_outer_iterations};
    os << d.p << ',' << d.q << ',' << d.r << ',' << d.c << ',' << c.successes << ','
       << c.failures;
    for (double v : vals) os << ',' << format_double(v);
    os << '\n';
  }
  return os.str();
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw NumericalError("SHA-256 failed");
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string version() { return TWFM_VERSION; }

Manifest::Manifest(std::string command) {
  data_ = json{{"schema_version", kSchemaVersion},
               {"command", std::move(command)},
               {"version", version()},
               {"started_at", utc_now()},
               {"config", json::object()},
               {"seeds", json::object()},
               {"inputs", json::array()},
               {"outputs", json::array()}};
}

void Manifest::set_config(json config) { data_["config"] = std::move(config); }

void Manifest::add_seed(const std::string& name, std::uint64_t seed) {
  data_["seeds"][name] = seed;
}

void Manifest::add_input(const fs::path& path) {
  data_["inputs"].push_back(json{{"path", path.string()}, {"sha256", sha256_file(path)}});
}

void Manifest::add_output(const fs::path& path) {
  data_["outputs"].push_back(
      json{{"path", path.filename().string()}, {"sha256", sha256_file(path)}});
}

void Manifest::write(const fs::path& dir) {
  data_["finished_at"] = utc_now();
  write_text(dir / "manifest.json", data_.dump(2) + "\n");
}

}  // namespace twfm::io
