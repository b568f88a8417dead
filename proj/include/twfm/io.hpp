#pragma once

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "twfm/asymptotics.hpp"
#include "twfm/estimator.hpp"
#include "twfm/model.hpp"
#include "twfm/study.hpp"

namespace twfm::io {

inline constexpr int kSchemaVersion = 1;

using nlohmann::json;

/// Shortest decimal string that parses back to the same double.
std::string format_double(double value);

/// Reads a numeric CSV. With `header`, the first line is skipped. Throws
/// InputError naming the 1-based line and column of the first bad cell.
MatrixXd read_csv(const std::filesystem::path& path, bool header = false);
MatrixXd parse_csv(const std::string& text, bool header = false);

void write_csv(const std::filesystem::path& path, const MatrixXd& values,
               const std::vector<std::string>& header = {});
std::string to_csv(const MatrixXd& values,
                   const std::vector<std::string>& header = {});

/// Writes text, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

json matrix_to_json(const MatrixXd& m);
MatrixXd matrix_from_json(const json& j);
json vector_to_json(const VectorXd& v);
VectorXd vector_from_json(const json& j);

json to_json(const Dims& dims);
Dims dims_from_json(const json& j);
json to_json(const ModelParams& params);
/// Accepts either a bare parameter object or one nested under "theta_hat"
/// or "params".
ModelParams params_from_json(const json& j);
json to_json(const FitConfig& config);
json to_json(const FitResult& result);
json to_json(const AsymptoticVariances& v);

/// Study configuration. Keys: cells [{p, q, psiF, psiE}] or grid [[p, q]]
/// with psiF/psiE at the top level, sigma2, replicates, factor_dist
/// {kind: gaussian|chisq, df}, base_seed, oracle_assignment, ci_level,
/// threads, allow_large, fit {err0, eps0, max_outer, max_inner}.
StudyConfig study_config_from_json(const json& j);
json to_json(const StudyConfig& config);

/// Header of the per-cell summary table.
std::vector<std::string> study_table_header();
std::string study_table_csv(const StudyResult& result);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Run manifest: command, config echo, seeds, version, UTC timestamps and
/// digests of input and output files.
class Manifest {
 public:
  explicit Manifest(std::string command);
  void set_config(json config);
  void add_seed(const std::string& name, std::uint64_t seed);
  void add_input(const std::filesystem::path& path);
  void add_output(const std::filesystem::path& path);
  /// Writes manifest.json into `dir`.
  void write(const std::filesystem::path& dir);
  const json& data() const { return data_; }

 private:
  json data_;
};

std::string version();

}  // namespace twfm::io
