#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace fsmfg {

inline constexpr const char* kLibraryVersion = "0.1.0";

/// One experiment invocation. `params` holds the numeric knobs; anything not
/// given falls back to the acceptance defaults.
struct ExperimentConfig {
  std::string model_path;
  std::string name;
  nlohmann::json params = nlohmann::json::object();
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
};

struct RunManifest {
  nlohmann::json config;
  std::string version;
  double wall_clock = 0.0;
  std::vector<std::pair<std::string, std::uint32_t>> outputs;  // file name, CRC-32
  nlohmann::json result;

  nlohmann::json to_json() const;
};

const std::vector<std::string>& experiment_names();

/// Runs the named pipeline, writes its outputs and manifest.json into
/// out_dir, and returns the manifest. Failures surface as fsmfg::Error.
RunManifest run_experiment(const ExperimentConfig& config);

struct SlopeFit {
  double slope = 0.0;
  double r2 = 0.0;
};

/// Least-squares slope of log y against log x.
SlopeFit fit_loglog_slope(std::span<const double> xs, std::span<const double> ys);

/// {module, op, message, context} for an exception escaping run_experiment.
nlohmann::json error_json(const std::exception& e);

/// Writes through a temporary file and a rename.
void write_atomic(const std::string& path, const std::string& content);

std::uint32_t crc32(const std::string& bytes);

}  // namespace fsmfg
