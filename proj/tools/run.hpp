#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pulseformer::cli {

/// Bad invocation: missing or unreadable inputs, contradictory flags.
/// Maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& file);

/// Config file contents merged over `defaults`. Top-level sections the
/// command does not use are ignored; unknown keys inside a used section are
/// a UsageError. A run manifest is accepted too: its resolved config is
/// used, so a manifest replays its run.
nlohmann::json merge_config_file(nlohmann::json defaults, const std::filesystem::path& file);

/// Root for run directories: $PULSEFORMER_RUNS, else ./runs.
std::filesystem::path runs_root();

/// One command invocation. Owns the run directory and writes manifest.json
/// on finish: command, argv, resolved config, seed, inputs and outputs with
/// their SHA-256, phase timings and headline results.
class Run {
 public:
  Run(std::string command, nlohmann::json config, std::vector<std::string> argv,
      const std::optional<std::filesystem::path>& out_dir);

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path(const std::string& name) const { return dir_ / name; }
  const nlohmann::json& config() const { return config_; }

  /// Records an input file, or every regular file below a directory. A
  /// checkpoint stem records both halves.
  void input(const std::filesystem::path& path);
  void checkpoint_input(const std::filesystem::path& stem);

  /// Starts a named phase; the previous phase, if any, ends.
  void phase(const std::string& name);
  nlohmann::json& results() { return results_; }

  /// Hashes every file in the run directory and writes manifest.json.
  void finish();

 private:
  using Clock = std::chrono::steady_clock;

  void close_phase();

  std::string command_;
  nlohmann::json config_;
  std::vector<std::string> argv_;
  std::filesystem::path dir_;
  nlohmann::json inputs_ = nlohmann::json::array();
  nlohmann::json timings_ = nlohmann::json::object();
  nlohmann::json results_ = nlohmann::json::object();
  Clock::time_point start_;
  std::string phase_name_;
  Clock::time_point phase_start_;
};

}  // namespace pulseformer::cli
