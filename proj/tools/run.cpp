#include "run.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

namespace pulseformer::cli {

namespace fs = std::filesystem;

std::string sha256_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw UsageError("cannot read '" + file.string() + "'");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("SHA-256 unavailable");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

namespace {

// Objects merge key by key; anything else replaces. Sections the command
// does not use are skipped so one file can serve several commands, but an
// unknown key inside a known section is a typo and rejected.
void merge_into(nlohmann::json& base, const nlohmann::json& patch, const std::string& where) {
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where + "/" + key;
    if (!base.contains(key)) {
      if (where.empty()) continue;
      throw UsageError("unknown config key '" + path + "'");
    }
    auto& slot = base[key];
    if (slot.is_object() && value.is_object()) {
      merge_into(slot, value, path);
    } else {
      slot = value;
    }
  }
}

}  // namespace

nlohmann::json merge_config_file(nlohmann::json defaults, const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw UsageError("cannot read config '" + file.string() + "'");
  nlohmann::json patch;
  try {
    patch = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("malformed config '" + file.string() + "': " + e.what());
  }
  if (!patch.is_object()) throw UsageError("config '" + file.string() + "' is not a JSON object");
  if (patch.contains("command") && patch.contains("config")) patch = patch["config"];
  merge_into(defaults, patch, "");
  return defaults;
}

fs::path runs_root() {
  const char* env = std::getenv("PULSEFORMER_RUNS");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("runs");
}

namespace {

fs::path fresh_run_dir(const std::string& command) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const fs::path base = runs_root() / (command + "-" + stamp);
  fs::path dir = base;
  for (int k = 2; fs::exists(dir); ++k) dir = base.string() + "-" + std::to_string(k);
  return dir;
}

}  // namespace

Run::Run(std::string command, nlohmann::json config, std::vector<std::string> argv,
         const std::optional<fs::path>& out_dir)
    : command_(std::move(command)), config_(std::move(config)), argv_(std::move(argv)),
      dir_(out_dir ? *out_dir : fresh_run_dir(command_)), start_(Clock::now()) {
  fs::create_directories(dir_);
  std::ofstream(dir_ / "config.json") << config_.dump(2) << '\n';
}

void Run::input(const fs::path& path) {
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(path))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) input(f);
    return;
  }
  inputs_.push_back({{"path", fs::absolute(path).lexically_normal().string()}, {"sha256", sha256_file(path)}});
}

void Run::checkpoint_input(const fs::path& stem) {
  input(stem.string() + ".json");
  input(stem.string() + ".bin");
}

void Run::close_phase() {
  if (phase_name_.empty()) return;
  timings_[phase_name_] = std::chrono::duration<double>(Clock::now() - phase_start_).count();
  phase_name_.clear();
}

void Run::phase(const std::string& name) {
  close_phase();
  phase_name_ = name;
  phase_start_ = Clock::now();
}

void Run::finish() {
  close_phase();
  timings_["total"] = std::chrono::duration<double>(Clock::now() - start_).count();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir_))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  nlohmann::json outputs = nlohmann::json::array();
  for (const auto& f : files) {
    outputs.push_back({{"path", fs::relative(f, dir_).generic_string()},
                       {"bytes", fs::file_size(f)},
                       {"sha256", sha256_file(f)}});
  }
  nlohmann::json seed = config_.contains("seed") ? config_["seed"] : nlohmann::json(nullptr);
  const nlohmann::json manifest = {{"command", command_}, {"argv", argv_},         {"config", config_},
                                   {"seed", seed},         {"inputs", inputs_},     {"outputs", outputs},
                                   {"timings_s", timings_}, {"results", results_}};
  std::ofstream(dir_ / "manifest.json") << manifest.dump(2) << '\n';
}

}  // namespace pulseformer::cli
