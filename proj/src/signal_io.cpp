#include <bit>
#include <charconv>
#include <cstdint>
#include <fstream>

#include "pulseformer/dataset.hpp"

namespace pulseformer {

namespace fs = std::filesystem;

namespace {

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw DataError("failed writing " + path.string());
}

std::vector<double> read_csv_samples(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<double> out;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r,");
    double v = 0.0;
    const char* first = line.data() + b;
    const char* last = line.data() + e + 1;
    if (*first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": not a number: '" + line + "'");
    }
    out.push_back(v);
  }
  return out;
}

std::vector<double> read_f32_samples(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % 4 != 0) throw DataError(path.string() + " size is not a multiple of 4 bytes");
  std::vector<std::uint32_t> raw(bytes / 4);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    std::uint32_t v = raw[i];
    if constexpr (std::endian::native == std::endian::big) {
      v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
    out[i] = static_cast<double>(std::bit_cast<float>(v));
  }
  return out;
}

nlohmann::json sidecar(const SignalRecord& r, SampleFormat format) {
  nlohmann::json j = {{"fs", r.fs},
                      {"modality", to_string(r.modality)},
                      {"subject_id", r.subject_id},
                      {"label", r.label ? nlohmann::json(*r.label) : nlohmann::json(nullptr)},
                      {"format", format == SampleFormat::csv ? "csv" : "f32"},
                      {"samples", r.samples.size()},
                      {"processing", r.processing}};
  if (!r.beats.empty()) j["beats"] = r.beats;
  return j;
}

}  // namespace

SignalRecord read_signal(const fs::path& file) {
  const auto side = fs::path(file).replace_extension(".json");
  const auto meta = read_json(side);
  SignalRecord r;
  try {
    r.fs = meta.at("fs").get<double>();
    r.modality = modality_from_string(meta.value("modality", "ppg"));
    r.subject_id = meta.value("subject_id", file.stem().string());
    if (meta.contains("label") && !meta["label"].is_null()) r.label = meta["label"].get<int>();
    r.processing = meta.value("processing", nlohmann::json::array());
    r.beats = meta.value("beats", std::vector<double>{});
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad sidecar " + side.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError("bad sidecar " + side.string() + ": " + e.what());
  }
  const auto ext = file.extension().string();
  if (ext == ".csv") {
    r.samples = read_csv_samples(file);
  } else if (ext == ".f32" || ext == ".bin") {
    r.samples = read_f32_samples(file);
  } else {
    throw DataError("unsupported signal file extension '" + ext + "' (" + file.string() + ")");
  }
  r.validate();
  return r;
}

fs::path write_signal(const SignalRecord& record, const fs::path& dir, const std::string& stem,
                      SampleFormat format) {
  fs::create_directories(dir);
  const auto file = dir / (stem + (format == SampleFormat::csv ? ".csv" : ".f32"));
  if (format == SampleFormat::csv) {
    std::ofstream out(file, std::ios::trunc);
    char buf[32];
    for (double v : record.samples) {
      const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
      out.write(buf, ptr - buf);
      out.put('\n');
    }
    if (!out) throw DataError("failed writing " + file.string());
  } else {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    for (double v : record.samples) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      if constexpr (std::endian::native == std::endian::big) {
        bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) | (bits >> 24);
      }
      out.write(reinterpret_cast<const char*>(&bits), 4);
    }
    if (!out) throw DataError("failed writing " + file.string());
  }
  write_json(dir / (stem + ".json"), sidecar(record, format));
  return file;
}

void write_dataset_manifest(const fs::path& dir, const std::vector<std::string>& files,
                            const std::vector<SignalRecord>& records) {
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto& r = records.at(i);
    list.push_back({{"file", files[i]},
                    {"subject_id", r.subject_id},
                    {"label", r.label ? nlohmann::json(*r.label) : nlohmann::json(nullptr)}});
  }
  write_json(dir / "dataset.json", {{"records", list}});
}

std::vector<SignalRecord> read_dataset(const fs::path& path) {
  fs::path manifest = path;
  if (fs::is_directory(path)) manifest = path / "dataset.json";
  if (!fs::exists(manifest)) throw DataError("no such dataset: " + manifest.string());
  if (manifest.filename() != "dataset.json" && manifest.extension() != ".json") return {read_signal(manifest)};
  const auto j = read_json(manifest);
  if (!j.contains("records") || !j["records"].is_array()) {
    throw DataError(manifest.string() + " has no \"records\" array");
  }
  std::vector<SignalRecord> out;
  for (const auto& entry : j["records"]) {
    if (!entry.contains("file")) throw DataError(manifest.string() + ": record entry without \"file\"");
    auto r = read_signal(manifest.parent_path() / entry["file"].get<std::string>());
    if (entry.contains("subject_id")) r.subject_id = entry["subject_id"].get<std::string>();
    if (entry.contains("label") && !entry["label"].is_null()) r.label = entry["label"].get<int>();
    r.validate();
    out.push_back(std::move(r));
  }
  if (out.empty()) throw DataError(manifest.string() + " lists no records");
  return out;
}

}  // namespace pulseformer
