#include "pulseformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace pulseformer {

namespace {

constexpr const char* kFormat = "pulseformer-checkpoint-v1";

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

}  // namespace

std::filesystem::path with_suffix(const std::filesystem::path& stem, const std::string& suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

template <typename Scalar>
void save_checkpoint(const ParamStore<Scalar>& params, const std::filesystem::path& stem,
                     const CheckpointMeta& meta) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<std::uint32_t> blob;
  blob.reserve(static_cast<std::size_t>(params.count()));
  for (const auto& t : params.tensors()) {
    const auto& v = t.node.value();
    std::vector<Index> extents;
    for (int i = 0; i < v.shape().rank(); ++i) extents.push_back(v.shape()[i]);
    tensors.push_back({{"name", t.name}, {"shape", extents}, {"offset", blob.size()}});
    for (Index i = 0; i < v.size(); ++i) {
      blob.push_back(to_le(std::bit_cast<std::uint32_t>(static_cast<float>(v[i]))));
    }
  }
  nlohmann::json manifest = {
      {"format", kFormat},
      {"config", params.config()},
      {"head", to_string(params.head())},
      {"rng", {{"algorithm", Rng::kAlgorithm}, {"seed", meta.seed}}},
      {"step", meta.step},
      {"dtype", "float32-le"},
      {"tensors", tensors},
      {"trainable", params.trainable()},
      {"extra", meta.extra},
  };
  std::ofstream bin(with_suffix(stem, ".bin"), std::ios::binary | std::ios::trunc);
  bin.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(std::uint32_t)));
  std::ofstream js(with_suffix(stem, ".json"), std::ios::trunc);
  js << manifest.dump(2) << '\n';
  if (!bin || !js) throw DataError("failed writing checkpoint " + stem.string());
}

template <typename Scalar>
ParamStore<Scalar> load_checkpoint(const std::filesystem::path& stem, CheckpointMeta* meta) {
  const auto json_path = with_suffix(stem, ".json");
  const auto bin_path = with_suffix(stem, ".bin");
  std::ifstream js(json_path);
  if (!js) throw DataError("cannot open checkpoint manifest " + json_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest " + json_path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kFormat) {
    throw DataError(json_path.string() + " is not a " + std::string(kFormat) + " manifest");
  }
  std::ifstream bin(bin_path, std::ios::binary | std::ios::ate);
  if (!bin) throw DataError("cannot open checkpoint blob " + bin_path.string());
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  std::vector<std::uint32_t> blob(bytes / sizeof(std::uint32_t));
  bin.seekg(0);
  bin.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));

  try {
    const auto config = manifest.at("config").get<ModelConfig>();
    ParamStore<Scalar> params(config, head_from_string(manifest.at("head").get<std::string>()));
    std::size_t expected = 0;
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      if (!params.contains(name)) throw DataError("checkpoint tensor '" + name + "' not in model");
      auto& node = params.at(name);
      const auto extents = entry.at("shape").get<std::vector<Index>>();
      Shape shape;
      if (extents.size() == 1) shape = Shape{extents[0]};
      else if (extents.size() == 2) shape = Shape{extents[0], extents[1]};
      else throw DataError("checkpoint tensor '" + name + "' has unsupported rank");
      if (shape != node.shape()) {
        throw DataError("checkpoint tensor '" + name + "' has shape " + shape.str() + ", model expects " +
                        node.shape().str());
      }
      const auto offset = entry.at("offset").get<std::size_t>();
      if (offset + static_cast<std::size_t>(shape.size()) > blob.size()) {
        throw DataError("checkpoint blob too short for tensor '" + name + "'");
      }
      auto& v = node.mutable_value();
      for (Index i = 0; i < v.size(); ++i) {
        v[i] = static_cast<Scalar>(std::bit_cast<float>(to_le(blob[offset + static_cast<std::size_t>(i)])));
      }
      expected += static_cast<std::size_t>(shape.size());
    }
    if (expected != static_cast<std::size_t>(params.count()) || expected != blob.size() ||
        bytes % sizeof(std::uint32_t) != 0) {
      throw DataError("checkpoint " + stem.string() + " does not cover the model exactly");
    }
    params.set_trainable(manifest.at("trainable").get<std::set<std::string>>());
    if (meta != nullptr) {
      meta->seed = manifest.at("rng").at("seed").get<std::uint64_t>();
      meta->step = manifest.at("step").get<std::int64_t>();
      meta->extra = manifest.value("extra", nlohmann::json::object());
    }
    return params;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest " + json_path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError("checkpoint " + json_path.string() + ": " + e.what());
  }
}

template void save_checkpoint<float>(const ParamStore<float>&, const std::filesystem::path&,
                                     const CheckpointMeta&);
template void save_checkpoint<double>(const ParamStore<double>&, const std::filesystem::path&,
                                      const CheckpointMeta&);
template ParamStore<float> load_checkpoint<float>(const std::filesystem::path&, CheckpointMeta*);
template ParamStore<double> load_checkpoint<double>(const std::filesystem::path&, CheckpointMeta*);

}  // namespace pulseformer
