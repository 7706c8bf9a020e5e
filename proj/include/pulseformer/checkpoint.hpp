#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "pulseformer/model.hpp"

namespace pulseformer {

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  /// Free-form extras persisted verbatim (losses, provenance).
  nlohmann::json extra = nlohmann::json::object();
};

/// Writes `<stem>.json` (format tag, config, head, rng algorithm and seed,
/// step, tensor table, trainable set) and `<stem>.bin` (tensors as raw
/// little-endian float32 at the recorded offsets).
template <typename Scalar>
void save_checkpoint(const ParamStore<Scalar>& params, const std::filesystem::path& stem,
                     const CheckpointMeta& meta = {});

/// Throws DataError on missing files, malformed manifests, or a blob whose
/// size disagrees with the tensor table.
template <typename Scalar>
ParamStore<Scalar> load_checkpoint(const std::filesystem::path& stem, CheckpointMeta* meta = nullptr);

std::filesystem::path with_suffix(const std::filesystem::path& stem, const std::string& suffix);

}  // namespace pulseformer
