#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "pulseformer/interpretability.hpp"
#include "pulseformer/training.hpp"

namespace pulseformer::cli {

/// Per-iteration loss in grey with train (black) and validation (red) eval
/// points on top. Either series may be empty.
void write_loss_svg(const std::filesystem::path& file, const std::vector<double>& iter_loss,
                    const std::vector<EvalRow>& evals);

/// Mean look-back per layer with a +/- one sd band.
void write_lookback_svg(const std::filesystem::path& file, const std::vector<LookbackRow>& table);

/// Context shaded by the positive part of the attention change.
void write_delta_svg(const std::filesystem::path& file, std::span<const int> tokens, const AttentionDelta& delta);

}  // namespace pulseformer::cli
