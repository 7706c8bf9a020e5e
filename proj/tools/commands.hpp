#pragma once

#include <nlohmann/json.hpp>

#include "run.hpp"

namespace pulseformer::cli {

/// Default resolved config of each command, before file and flag overrides.
nlohmann::json default_config(const std::string& command);

/// Checks every contradiction that can be found without reading data, so
/// bad configs fail before any compute. Throws ConfigError.
void validate_config(const std::string& command, const nlohmann::json& config);

void run_synth(Run& run);
void run_tokenize(Run& run);
void run_pretrain(Run& run);
void run_generate(Run& run);
void run_eval_horizon(Run& run);
void run_finetune(Run& run);
void run_loso(Run& run);
void run_attn_aggregate(Run& run);
void run_attn_lookback(Run& run);
void run_attn_similarity(Run& run);
void run_attn_heads(Run& run);
void run_attn_delta(Run& run);
void run_export_figure(Run& run);

}  // namespace pulseformer::cli
