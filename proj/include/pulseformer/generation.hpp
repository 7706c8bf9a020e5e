#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "pulseformer/model.hpp"
#include "pulseformer/signal.hpp"

namespace pulseformer {

/// Next-token logits for a batch of equal-length contexts: [B x T] tokens in,
/// [B x vocab] logits out.
using LogitFn = std::function<RowMatrix<double>(const TokenMatrix&)>;

/// Eval-mode language model restricted to the final position. The last block
/// runs with a single query, so only B rows of the head are computed.
/// `params` is held by reference and must outlive the returned function.
LogitFn model_logits(const ParamStore<float>& params);

/// Draws one token from softmax(logits / temperature) by inverting the CDF at
/// one uniform draw. temperature == 0 returns the argmax (lowest index on ties).
int sample_token(std::span<const double> logits, double temperature, Rng& rng);

/// Autoregressive rollout of every row of `contexts` for n_new steps; row b
/// draws from rngs[b] only. The window fed to the model is the trailing
/// `max_context` tokens. Empty rows of output when n_new <= 0.
std::vector<std::vector<int>> generate_batch(const LogitFn& logits, const TokenMatrix& contexts, int n_new,
                                             int max_context, std::span<Rng> rngs, double temperature = 1.0);

/// Single-sequence rollout with the model's own context limit.
std::vector<int> generate(const ParamStore<float>& params, std::span<const int> context, int n_new, Rng& rng,
                          double temperature = 1.0);

/// Context and ground-truth continuation cut from one signal window, both
/// tokenized over the min/max of the whole window.
struct HorizonWindow {
  std::string subject_id;
  std::size_t record = 0;
  std::size_t start = 0;
  std::vector<int> context;
  std::vector<int> truth;
  double scale_min = 0.0;
  double scale_max = 0.0;
};

/// Windows of context + horizon samples every `shift` samples of each record.
std::vector<HorizonWindow> horizon_windows(const std::vector<SignalRecord>& records, int context = 500,
                                           int horizon = 250, int shift = 750);

/// Per-step median and interquartile range of |prediction - truth|.
struct HorizonStats {
  std::vector<double> median;
  std::vector<double> q25;
  std::vector<double> q75;
  std::vector<std::size_t> n;

  std::size_t steps() const { return median.size(); }
};

/// Linear-interpolation quantile (the (n-1)p order-statistic rule) of an
/// unsorted sample.
double quantile(std::vector<double> values, double p);

/// Aggregates per-step absolute errors. predictions[i] may be shorter than
/// truth[i]; each step counts only the rollouts that reach it.
HorizonStats horizon_stats(const std::vector<std::vector<int>>& predictions,
                           const std::vector<std::vector<int>>& truths);

struct HorizonConfig {
  double temperature = 1.0;
  /// Independent stochastic rollouts per window.
  int rollouts = 1;
  /// Windows generated together in one batched forward pass.
  int batch = 8;
  std::uint64_t seed = 1;
};

struct HorizonResult {
  HorizonStats stats;
  /// One entry per (window, rollout), window-major.
  std::vector<std::vector<int>> predictions;
};

/// Rolls every window forward for its truth length and scores the rollouts.
/// Rollout r of window i draws from its own stream, so results do not depend
/// on the batch size.
HorizonResult evaluate_horizon(const LogitFn& logits, int max_context, const std::vector<HorizonWindow>& windows,
                               const HorizonConfig& config, const std::function<void(std::size_t)>& progress = {});

HorizonResult evaluate_horizon(const ParamStore<float>& params, const std::vector<HorizonWindow>& windows,
                               const HorizonConfig& config, const std::function<void(std::size_t)>& progress = {});

/// step,median,q25,q75,n with step counted from 1.
void write_horizon_csv(const std::filesystem::path& file, const HorizonStats& stats);

/// One row per sample: index,part,token,value where part is context, truth or
/// prediction and value is the detokenized signal.
void write_rollout_csv(const std::filesystem::path& file, const HorizonWindow& window,
                       const std::vector<int>& prediction);

/// Overlay of context (black), truth (blue) and prediction (red).
void write_rollout_svg(const std::filesystem::path& file, const HorizonWindow& window,
                       const std::vector<int>& prediction);

/// Median error line with a shaded interquartile band.
void write_horizon_svg(const std::filesystem::path& file, const HorizonStats& stats);

}  // namespace pulseformer
