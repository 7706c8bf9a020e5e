#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pulseformer/model.hpp"
#include "pulseformer/signal.hpp"

namespace pulseformer {

// Every analysis here runs the model in eval mode on a single sequence, so
// outputs are deterministic for fixed parameters and tokens.

/// Final attention row (the prediction point) of each head of each layer.
/// rows[layer][head] has one weight per context position.
struct FinalRows {
  std::vector<std::vector<Vector<double>>> rows;

  int layers() const { return static_cast<int>(rows.size()); }
};

template <typename Scalar>
FinalRows final_rows(const AttentionRecord<Scalar>& record);

template <typename Scalar>
FinalRows capture_final_rows(const ParamStore<Scalar>& params, std::span<const int> tokens);

/// Final-row attention of each head of the last block only. Cheaper than a
/// full capture: the last block runs with a single query.
template <typename Scalar>
std::vector<Vector<double>> final_block_rows(const ParamStore<Scalar>& params, std::span<const int> tokens);

/// Head-summed final row normalized to sum to one.
Vector<double> aggregate_heads(const std::vector<Vector<double>>& heads);

/// aggregate_heads of `layer` (1-based).
template <typename Scalar>
Vector<double> aggregate_final_row(const AttentionRecord<Scalar>& record, int layer);

/// Attention-weighted mean distance, in seconds, between the prediction point
/// (last position) and the attended positions: sum_i w[i] (T-1-i) / fs.
double lookback_center(const Vector<double>& row, double fs);

struct LookbackRow {
  int layer;    // 1-based
  double mean;  // seconds
  double sd;    // sample sd over every (head, window) pair
  std::size_t n;
};

/// Per-layer look-back statistics pooled over heads and windows.
std::vector<LookbackRow> lookback_distance(const std::vector<FinalRows>& windows, double fs);

enum class Slope { rising, falling };
std::string to_string(Slope s);

struct SlopeToken {
  Index position;
  Slope slope;
};

/// Slope of interior point i from the centered difference of `values`; empty
/// at the ends, at zero difference and at local extrema (where the one-sided
/// differences disagree in sign).
std::optional<Slope> slope_at(std::span<const double> values, Index i);

/// Positions whose token lies within `tolerance` of the reference token and
/// that sit on a rising or falling flank of the window. Detokenization is
/// increasing, so slopes are read from the tokens with the same signs as on
/// the detokenized signal. The reference itself is excluded.
std::vector<SlopeToken> select_slope_tokens(const TokenWindow& window, Index reference, int tolerance = 2);

/// A point on the final rising flank of the window: the last run of rising
/// points, at the member whose token is nearest the run's mid-value.
/// Throws DataError when nothing rises.
Index rising_reference(const TokenWindow& window);

/// Throws NumericError when either vector has zero norm.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Cosine similarity of each selected token's residual-stream vector to the
/// reference's, at stage 0 (embedded input) and after each block.
struct SimilarityTrace {
  Index reference = 0;
  std::vector<SlopeToken> tokens;
  RowMatrix<double> similarity;  // tokens x stages

  int stages() const { return static_cast<int>(similarity.cols()); }
  /// Mean similarity of one class at `stage`; NaN when the class is empty.
  double class_mean(Slope slope, int stage) const;
};

template <typename Scalar>
SimilarityTrace similarity_trace(const ParamStore<Scalar>& params, std::span<const int> tokens,
                                 const std::vector<SlopeToken>& selected, Index reference);

/// Averaged final-block attention of one head over N successive predictions.
struct HeadMap {
  std::vector<double> weights;  // length N, original-window coordinates
  std::vector<int> counts;      // contributions per position
  std::vector<Index> peaks;
};

/// Tokens of the context window starting `shift` samples in.
using ShiftedWindow = std::function<std::vector<int>(Index shift)>;

/// For s = 0..N-1 the window starting at s is fed through the model and each
/// final-block head's final row w_s is added at original position s + j for
/// every j with s + j < N; each position is then divided by its count,
/// min(p + 1, N). Peaks are found on every averaged map.
template <typename Scalar>
std::vector<HeadMap> shift_and_add(const ParamStore<Scalar>& params, const ShiftedWindow& window, Index n);

/// Shift-and-add over a token sequence of at least 2N - 1 tokens.
template <typename Scalar>
std::vector<HeadMap> shift_and_add(const ParamStore<Scalar>& params, std::span<const int> tokens, Index n);

/// Shift-and-add over raw samples; every shifted window is tokenized on its
/// own min/max exactly like model input.
template <typename Scalar>
std::vector<HeadMap> shift_and_add_samples(const ParamStore<Scalar>& params, std::span<const double> samples,
                                           Index n);

/// Interior local maxima (plateaus count once, at their first index) of at
/// least rel_height * max, accepted greedily from the tallest down (lower
/// index first on equal height) while keeping every pair min_distance
/// apart. Returned in increasing order.
std::vector<Index> find_attention_peaks(std::span<const double> map, Index min_distance = 15,
                                        double rel_height = 0.5);

/// Fine-tuned minus base aggregate of the final layer's final row.
struct AttentionDelta {
  Vector<double> base;
  Vector<double> tuned;
  Vector<double> delta;
};

AttentionDelta attention_delta(const Vector<double>& base_aggregate, const Vector<double>& tuned_aggregate);

/// Both models must share their architecture; the head may differ.
template <typename Scalar>
AttentionDelta attention_delta(const ParamStore<Scalar>& base, const ParamStore<Scalar>& tuned,
                               std::span<const int> tokens);

/// Marks the stretch [b_{k-1}, b_k] of every beat interval that departs from
/// the median interval by more than `tolerance` (relative). Beat positions
/// are in samples of the window.
std::vector<bool> irregular_interval_mask(std::span<const double> beats, Index length, double tolerance = 0.2);

/// Mean of max(delta, 0) inside and outside the mask.
std::pair<double, double> positive_delta_contrast(const Vector<double>& delta, const std::vector<bool>& mask);

void write_aggregate_csv(const std::filesystem::path& file, std::span<const int> tokens,
                         const std::vector<Vector<double>>& per_layer, const std::vector<int>& layers);
void write_lookback_csv(const std::filesystem::path& file, const std::vector<LookbackRow>& table);
void write_similarity_csv(const std::filesystem::path& file, const SimilarityTrace& trace);
void write_head_maps_csv(const std::filesystem::path& file, const std::vector<HeadMap>& maps);
void write_delta_csv(const std::filesystem::path& file, std::span<const int> tokens, const AttentionDelta& delta);

/// Context in black overlaid with translucent red bars whose opacity follows
/// `weights`, plus the weights rescaled to the token range as a red line.
void write_attention_svg(const std::filesystem::path& file, const std::string& title, std::span<const int> tokens,
                         const Vector<double>& weights);
/// Similarity per stage: rising tokens blue, falling red, the reference black at 1.
void write_similarity_svg(const std::filesystem::path& file, const SimilarityTrace& trace);
/// Context with each head's map and peak markers.
void write_head_maps_svg(const std::filesystem::path& file, std::span<const int> tokens,
                         const std::vector<HeadMap>& maps, const std::vector<int>& heads);

}  // namespace pulseformer
