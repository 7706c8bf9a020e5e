#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pulseformer/error.hpp"

namespace pulseformer {

enum class Modality { ppg, ecg };
std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

inline constexpr int kVocabulary = 101;
inline constexpr int kMaxToken = kVocabulary - 1;

/// Uniformly sampled waveform plus provenance.
struct SignalRecord {
  std::vector<double> samples;
  double fs = 0.0;
  Modality modality = Modality::ppg;
  std::string subject_id;
  std::optional<int> label;  // 0 healthy, 1 AF
  /// Processing steps applied so far, oldest first.
  nlohmann::json processing = nlohmann::json::array();
  /// Beat onset times in seconds, when known (synthetic data).
  std::vector<double> beats;

  /// Throws DataError unless fs > 0, samples are finite and the label is 0/1.
  void validate() const;
};

struct TokenWindow {
  std::vector<int> tokens;
  double scale_min = 0.0;
  double scale_max = 0.0;
  double fs = 0.0;
  Modality modality = Modality::ppg;
};

/// Band-limited resampling. Rational rate ratios (both rates multiples of
/// 1 mHz, reduced factors <= 1000) use a Kaiser-windowed-sinc polyphase
/// filter with per-phase unit DC gain; anything else falls back to linear
/// interpolation. Output length is round(n * target_fs / fs); the method is
/// appended to `processing`.
SignalRecord resample(const SignalRecord& record, double target_fs);

/// Second-order sections of a digital Butterworth band-pass filter:
/// each row is b0 b1 b2 a0 a1 a2 (a0 = 1).
std::vector<std::array<double, 6>> butterworth_bandpass(int order, double low, double high, double fs);

/// Zero-phase 4th-order Butterworth band-pass (forward-backward, odd
/// reflection padding, steady-state initial conditions). Requires
/// 0 < low < high < fs/2.
SignalRecord bandpass(const SignalRecord& record, double low, double high);

/// Affine map min -> 0, max -> 100, rounded half away from zero. A flat
/// window maps to 50 everywhere. Throws ContextOverflowError past 500 samples.
TokenWindow tokenize_window(std::span<const double> samples, double fs = 0.0,
                            Modality modality = Modality::ppg);

/// Same quantizer with an externally chosen scale; values outside
/// [lo, hi] are clamped to the token range.
std::vector<int> quantize(std::span<const double> samples, double lo, double hi);

std::vector<double> detokenize(const TokenWindow& window);

/// floor((length - window) / shift) + 1, or 0 when the record is shorter.
long window_count(long length, long window, long shift);

}  // namespace pulseformer
