#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pulseformer/signal.hpp"

namespace pulseformer {

enum class Rhythm { regular, af };
std::string to_string(Rhythm r);
Rhythm rhythm_from_string(const std::string& s);

/// One Gaussian wave component: amplitude, centre offset (s) and width (sd, s).
struct Wave {
  double amplitude;
  double offset;
  double width;
};

struct SynthConfig {
  Modality modality = Modality::ppg;
  Rhythm rhythm = Rhythm::regular;
  double fs = 125.0;
  double duration = 60.0;  // seconds
  double heart_rate = 70.0;  // bpm
  /// Beat-to-beat jitter of the RR interval (log-normal sd) in regular rhythm.
  double hr_variability = 0.005;
  double respiratory_rate = 15.0;  // breaths per minute
  /// Relative beat-amplitude swing driven by respiration, in [0, 1).
  double amplitude_modulation = 0.1;
  /// Relative RR swing driven by respiration (sinus arrhythmia).
  double rate_modulation = 0.015;
  /// Log-normal sd of RR intervals in AF; sqrt(ln 1.0625) gives CV 0.25.
  double af_rr_sigma = 0.24622;

  // PPG, offsets from beat onset.
  Wave systolic{1.0, 0.18, 0.08};
  Wave dicrotic{0.35, 0.45, 0.07};

  // ECG, offsets from the R peak.
  Wave p_wave{0.15, -0.20, 0.025};
  Wave q_wave{-0.12, -0.035, 0.010};
  Wave r_wave{1.0, 0.0, 0.012};
  Wave s_wave{-0.25, 0.035, 0.010};
  Wave t_wave{0.30, 0.26, 0.050};

  std::uint64_t seed = 1;

  /// Throws ConfigError when rates are not positive, the modulation depth
  /// leaves [0, 1), or fs does not exceed twice the highest component
  /// frequency (taken as 3 / (2 pi width) of the narrowest wave).
  void validate() const;
};

/// Beat onset times (s): respiratory-modulated RR intervals with log-normal
/// jitter, wide and mean-preserving in AF.
std::vector<double> beat_times(const SynthConfig& config);

/// Systolic Gaussian plus delayed dicrotic Gaussian per beat, amplitude
/// modulated by respiration. `beats` holds systolic-peak times.
SignalRecord synth_ppg(const SynthConfig& config);

/// P, Q, R, S, T Gaussians per beat (no P wave in AF). `beats` holds R times.
SignalRecord synth_ecg(const SynthConfig& config);

SignalRecord synthesize(const SynthConfig& config);

enum class CohortMix { regular, af, mixed };
CohortMix mix_from_string(const std::string& s);

struct CohortConfig {
  int subjects = 10;
  Modality modality = Modality::ppg;
  CohortMix mix = CohortMix::regular;
  double fs = 125.0;
  double duration = 300.0;
  std::uint64_t seed = 1;
};

/// Subjects S01, S02, ... with distinct seeds and individual heart rate,
/// breathing and morphology. A mixed cohort alternates regular (label 0)
/// and AF (label 1), starting with regular.
std::vector<SignalRecord> build_cohort(const CohortConfig& config);

}  // namespace pulseformer
