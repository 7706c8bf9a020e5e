#include "pulseformer/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "pulseformer/rng.hpp"

namespace pulseformer {

namespace {

constexpr double kPi = std::numbers::pi;

void add_wave(std::vector<double>& x, double fs, double centre, const Wave& w, double scale) {
  if (w.amplitude == 0.0) return;
  const double reach = 5.0 * w.width;
  const auto n = static_cast<long>(x.size());
  const long lo = std::max(0L, static_cast<long>(std::ceil((centre - reach) * fs)));
  const long hi = std::min(n - 1, static_cast<long>(std::floor((centre + reach) * fs)));
  const double inv = 1.0 / (2.0 * w.width * w.width);
  for (long i = lo; i <= hi; ++i) {
    const double d = static_cast<double>(i) / fs - centre;
    x[static_cast<std::size_t>(i)] += scale * w.amplitude * std::exp(-d * d * inv);
  }
}

double respiration(const SynthConfig& c, double t, double phase) {
  return std::sin(2.0 * kPi * c.respiratory_rate / 60.0 * t + phase);
}

SignalRecord empty_record(const SynthConfig& c) {
  SignalRecord r;
  r.fs = c.fs;
  r.modality = c.modality;
  r.samples.assign(static_cast<std::size_t>(std::llround(c.duration * c.fs)), 0.0);
  r.label = c.rhythm == Rhythm::af ? 1 : 0;
  r.processing.push_back({{"op", "synthesize"},
                          {"modality", to_string(c.modality)},
                          {"rhythm", to_string(c.rhythm)},
                          {"heart_rate", c.heart_rate},
                          {"respiratory_rate", c.respiratory_rate},
                          {"seed", c.seed}});
  return r;
}

}  // namespace

std::string to_string(Rhythm r) { return r == Rhythm::regular ? "regular" : "af"; }

Rhythm rhythm_from_string(const std::string& s) {
  if (s == "regular") return Rhythm::regular;
  if (s == "af") return Rhythm::af;
  throw ConfigError("unknown rhythm '" + s + "'");
}

CohortMix mix_from_string(const std::string& s) {
  if (s == "regular") return CohortMix::regular;
  if (s == "af") return CohortMix::af;
  if (s == "mixed") return CohortMix::mixed;
  throw ConfigError("unknown cohort mix '" + s + "'");
}

void SynthConfig::validate() const {
  if (!(fs > 0.0 && duration > 0.0 && heart_rate > 0.0 && respiratory_rate > 0.0)) {
    throw ConfigError("synthesis rates and duration must be positive");
  }
  if (!(amplitude_modulation >= 0.0 && amplitude_modulation < 1.0)) {
    throw ConfigError("amplitude modulation depth must lie in [0, 1)");
  }
  if (!(rate_modulation >= 0.0 && rate_modulation < 0.5) || hr_variability < 0.0 || af_rr_sigma < 0.0) {
    throw ConfigError("rhythm variability parameters out of range");
  }
  const std::vector<Wave> waves = modality == Modality::ppg
                                      ? std::vector<Wave>{systolic, dicrotic}
                                      : std::vector<Wave>{p_wave, q_wave, r_wave, s_wave, t_wave};
  double narrowest = 1e9;
  for (const auto& w : waves) {
    if (!(w.width > 0.0)) throw ConfigError("wave widths must be positive");
    if (w.amplitude != 0.0) narrowest = std::min(narrowest, w.width);
  }
  const double f_max = 3.0 / (2.0 * kPi * narrowest);
  if (fs <= 2.0 * f_max) {
    throw ConfigError("fs " + std::to_string(fs) + " Hz is below twice the highest component frequency (" +
                      std::to_string(f_max) + " Hz)");
  }
}

std::vector<double> beat_times(const SynthConfig& c) {
  c.validate();
  Rng rng(c.seed);
  const double rr0 = 60.0 / c.heart_rate;
  const double sigma = c.rhythm == Rhythm::af ? c.af_rr_sigma : c.hr_variability;
  const double resp_phase = 2.0 * kPi * rng.uniform();
  std::vector<double> beats;
  // Start before zero so the first visible beat has a full predecessor.
  double t = -rr0 * rng.uniform() - rr0;
  while (t < c.duration + rr0) {
    beats.push_back(t);
    const double mod = 1.0 + c.rate_modulation * respiration(c, t, resp_phase);
    // Mean-one log-normal jitter.
    const double jitter = std::exp(sigma * rng.normal() - 0.5 * sigma * sigma);
    t += std::clamp(rr0 * mod * jitter, 0.25 * rr0, 4.0 * rr0);
  }
  return beats;
}

SignalRecord synth_ppg(const SynthConfig& config) {
  SynthConfig c = config;
  c.modality = Modality::ppg;
  const auto onsets = beat_times(c);
  Rng rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
  const double amp_phase = 2.0 * kPi * rng.uniform();
  SignalRecord r = empty_record(c);
  for (double onset : onsets) {
    const double scale = 1.0 + c.amplitude_modulation * respiration(c, onset, amp_phase);
    add_wave(r.samples, c.fs, onset + c.systolic.offset, c.systolic, scale);
    add_wave(r.samples, c.fs, onset + c.dicrotic.offset, c.dicrotic, scale);
    const double peak = onset + c.systolic.offset;
    if (peak >= 0.0 && peak < c.duration) r.beats.push_back(peak);
  }
  return r;
}

SignalRecord synth_ecg(const SynthConfig& config) {
  SynthConfig c = config;
  c.modality = Modality::ecg;
  const auto beats = beat_times(c);
  Rng rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
  const double amp_phase = 2.0 * kPi * rng.uniform();
  SignalRecord r = empty_record(c);
  for (double t : beats) {
    const double scale = 1.0 + c.amplitude_modulation * respiration(c, t, amp_phase);
    if (c.rhythm == Rhythm::regular) add_wave(r.samples, c.fs, t + c.p_wave.offset, c.p_wave, scale);
    for (const Wave* w : {&c.q_wave, &c.r_wave, &c.s_wave, &c.t_wave}) {
      add_wave(r.samples, c.fs, t + w->offset, *w, scale);
    }
    if (t >= 0.0 && t < c.duration) r.beats.push_back(t);
  }
  return r;
}

SignalRecord synthesize(const SynthConfig& config) {
  return config.modality == Modality::ppg ? synth_ppg(config) : synth_ecg(config);
}

std::vector<SignalRecord> build_cohort(const CohortConfig& config) {
  if (config.subjects < 1) throw ConfigError("cohort needs at least one subject");
  Rng rng(config.seed);
  std::vector<SignalRecord> out;
  for (int s = 0; s < config.subjects; ++s) {
    Rng subject = rng.split();
    SynthConfig c;
    c.modality = config.modality;
    c.fs = config.fs;
    c.duration = config.duration;
    c.seed = subject.next_u64();
    c.rhythm = config.mix == CohortMix::af || (config.mix == CohortMix::mixed && s % 2 == 1) ? Rhythm::af
                                                                                                : Rhythm::regular;
    const auto between = [&](double lo, double hi) { return lo + (hi - lo) * subject.uniform(); };
    c.heart_rate = c.rhythm == Rhythm::af ? between(70.0, 100.0) : between(58.0, 85.0);
    c.respiratory_rate = between(10.0, 20.0);
    c.amplitude_modulation = between(0.05, 0.2);
    const double stretch = between(0.9, 1.1);
    c.systolic.width *= stretch;
    c.systolic.offset *= stretch;
    c.dicrotic.amplitude = between(0.25, 0.45);
    c.dicrotic.offset = c.systolic.offset + between(0.22, 0.3);
    c.r_wave.amplitude = between(0.8, 1.2);
    c.t_wave.amplitude = between(0.2, 0.4);
    c.p_wave.amplitude = between(0.1, 0.2);
    auto r = synthesize(c);
    char id[16];
    std::snprintf(id, sizeof id, "S%02d", s + 1);
    r.subject_id = id;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace pulseformer
