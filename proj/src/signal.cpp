#include "pulseformer/signal.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>

namespace pulseformer {

std::string to_string(Modality m) { return m == Modality::ppg ? "ppg" : "ecg"; }

Modality modality_from_string(const std::string& s) {
  if (s == "ppg" || s == "PPG") return Modality::ppg;
  if (s == "ecg" || s == "ECG") return Modality::ecg;
  throw ConfigError("unknown modality '" + s + "'");
}

void SignalRecord::validate() const {
  if (!(fs > 0.0) || !std::isfinite(fs)) throw DataError("record '" + subject_id + "' has invalid fs");
  for (double x : samples) {
    if (!std::isfinite(x)) throw DataError("record '" + subject_id + "' contains non-finite samples");
  }
  if (label && *label != 0 && *label != 1) {
    throw DataError("record '" + subject_id + "' label must be 0 or 1");
  }
}

namespace {

constexpr double kPi = std::numbers::pi;

// Exact rational form of target/fs when both are multiples of 1 mHz.
std::optional<std::pair<long, long>> rational_ratio(double fs, double target) {
  const double a = std::round(fs * 1000.0);
  const double b = std::round(target * 1000.0);
  if (std::abs(a - fs * 1000.0) > 1e-6 || std::abs(b - target * 1000.0) > 1e-6) return std::nullopt;
  const long down = static_cast<long>(a);
  const long up = static_cast<long>(b);
  const long g = std::gcd(up, down);
  if (up / g > 1000 || down / g > 1000) return std::nullopt;
  return std::make_pair(up / g, down / g);
}

long floor_div(long a, long b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

double sinc(double x) { return x == 0.0 ? 1.0 : std::sin(kPi * x) / (kPi * x); }

std::vector<double> polyphase(const std::vector<double>& x, long up, long down, std::size_t n_out) {
  // Prototype low-pass at the upsampled rate, cutoff at the lower Nyquist.
  const long r = std::max(up, down);
  const long half = 10 * r;
  constexpr double beta = 5.0;
  const double i0_beta = std::cyl_bessel_i(0.0, beta);
  std::vector<double> h(static_cast<std::size_t>(2 * half + 1));
  for (long k = -half; k <= half; ++k) {
    const double u = static_cast<double>(k) / static_cast<double>(half);
    const double w = std::cyl_bessel_i(0.0, beta * std::sqrt(std::max(0.0, 1.0 - u * u))) / i0_beta;
    h[static_cast<std::size_t>(k + half)] = sinc(static_cast<double>(k) / static_cast<double>(r)) * w;
  }
  // Per-phase normalization so every phase passes DC with unit gain.
  std::vector<double> phase_sum(static_cast<std::size_t>(up), 0.0);
  for (long k = -half; k <= half; ++k) {
    phase_sum[static_cast<std::size_t>(((k % up) + up) % up)] += h[static_cast<std::size_t>(k + half)];
  }
  const long n = static_cast<long>(x.size());
  std::vector<double> y(n_out);
  for (std::size_t m = 0; m < n_out; ++m) {
    const long pos = static_cast<long>(m) * down;  // position on the upsampled grid
    const long phase = pos % up;
    double acc = 0.0;
    for (long j = -floor_div(half - pos, up); j <= floor_div(pos + half, up); ++j) {
      const long k = pos - j * up;
      const double xj = x[static_cast<std::size_t>(std::clamp(j, 0L, n - 1))];  // edge hold
      acc += h[static_cast<std::size_t>(k + half)] * xj;
    }
    y[m] = acc / phase_sum[static_cast<std::size_t>(phase)];
  }
  return y;
}

std::vector<double> linear(const std::vector<double>& x, double fs, double target, std::size_t n_out) {
  std::vector<double> y(n_out);
  const double last = static_cast<double>(x.size() - 1);
  for (std::size_t m = 0; m < n_out; ++m) {
    const double t = std::min(static_cast<double>(m) * fs / target, last);
    const auto i = static_cast<std::size_t>(std::floor(t));
    const double frac = t - static_cast<double>(i);
    y[m] = i + 1 < x.size() ? x[i] + frac * (x[i + 1] - x[i]) : x[i];
  }
  return y;
}

using Section = std::array<double, 6>;

// One pass of a cascade in transposed direct form II.
void sos_filter(const std::vector<Section>& sos, std::vector<double>& x,
                std::vector<std::array<double, 2>> state) {
  for (double& v : x) {
    double s = v;
    for (std::size_t i = 0; i < sos.size(); ++i) {
      const auto& c = sos[i];
      auto& z = state[i];
      const double y = c[0] * s + z[0];
      z[0] = c[1] * s - c[4] * y + z[1];
      z[1] = c[2] * s - c[5] * y;
      s = y;
    }
    v = s;
  }
}

// Initial states giving the steady-state response to a unit step.
std::vector<std::array<double, 2>> sos_steady_state(const std::vector<Section>& sos) {
  std::vector<std::array<double, 2>> zi(sos.size());
  double scale = 1.0;
  for (std::size_t i = 0; i < sos.size(); ++i) {
    const auto& c = sos[i];
    const double gain = (c[0] + c[1] + c[2]) / (1.0 + c[4] + c[5]);
    const double z1 = c[2] - c[5] * gain;
    const double z0 = c[1] - c[4] * gain + z1;
    zi[i] = {scale * z0, scale * z1};
    scale *= gain;
  }
  return zi;
}

std::vector<std::array<double, 2>> scaled(std::vector<std::array<double, 2>> zi, double by) {
  for (auto& z : zi) {
    z[0] *= by;
    z[1] *= by;
  }
  return zi;
}

}  // namespace

SignalRecord resample(const SignalRecord& record, double target_fs) {
  if (!(target_fs > 0.0)) throw ConfigError("target sample rate must be positive");
  if (record.samples.size() < 2) throw DataError("resampling needs at least 2 samples");
  SignalRecord out = record;
  if (target_fs == record.fs) {
    out.processing.push_back({{"op", "resample"}, {"method", "identity"}, {"fs", target_fs}});
    return out;
  }
  const auto n_out = static_cast<std::size_t>(
      std::llround(static_cast<double>(record.samples.size()) * target_fs / record.fs));
  if (n_out == 0) throw DataError("resampling leaves no samples");
  if (const auto ratio = rational_ratio(record.fs, target_fs)) {
    out.samples = polyphase(record.samples, ratio->first, ratio->second, n_out);
    out.processing.push_back({{"op", "resample"},
                              {"method", "polyphase-kaiser-sinc"},
                              {"from_fs", record.fs},
                              {"fs", target_fs},
                              {"up", ratio->first},
                              {"down", ratio->second}});
  } else {
    out.samples = linear(record.samples, record.fs, target_fs, n_out);
    out.processing.push_back(
        {{"op", "resample"}, {"method", "linear"}, {"from_fs", record.fs}, {"fs", target_fs}});
  }
  out.fs = target_fs;
  return out;
}

std::vector<Section> butterworth_bandpass(int order, double low, double high, double fs) {
  if (order < 1 || order % 2 != 0) throw ConfigError("band-pass prototype order must be even and positive");
  if (!(low > 0.0 && low < high && high < fs / 2.0)) {
    throw ConfigError("band-pass needs 0 < low < high < fs/2, got " + std::to_string(low) + ".." +
                      std::to_string(high) + " Hz at fs " + std::to_string(fs));
  }
  using C = std::complex<double>;
  // Pre-warped analog band edges (rad/s).
  const double wl = 2.0 * fs * std::tan(kPi * low / fs);
  const double wh = 2.0 * fs * std::tan(kPi * high / fs);
  const double w0 = std::sqrt(wl * wh);
  const double bw = wh - wl;

  std::vector<C> poles;
  for (int k = 0; k < order; ++k) {
    const C p = std::polar(1.0, kPi * (2.0 * k + order + 1.0) / (2.0 * order));
    const C half = p * bw / 2.0;
    const C root = std::sqrt(half * half - w0 * w0);
    for (const C s : {half + root, half - root}) {
      poles.push_back((2.0 * fs + s) / (2.0 * fs - s));  // bilinear transform
    }
  }
  // Zeros: `order` at z = 1 (from s = 0) and `order` at z = -1 (from s = inf),
  // one of each per section.
  std::vector<Section> sos;
  for (const C& z : poles) {
    if (z.imag() <= 0.0) continue;
    sos.push_back({1.0, 0.0, -1.0, 1.0, -2.0 * z.real(), std::norm(z)});
  }
  if (static_cast<int>(sos.size()) != order) throw NumericError("band-pass design produced real poles");

  // Unit gain at the digital centre frequency.
  const double wc = 2.0 * std::atan(w0 / (2.0 * fs));
  const C zc = std::polar(1.0, wc);
  C response = 1.0;
  for (const auto& c : sos) {
    response *= (c[0] + c[1] / zc + c[2] / (zc * zc)) / (c[3] + c[4] / zc + c[5] / (zc * zc));
  }
  const double g = 1.0 / std::abs(response);
  for (int i = 0; i < 3; ++i) sos[0][static_cast<std::size_t>(i)] *= g;
  return sos;
}

SignalRecord bandpass(const SignalRecord& record, double low, double high) {
  constexpr int kOrder = 4;
  const auto sos = butterworth_bandpass(kOrder, low, high, record.fs);
  SignalRecord out = record;
  out.processing.push_back({{"op", "bandpass"},
                            {"filter", "butterworth-sos-filtfilt"},
                            {"order", kOrder},
                            {"low_hz", low},
                            {"high_hz", high}});
  const auto& x = record.samples;
  const std::size_t n = x.size();
  if (n < 2) return out;

  const std::size_t padlen = std::min<std::size_t>(3 * (2 * sos.size() + 1), n - 1);
  std::vector<double> ext;
  ext.reserve(n + 2 * padlen);
  for (std::size_t i = padlen; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= padlen; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  const auto zi = sos_steady_state(sos);
  sos_filter(sos, ext, scaled(zi, ext.front()));
  std::reverse(ext.begin(), ext.end());
  sos_filter(sos, ext, scaled(zi, ext.front()));
  std::reverse(ext.begin(), ext.end());
  out.samples.assign(ext.begin() + static_cast<long>(padlen), ext.begin() + static_cast<long>(padlen + n));
  return out;
}

std::vector<int> quantize(std::span<const double> samples, double lo, double hi) {
  std::vector<int> tokens(samples.size(), kMaxToken / 2);
  if (!(hi > lo)) return tokens;
  const double scale = static_cast<double>(kMaxToken) / (hi - lo);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double t = std::round((samples[i] - lo) * scale);
    tokens[i] = static_cast<int>(std::clamp(t, 0.0, static_cast<double>(kMaxToken)));
  }
  return tokens;
}

TokenWindow tokenize_window(std::span<const double> samples, double fs, Modality modality) {
  constexpr std::size_t kMaxLength = 500;
  if (samples.size() > kMaxLength) {
    throw ContextOverflowError("window of " + std::to_string(samples.size()) + " samples exceeds " +
                               std::to_string(kMaxLength));
  }
  for (double x : samples) {
    if (!std::isfinite(x)) throw DataError("cannot tokenize non-finite samples");
  }
  TokenWindow w;
  w.fs = fs;
  w.modality = modality;
  if (samples.empty()) return w;
  const auto [lo, hi] = std::minmax_element(samples.begin(), samples.end());
  w.scale_min = *lo;
  w.scale_max = *hi;
  w.tokens = quantize(samples, *lo, *hi);
  return w;
}

std::vector<double> detokenize(const TokenWindow& window) {
  std::vector<double> out(window.tokens.size());
  const double span = window.scale_max - window.scale_min;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = window.scale_min + static_cast<double>(window.tokens[i]) / kMaxToken * span;
  }
  return out;
}

long window_count(long length, long window, long shift) {
  if (window < 1 || shift < 1) throw ConfigError("window length and shift must be positive");
  return length < window ? 0 : (length - window) / shift + 1;
}

}  // namespace pulseformer
