#include <doctest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "pulseformer/dataset.hpp"

using namespace pulseformer;

namespace {

constexpr double kPi = std::numbers::pi;

SignalRecord sine(double freq, double fs, double seconds, double amp = 1.0, double offset = 0.0) {
  SignalRecord r;
  r.fs = fs;
  r.subject_id = "S";
  const auto n = static_cast<std::size_t>(std::llround(fs * seconds));
  for (std::size_t i = 0; i < n; ++i) {
    r.samples.push_back(offset + amp * std::sin(2.0 * kPi * freq * static_cast<double>(i) / fs));
  }
  return r;
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

double rms(const std::vector<double>& x, std::size_t from, std::size_t to) {
  double s = 0;
  for (std::size_t i = from; i < to; ++i) s += x[i] * x[i];
  return std::sqrt(s / static_cast<double>(to - from));
}

std::complex<double> response(const std::vector<std::array<double, 6>>& sos, double f, double fs) {
  const auto z = std::polar(1.0, 2.0 * kPi * f / fs);
  std::complex<double> h = 1.0;
  for (const auto& c : sos) h *= (c[0] + c[1] / z + c[2] / (z * z)) / (c[3] + c[4] / z + c[5] / (z * z));
  return h;
}

}  // namespace

TEST_CASE("resample a 1 Hz sine from 1000 Hz to 50 Hz") {
  const auto in = sine(1.0, 1000.0, 10.0);
  const auto out = resample(in, 50.0);
  CHECK(out.fs == 50.0);
  REQUIRE(out.samples.size() == static_cast<std::size_t>(std::llround(10000 * 50.0 / 1000.0)));
  std::vector<double> truth;
  for (std::size_t m = 0; m < out.samples.size(); ++m) truth.push_back(std::sin(2.0 * kPi * m / 50.0));
  CHECK(correlation(out.samples, truth) > 0.999);
  CHECK(out.processing.back()["method"] == "polyphase-kaiser-sinc");
}

TEST_CASE("resample 125 Hz to 50 Hz keeps an in-band tone") {
  const auto in = sine(3.0, 125.0, 8.0);
  const auto out = resample(in, 50.0);
  CHECK(out.samples.size() == 400);
  double worst = 0;
  for (std::size_t m = 20; m + 20 < out.samples.size(); ++m) {
    worst = std::max(worst, std::abs(out.samples[m] - std::sin(2.0 * kPi * 3.0 * m / 50.0)));
  }
  CHECK(worst < 0.01);
}

TEST_CASE("resample trivial cases and fallback") {
  const auto in = sine(2.0, 200.0, 1.0);
  CHECK(resample(in, 200.0).samples == in.samples);

  SignalRecord flat;
  flat.fs = 125.0;
  flat.samples.assign(300, 2.5);
  for (double target : {50.0, 100.0, 333.0, 37.123456}) {
    const auto out = resample(flat, target);
    for (double v : out.samples) CHECK(v == doctest::Approx(2.5).epsilon(1e-12));
  }
  CHECK(resample(flat, 37.123456).processing.back()["method"] == "linear");

  SignalRecord tiny;
  tiny.fs = 10.0;
  tiny.samples = {1.0};
  CHECK_THROWS_AS(resample(tiny, 5.0), DataError);
  CHECK_THROWS_AS(resample(flat, 0.0), ConfigError);
}

TEST_CASE("linear fallback follows the line") {
  SignalRecord ramp;
  ramp.fs = 10.0;
  for (int i = 0; i < 100; ++i) ramp.samples.push_back(0.5 * i);
  const auto out = resample(ramp, 7.77777);
  for (std::size_t m = 0; m + 2 < out.samples.size(); ++m) {
    CHECK(out.samples[m] == doctest::Approx(0.5 * m * 10.0 / 7.77777).epsilon(1e-9));
  }
}

TEST_CASE("butterworth band-pass design") {
  const auto sos = butterworth_bandpass(4, 1.0, 15.0, 125.0);
  CHECK(sos.size() == 4);
  // Pre-warping puts the half-power points exactly on the band edges.
  CHECK(std::abs(response(sos, 1.0, 125.0)) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-9));
  CHECK(std::abs(response(sos, 15.0, 125.0)) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-9));
  CHECK(std::abs(response(sos, 1e-9, 125.0)) < 1e-6);
  CHECK(std::abs(response(sos, 62.4999, 125.0)) < 1e-6);
  for (const auto& c : sos) CHECK(c[5] < 1.0);  // poles inside the unit circle
  CHECK_THROWS_AS(butterworth_bandpass(4, 15.0, 1.0, 125.0), ConfigError);
  CHECK_THROWS_AS(butterworth_bandpass(4, 1.0, 70.0, 125.0), ConfigError);
  CHECK_THROWS_AS(butterworth_bandpass(4, 0.0, 10.0, 125.0), ConfigError);
}

TEST_CASE("band-pass passes in-band tones and removes drift") {
  const auto tone = sine(5.0, 125.0, 20.0);
  const auto out = bandpass(tone, 1.0, 15.0);
  REQUIRE(out.samples.size() == tone.samples.size());
  const std::size_t a = 250, b = tone.samples.size() - 250;
  CHECK(rms(out.samples, a, b) / rms(tone.samples, a, b) == doctest::Approx(1.0).epsilon(0.05));
  // Zero phase: filtered and input tone stay aligned sample for sample.
  double worst = 0;
  for (std::size_t i = a; i < b; ++i) worst = std::max(worst, std::abs(out.samples[i] - tone.samples[i]));
  CHECK(worst < 0.05);

  const auto drift = sine(0.1, 125.0, 60.0);
  const auto residual = bandpass(drift, 1.0, 15.0);
  const std::size_t n = drift.samples.size();
  CHECK(rms(residual.samples, 0, n) < 0.05 * rms(drift.samples, 0, n));

  SignalRecord zero;
  zero.fs = 125.0;
  zero.samples.assign(500, 0.0);
  for (double v : bandpass(zero, 1.0, 15.0).samples) CHECK(v == 0.0);
  CHECK_THROWS_AS(bandpass(zero, 20.0, 70.0), ConfigError);
}

TEST_CASE("tokenize_window examples") {
  const std::vector<double> x = {0, 5, 10};
  const auto w = tokenize_window(x);
  CHECK(w.tokens == std::vector<int>{0, 50, 100});
  CHECK(w.scale_min == 0.0);
  CHECK(w.scale_max == 10.0);

  const std::vector<double> flat(37, 3.25);
  const auto f = tokenize_window(flat);
  CHECK(f.tokens == std::vector<int>(37, 50));

  // Half steps round away from zero: 0.5% of span -> token 0.5 -> 1.
  const std::vector<double> half = {0.0, 0.5, 1.5, 100.0};
  CHECK(tokenize_window(half).tokens == std::vector<int>{0, 1, 2, 100});

  const auto s = sine(1.0, 50.0, 10.0);
  const auto t = tokenize_window(s.samples);
  CHECK(*std::min_element(t.tokens.begin(), t.tokens.end()) == 0);
  CHECK(*std::max_element(t.tokens.begin(), t.tokens.end()) == 100);

  CHECK_THROWS_AS(tokenize_window(std::vector<double>(501, 1.0)), ContextOverflowError);
  CHECK_THROWS_AS(tokenize_window(std::vector<double>{1.0, NAN}), DataError);
}

TEST_CASE("tokenizer properties on random windows") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const auto len = static_cast<std::size_t>(2 + rng.uniform_int(499));
    std::vector<double> x(len);
    for (auto& v : x) v = rng.normal(0.0, 1.0 + 10.0 * rng.uniform());
    const auto w = tokenize_window(x);
    for (int t : w.tokens) {
      CHECK(t >= 0);
      CHECK(t <= 100);
    }
    const double a = 0.01 + 100.0 * rng.uniform();
    const double b = rng.normal(0.0, 50.0);
    std::vector<double> y(len);
    for (std::size_t i = 0; i < len; ++i) y[i] = a * x[i] + b;
    CHECK(tokenize_window(y).tokens == w.tokens);

    const auto back = detokenize(w);
    const double bound = (w.scale_max - w.scale_min) / 200.0;
    for (std::size_t i = 0; i < len; ++i) CHECK(std::abs(back[i] - x[i]) <= bound * (1 + 1e-12));
    // Detokenized windows keep min and max, so re-tokenizing is a fixed point.
    CHECK(tokenize_window(back).tokens == w.tokens);
  }
}

TEST_CASE("detokenize scan over every token value") {
  TokenWindow w;
  w.scale_min = -1.0;
  w.scale_max = 1.0;
  w.tokens = {0, 100};
  CHECK(detokenize(w) == std::vector<double>{-1.0, 1.0});

  // Ramp sampled between adjacent levels: error never exceeds half a step.
  std::vector<double> ramp;
  for (int i = 0; i <= 1000; ++i) ramp.push_back(3.0 + 7.0 * i / 1000.0);
  for (std::size_t start = 0; start + 500 <= ramp.size(); start += 250) {
    std::span<const double> win(ramp.data() + start, 500);
    const auto t = tokenize_window(win);
    const auto back = detokenize(t);
    std::set<int> levels(t.tokens.begin(), t.tokens.end());
    CHECK(levels.size() == 101);
    for (std::size_t i = 0; i < 500; ++i) {
      CHECK(std::abs(back[i] - win[i]) <= (t.scale_max - t.scale_min) / 200.0 + 1e-12);
    }
  }
}

TEST_CASE("window counts") {
  CHECK(window_count(1000, 500, 50) == 11);
  CHECK(window_count(499, 500, 50) == 0);
  CHECK(window_count(500, 500, 50) == 1);
  Rng rng(22);
  for (int i = 0; i < 500; ++i) {
    const long len = static_cast<long>(500 + rng.uniform_int(20000));
    long brute = 0;
    for (long s = 0; s + 500 <= len; s += 50) ++brute;
    CHECK(window_count(len, 500, 50) == brute);
    CHECK(window_count(len, 500, 50) == (len - 500) / 50 + 1);
  }
  CHECK_THROWS_AS(window_count(10, 5, 0), ConfigError);
}

TEST_CASE("fine-tune dataset and LOSO folds") {
  DatasetSpec spec;
  spec.target_fs = 50.0;
  for (int s = 0; s < 35; ++s) {
    auto r = sine(1.0 + 0.01 * s, 50.0, 20.0);
    r.subject_id = "S" + std::to_string(s);
    r.label = s % 2;
    spec.records.push_back(r);
  }
  const auto data = build_finetune_dataset(spec);
  CHECK(data.size() == 35 * 11);
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(data.labels[i] == spec.records[data.record_index[i]].label.value());
    CHECK(data.windows[i].size() == 500);
  }
  const auto folds = loso_folds(data);
  REQUIRE(folds.size() == 35);
  std::set<std::string> held;
  for (const auto& f : folds) {
    held.insert(f.held_out);
    CHECK(f.test.size() == 11);
    CHECK(f.train.size() + f.test.size() == data.size());
    for (auto i : f.test) CHECK(data.subject_ids[i] == f.held_out);
    for (auto i : f.train) CHECK(data.subject_ids[i] != f.held_out);
  }
  CHECK(held.size() == 35);

  spec.records[3].label.reset();
  CHECK_THROWS_AS(build_finetune_dataset(spec), DataError);
}

TEST_CASE("fine-tune windows are filtered then resampled") {
  DatasetSpec spec;
  spec.target_fs = 50.0;
  spec.bandpass = std::make_pair(1.0, 15.0);
  auto r = sine(2.0, 125.0, 30.0, 1.0, 40.0);
  r.label = 1;
  spec.records.push_back(r);
  const auto data = build_finetune_dataset(spec);
  CHECK(data.size() == static_cast<std::size_t>(window_count(1500, 500, 50)));
  const auto rec = preprocess(r, spec);
  CHECK(rec.processing.size() == 2);
  CHECK(rec.processing[0]["op"] == "bandpass");
  CHECK(rec.processing[1]["op"] == "resample");
  // The offset is gone: the window is centred on zero.
  CHECK(std::abs(data.scales[5].first + data.scales[5].second) < 0.05);
}

TEST_CASE("pre-training streams split at record boundaries") {
  DatasetSpec spec;
  for (int s = 0; s < 10; ++s) {
    auto r = sine(1.0, 50.0, 60.0 + s);
    r.subject_id = "P" + std::to_string(s);
    spec.records.push_back(r);
  }
  const auto data = build_pretrain_dataset(spec);
  CHECK(data.train_subjects.size() == 9);
  CHECK(data.val_subjects == std::vector<std::string>{"P9"});
  for (const auto& s : data.train_subjects) CHECK(s != "P9");
  CHECK(data.val.size() == 3000);  // 69 s at 50 Hz: six whole windows
  CHECK(data.train.size() % 500 == 0);

  Rng rng(3);
  const auto batch = sample_lm_batch(data.train, 4, 500, rng);
  CHECK(batch.inputs.rows() == 4);
  for (Index b = 0; b < 4; ++b) {
    for (Index t = 0; t + 1 < 500; ++t) CHECK(batch.targets[b * 500 + t] == batch.inputs(b, t + 1));
  }
  spec.records.resize(1);
  CHECK_THROWS_AS(build_pretrain_dataset(spec), DataError);
}

TEST_CASE("signal files and dataset manifest round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "pulseformer_test_io";
  std::filesystem::remove_all(dir);
  auto r = sine(1.0, 50.0, 4.0, 0.3);
  r.subject_id = "S01";
  r.label = 1;
  r.modality = Modality::ecg;
  r.beats = {0.5, 1.5};
  auto r2 = r;
  r2.subject_id = "S02";
  r2.label = 0;
  const auto f1 = write_signal(r, dir, "S01", SampleFormat::csv);
  const auto f2 = write_signal(r2, dir, "S02", SampleFormat::f32);
  write_dataset_manifest(dir, {"S01.csv", "S02.f32"}, {r, r2});

  const auto back = read_signal(f1);
  CHECK(back.samples == r.samples);  // shortest round-trip text is exact
  CHECK(back.fs == 50.0);
  CHECK(back.modality == Modality::ecg);
  CHECK(back.label == 1);
  CHECK(back.beats == r.beats);

  const auto back2 = read_signal(f2);
  REQUIRE(back2.samples.size() == r2.samples.size());
  for (std::size_t i = 0; i < r2.samples.size(); ++i) {
    CHECK(back2.samples[i] == static_cast<double>(static_cast<float>(r2.samples[i])));
  }

  const auto all = read_dataset(dir);
  REQUIRE(all.size() == 2);
  CHECK(all[1].subject_id == "S02");
  CHECK(all[1].label == 0);

  {
    std::ofstream bad(dir / "S01.csv", std::ios::app);
    bad << "oops\n";
  }
  CHECK_THROWS_AS(read_signal(f1), DataError);
  CHECK_THROWS_AS(read_dataset(dir / "missing"), DataError);
  std::filesystem::remove_all(dir);
}
