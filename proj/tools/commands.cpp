#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <set>

#include "figures.hpp"
#include "pulseformer/checkpoint.hpp"
#include "pulseformer/dataset.hpp"
#include "pulseformer/generation.hpp"
#include "pulseformer/interpretability.hpp"
#include "pulseformer/synth.hpp"
#include "pulseformer/training.hpp"

namespace pulseformer::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void say(const std::string& message) { std::cerr << message << std::endl; }

json synth_section(int subjects, const std::string& rhythm, double duration) {
  return {{"subjects", subjects}, {"modality", "ppg"}, {"rhythm", rhythm},
          {"fs", 125.0},          {"duration", duration}, {"format", "csv"}};
}

// target_fs and bandpass left null follow the modality: PPG 1-15 Hz then
// 50 Hz, ECG 1-45 Hz then 100 Hz. An empty bandpass array disables filtering.
json data_section() {
  return {{"path", nullptr}, {"target_fs", nullptr},   {"bandpass", nullptr},
          {"window_len", 500}, {"window_shift", 50}, {"split_fraction", 0.9}};
}

json train_section(int batch, int iters, int eval_interval) {
  TrainRunConfig t;
  t.batch_size = batch;
  t.max_iters = iters;
  t.eval_interval = eval_interval;
  json j = t;
  j.erase("seed");  // the top-level seed drives everything
  return j;
}

json attention_section() {
  return {{"checkpoint", nullptr}, {"tuned", nullptr},       {"record", 0},     {"start", 0},
          {"layers", json::array()}, {"heads", json::array()}, {"reference", nullptr},
          {"tolerance", 2},        {"max_windows", 50},      {"min_distance", 15}, {"rel_height", 0.5},
          {"irregular_tolerance", 0.2}};
}

std::uint64_t seed_of(const json& cfg) { return cfg.at("seed").get<std::uint64_t>(); }

TrainRunConfig train_config(const json& cfg) {
  auto t = cfg.at("train").get<TrainRunConfig>();
  t.seed = seed_of(cfg);
  return t;
}

CohortConfig cohort_config(const json& cfg) {
  const auto& s = cfg.at("synth");
  CohortConfig c;
  c.subjects = s.at("subjects").get<int>();
  c.modality = modality_from_string(s.at("modality").get<std::string>());
  c.mix = mix_from_string(s.at("rhythm").get<std::string>());
  c.fs = s.at("fs").get<double>();
  c.duration = s.at("duration").get<double>();
  c.seed = seed_of(cfg);
  return c;
}

std::vector<SignalRecord> load_records(Run& run) {
  const auto& cfg = run.config();
  const auto& path = cfg.at("data").at("path");
  if (!path.is_null()) {
    const fs::path p = path.get<std::string>();
    if (!fs::exists(p)) throw UsageError("data path '" + p.string() + "' does not exist");
    run.input(p);
    run.results()["data"] = p.string();
    return read_dataset(p);
  }
  const auto cohort = cohort_config(cfg);
  say("no --data given: synthesizing " + std::to_string(cohort.subjects) + " " + to_string(cohort.modality) +
      " subjects");
  run.results()["data"] = "synthetic";
  return build_cohort(cohort);
}

DatasetSpec dataset_spec(const json& cfg, std::vector<SignalRecord> records) {
  const auto& d = cfg.at("data");
  const bool ecg = !records.empty() && records.front().modality == Modality::ecg;
  DatasetSpec spec;
  spec.window_len = d.at("window_len").get<int>();
  spec.window_shift = d.at("window_shift").get<int>();
  spec.split_fraction = d.at("split_fraction").get<double>();
  spec.target_fs = d.at("target_fs").is_null() ? (ecg ? 100.0 : 50.0) : d.at("target_fs").get<double>();
  const auto& bp = d.at("bandpass");
  if (bp.is_null()) {
    spec.bandpass = std::make_pair(1.0, ecg ? 45.0 : 15.0);
  } else if (!bp.empty()) {
    spec.bandpass = std::make_pair(bp.at(0).get<double>(), bp.at(1).get<double>());
  }
  spec.records = std::move(records);
  return spec;
}

std::vector<SignalRecord> prepared_records(Run& run) {
  const auto spec = dataset_spec(run.config(), load_records(run));
  spec.validate();
  std::vector<SignalRecord> out;
  for (const auto& r : spec.records) out.push_back(preprocess(r, spec));
  return out;
}

fs::path checkpoint_stem(const json& value) {
  fs::path stem = value.get<std::string>();
  if (stem.extension() == ".json" || stem.extension() == ".bin") stem.replace_extension();
  if (!fs::exists(with_suffix(stem, ".json")) || !fs::exists(with_suffix(stem, ".bin"))) {
    throw UsageError("checkpoint '" + stem.string() + "' not found (expected .json and .bin)");
  }
  return stem;
}

ParamStore<float> load_model(Run& run, const json& value, HeadKind head, const std::string& flag) {
  if (value.is_null()) throw UsageError("a checkpoint is required (" + flag + ")");
  const auto stem = checkpoint_stem(value);
  run.checkpoint_input(stem);
  auto params = load_checkpoint<float>(stem);
  if (params.head() != head) {
    throw ContractError("checkpoint '" + stem.string() + "' has a " + to_string(params.head()) + " head, expected " +
                        to_string(head));
  }
  return params;
}

// Base language model for fine-tuning: the checkpoint when given, else a
// fresh initialization of the configured architecture.
ParamStore<float> base_model(Run& run, const json& value) {
  if (!value.is_null()) {
    run.results()["base_model"] = value;
    return load_model(run, value, HeadKind::lm, "--checkpoint");
  }
  say("no base checkpoint given: fine-tuning from a fresh initialization");
  run.results()["base_model"] = "fresh initialization";
  Rng rng(seed_of(run.config()));
  return init_params<float>(run.config().at("model").get<ModelConfig>(), HeadKind::lm, rng);
}

const SignalRecord& pick_record(const std::vector<SignalRecord>& records, long index) {
  if (index < 0 || index >= static_cast<long>(records.size())) {
    throw UsageError("record " + std::to_string(index) + " out of range (dataset holds " +
                     std::to_string(records.size()) + ")");
  }
  return records[static_cast<std::size_t>(index)];
}

std::span<const double> segment(const SignalRecord& r, long start, long length) {
  if (start < 0 || start + length > static_cast<long>(r.samples.size())) {
    throw UsageError("record '" + r.subject_id + "' holds " + std::to_string(r.samples.size()) +
                     " samples after preprocessing; [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") does not fit");
  }
  return std::span<const double>(r.samples).subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(length));
}

// Beat positions in window samples: every beat inside [0, length) plus the
// nearest one on each side, so intervals crossing the edges are complete.
std::vector<double> window_beats(const SignalRecord& r, long start, long length) {
  std::vector<double> all;
  for (double t : r.beats) all.push_back(t * r.fs - static_cast<double>(start));
  std::vector<double> out;
  for (std::size_t k = 0; k < all.size(); ++k) {
    const bool inside = all[k] >= 0 && all[k] <= static_cast<double>(length - 1);
    const bool before = k + 1 < all.size() && all[k] < 0 && all[k + 1] >= 0;
    const bool after = k > 0 && all[k] > static_cast<double>(length - 1) && all[k - 1] <= static_cast<double>(length - 1);
    if (inside || before || after) out.push_back(all[k]);
  }
  return out;
}

struct AttnWindow {
  const SignalRecord* record;
  long start;
  TokenWindow window;
};

AttnWindow attention_window(const std::vector<SignalRecord>& records, const json& a, long length) {
  const auto& r = pick_record(records, a.at("record").get<long>());
  const long start = a.at("start").get<long>();
  return {&r, start, tokenize_window(segment(r, start, length), r.fs, r.modality)};
}

std::vector<int> layer_list(const json& list, int available, const std::string& what) {
  std::vector<int> out;
  for (const auto& v : list) {
    const int k = v.get<int>();
    if (k < 1 || k > available) {
      throw UsageError(what + " " + std::to_string(k) + " out of range 1.." + std::to_string(available));
    }
    out.push_back(k);
  }
  if (out.empty()) {
    out.resize(static_cast<std::size_t>(available));
    std::iota(out.begin(), out.end(), 1);
  }
  return out;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

json default_config(const std::string& c) {
  json cfg = {{"seed", 1}};
  if (c == "synth") {
    cfg["synth"] = synth_section(10, "regular", 300.0);
  } else if (c == "tokenize") {
    cfg["data"] = data_section();
    cfg["synth"] = synth_section(1, "regular", 60.0);
  } else if (c == "pretrain") {
    cfg["model"] = ModelConfig{};
    cfg["train"] = train_section(64, 500000, 2000);
    cfg["data"] = data_section();
    cfg["synth"] = synth_section(10, "regular", 300.0);
    cfg["pretrain"] = {{"init", nullptr}};
  } else if (c == "generate") {
    cfg["data"] = data_section();
    cfg["synth"] = synth_section(1, "regular", 60.0);
    cfg["generate"] = {{"checkpoint", nullptr}, {"record", 0}, {"start", 0}, {"steps", 250}, {"temperature", 1.0}};
  } else if (c == "eval-horizon") {
    cfg["data"] = data_section();
    cfg["synth"] = synth_section(2, "regular", 60.0);
    cfg["horizon"] = {{"checkpoint", nullptr}, {"context", nullptr}, {"horizon", 250}, {"shift", 750},
                      {"rollouts", 1},         {"temperature", 1.0}, {"batch", 8},    {"max_windows", 0}};
  } else if (c == "finetune" || c == "loso") {
    cfg["model"] = ModelConfig{};
    cfg["train"] = train_section(128, 1000, 1000);
    cfg["data"] = data_section();
    cfg["synth"] = synth_section(12, "mixed", 300.0);
    if (c == "finetune") {
      cfg["finetune"] = {{"checkpoint", nullptr}, {"hold_out", nullptr}};
    } else {
      cfg["loso"] = {{"checkpoint", nullptr}};
    }
  } else if (c.rfind("attn-", 0) == 0) {
    cfg["data"] = data_section();
    cfg["synth"] = synth_section(1, c == "attn-delta" ? "af" : "regular", 60.0);
    cfg["attention"] = attention_section();
  } else if (c == "export-figure") {
    cfg["export"] = {{"csv", nullptr}, {"kind", "auto"}};
  } else {
    throw UsageError("unknown command '" + c + "'");
  }
  return cfg;
}

void validate_config(const std::string& command, const json& cfg) {
  seed_of(cfg);
  // Input paths are checked here so a bad path fails before a run directory exists.
  struct PathKey {
    const char* pointer;
    bool checkpoint;
    bool required;
  };
  const PathKey keys[] = {{"/data/path", false, false},
                          {"/pretrain/init", true, false},
                          {"/generate/checkpoint", true, true},
                          {"/horizon/checkpoint", true, true},
                          {"/finetune/checkpoint", true, false},
                          {"/loso/checkpoint", true, false},
                          {"/attention/checkpoint", true, true},
                          {"/attention/tuned", true, command == "attn-delta"},
                          {"/export/csv", false, true}};
  for (const auto& k : keys) {
    const json::json_pointer ptr(k.pointer);
    if (!cfg.contains(ptr)) continue;
    const auto& v = cfg[ptr];
    if (v.is_null()) {
      if (k.required) throw UsageError(std::string("missing required input ") + k.pointer);
      continue;
    }
    if (k.checkpoint) {
      checkpoint_stem(v);
    } else if (!fs::exists(v.get<std::string>())) {
      throw UsageError("input '" + v.get<std::string>() + "' does not exist");
    }
  }
  if (cfg.contains("model")) cfg["model"].get<ModelConfig>().validate();
  if (cfg.contains("train")) train_config(cfg).validate();
  if (cfg.contains("synth")) {
    const auto c = cohort_config(cfg);
    require(c.subjects >= 1, "synth.subjects must be >= 1");
    require(c.fs > 0 && c.duration > 0, "synth.fs and synth.duration must be positive");
    const auto format = cfg["synth"].at("format").get<std::string>();
    require(format == "csv" || format == "f32", "synth.format must be csv or f32");
    if (command == "pretrain" && cfg["data"].at("path").is_null()) {
      require(c.subjects >= 2, "pre-training needs at least 2 subjects for the train/val split");
    }
  }
  if (cfg.contains("data")) {
    const auto& d = cfg["data"];
    DatasetSpec probe = dataset_spec(cfg, {});
    probe.records.resize(1);
    probe.validate();
    const auto& bp = d.at("bandpass");
    require(bp.is_null() || bp.empty() || (bp.size() == 2 && bp[0].get<double>() > 0 && bp[1].get<double>() > bp[0].get<double>()),
            "data.bandpass must be null, [] or [low, high] with 0 < low < high");
    if (!d.at("path").is_null()) d.at("path").get<std::string>();
    if ((command == "finetune" || command == "loso") && cfg.contains("model")) {
      require(probe.window_len <= cfg["model"].at("max_context").get<int>(),
              "data.window_len exceeds model.max_context");
    }
  }
  if (cfg.contains("generate")) {
    const auto& g = cfg["generate"];
    require(g.at("steps").get<int>() >= 1, "generate.steps must be >= 1");
    require(g.at("temperature").get<double>() >= 0, "generate.temperature must be >= 0");
  }
  if (cfg.contains("horizon")) {
    const auto& h = cfg["horizon"];
    require(h.at("horizon").get<int>() >= 1 && h.at("shift").get<int>() >= 1 && h.at("rollouts").get<int>() >= 1 &&
                h.at("batch").get<int>() >= 1 && h.at("max_windows").get<int>() >= 0,
            "horizon sizes must be positive");
    require(h.at("context").is_null() || h.at("context").get<int>() >= 1, "horizon.context must be >= 1");
    require(h.at("temperature").get<double>() >= 0, "horizon.temperature must be >= 0");
  }
  if (cfg.contains("attention")) {
    const auto& a = cfg["attention"];
    require(a.at("tolerance").get<int>() >= 0, "attention.tolerance must be >= 0");
    require(a.at("min_distance").get<int>() >= 1, "attention.min_distance must be >= 1");
    const double h = a.at("rel_height").get<double>();
    require(h >= 0 && h <= 1, "attention.rel_height must lie in [0, 1]");
    require(a.at("irregular_tolerance").get<double>() > 0, "attention.irregular_tolerance must be positive");
    require(a.at("max_windows").get<int>() >= 0, "attention.max_windows must be >= 0");
  }
}

// ---- commands ---------------------------------------------------------------

void run_synth(Run& run) {
  const auto cohort = cohort_config(run.config());
  const auto format =
      run.config()["synth"]["format"].get<std::string>() == "f32" ? SampleFormat::f32 : SampleFormat::csv;
  run.phase("synthesize");
  const auto records = build_cohort(cohort);
  std::vector<std::string> files;
  int af = 0;
  for (const auto& r : records) {
    files.push_back(write_signal(r, run.dir(), r.subject_id, format).filename().string());
    af += r.label.value_or(0);
  }
  write_dataset_manifest(run.dir(), files, records);
  run.results()["subjects"] = records.size();
  run.results()["af_subjects"] = af;
}

void run_tokenize(Run& run) {
  auto spec = dataset_spec(run.config(), load_records(run));
  spec.validate();
  run.phase("tokenize");
  std::ofstream out(run.path("windows.csv"));
  out.precision(9);
  out << "record,subject,label,start,scale_min,scale_max,tokens\n";
  std::size_t total = 0;
  for (std::size_t i = 0; i < spec.records.size(); ++i) {
    const auto rec = preprocess(spec.records[i], spec);
    const long n = window_count(static_cast<long>(rec.samples.size()), spec.window_len, spec.window_shift);
    for (long k = 0; k < n; ++k) {
      const long s = k * spec.window_shift;
      const auto w = tokenize_window(segment(rec, s, spec.window_len), rec.fs, rec.modality);
      out << i << ',' << rec.subject_id << ',' << (rec.label ? std::to_string(*rec.label) : "") << ',' << s << ','
          << w.scale_min << ',' << w.scale_max << ',';
      for (std::size_t t = 0; t < w.tokens.size(); ++t) out << (t ? " " : "") << w.tokens[t];
      out << '\n';
      ++total;
    }
  }
  run.results()["windows"] = total;
}

void run_pretrain(Run& run) {
  const auto& cfg = run.config();
  const auto train = train_config(cfg);
  const auto spec = dataset_spec(cfg, load_records(run));
  run.phase("tokenize");
  const auto data = build_pretrain_dataset(spec);
  run.results()["train_tokens"] = data.train.size();
  run.results()["val_tokens"] = data.val.size();
  run.results()["train_subjects"] = data.train_subjects;
  run.results()["val_subjects"] = data.val_subjects;

  Rng rng(train.seed);
  const auto& init = cfg.at("pretrain").at("init");
  auto params = init.is_null() ? init_params<float>(cfg.at("model").get<ModelConfig>(), HeadKind::lm, rng)
                               : load_model(run, init, HeadKind::lm, "--init");
  std::set<std::string> all;
  for (const auto& t : params.tensors()) all.insert(t.name);
  params.set_trainable(all);
  run.results()["parameters"] = params.trainable_count();
  say("pre-training " + std::to_string(params.trainable_count()) + " parameters for " +
      std::to_string(train.max_iters) + " iterations");

  run.phase("train");
  const auto result = pretrain(std::move(params), data, train, run.path("checkpoints"), say);
  run.phase("write");
  CheckpointMeta meta;
  meta.seed = train.seed;
  meta.step = train.max_iters;
  meta.extra = {{"best_iter", result.best_iter}, {"best_val_loss", result.best_val}};
  save_checkpoint(result.params, run.path("model"), meta);
  write_eval_csv(run.path("loss.csv"), result.evals);
  write_loss_csv(run.path("iter_loss.csv"), result.iter_loss);
  write_loss_svg(run.path("loss.svg"), result.iter_loss, result.evals);
  run.results()["best_iter"] = result.best_iter;
  run.results()["best_val_loss"] = result.best_val;
  if (!result.evals.empty()) {
    run.results()["final_train_loss"] = result.evals.back().train_loss;
    run.results()["final_val_loss"] = result.evals.back().val_loss;
  }
}

void run_generate(Run& run) {
  const auto& g = run.config().at("generate");
  const auto params = load_model(run, g.at("checkpoint"), HeadKind::lm, "--checkpoint");
  const auto records = prepared_records(run);
  const long record = g.at("record").get<long>();
  const auto& r = pick_record(records, record);
  const long start = g.at("start").get<long>();
  const long context = params.config().max_context;
  const int steps = g.at("steps").get<int>();
  segment(r, start, context);
  const long truth = std::min<long>(steps, static_cast<long>(r.samples.size()) - start - context);
  const auto span = segment(r, start, context + truth);
  const auto [lo, hi] = std::minmax_element(span.begin(), span.end());

  HorizonWindow w;
  w.subject_id = r.subject_id;
  w.record = static_cast<std::size_t>(record);
  w.start = static_cast<std::size_t>(start);
  w.scale_min = *lo;
  w.scale_max = *hi;
  w.context = quantize(span.first(static_cast<std::size_t>(context)), *lo, *hi);
  w.truth = quantize(span.subspan(static_cast<std::size_t>(context)), *lo, *hi);

  run.phase("generate");
  Rng rng(seed_of(run.config()));
  const auto prediction = generate(params, w.context, steps, rng, g.at("temperature").get<double>());
  write_rollout_csv(run.path("rollout.csv"), w, prediction);
  write_rollout_svg(run.path("rollout.svg"), w, prediction);
  run.results()["generated"] = prediction.size();
  run.results()["truth"] = w.truth.size();
}

void run_eval_horizon(Run& run) {
  const auto& h = run.config().at("horizon");
  const auto params = load_model(run, h.at("checkpoint"), HeadKind::lm, "--checkpoint");
  const auto records = prepared_records(run);
  const int context = h.at("context").is_null() ? params.config().max_context : h.at("context").get<int>();
  auto windows = horizon_windows(records, context, h.at("horizon").get<int>(), h.at("shift").get<int>());
  const auto cap = h.at("max_windows").get<std::size_t>();
  if (cap > 0 && windows.size() > cap) windows.resize(cap);
  if (windows.empty()) throw DataError("no record is long enough for one context + horizon window");

  HorizonConfig hc;
  hc.temperature = h.at("temperature").get<double>();
  hc.rollouts = h.at("rollouts").get<int>();
  hc.batch = h.at("batch").get<int>();
  hc.seed = seed_of(run.config());
  say("evaluating " + std::to_string(windows.size()) + " windows x " + std::to_string(hc.rollouts) + " rollouts");
  run.phase("generate");
  const auto result = evaluate_horizon(params, windows, hc, [&](std::size_t done) {
    say("  " + std::to_string(done) + " / " + std::to_string(windows.size() * static_cast<std::size_t>(hc.rollouts)));
  });
  run.phase("write");
  write_horizon_csv(run.path("horizon.csv"), result.stats);
  write_horizon_svg(run.path("horizon.svg"), result.stats);
  write_rollout_csv(run.path("rollout_example.csv"), windows.front(), result.predictions.front());
  write_rollout_svg(run.path("rollout_example.svg"), windows.front(), result.predictions.front());
  run.results()["windows"] = windows.size();
  run.results()["median_first_step"] = result.stats.median.front();
  run.results()["median_last_step"] = result.stats.median.back();
}

void run_finetune(Run& run) {
  const auto& cfg = run.config();
  const auto train = train_config(cfg);
  const auto base = base_model(run, cfg.at("finetune").at("checkpoint"));
  const auto spec = dataset_spec(cfg, load_records(run));
  if (spec.window_len > base.config().max_context) {
    throw ConfigError("data.window_len exceeds the base model's context");
  }
  run.phase("tokenize");
  const auto data = build_finetune_dataset(spec);
  const auto& hold = cfg.at("finetune").at("hold_out");
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const bool held = !hold.is_null() && data.subject_ids[i] == hold.get<std::string>();
    (held ? test_idx : train_idx).push_back(i);
  }
  if (!hold.is_null() && test_idx.empty()) {
    throw UsageError("hold-out subject '" + hold.get<std::string>() + "' is not in the dataset");
  }

  run.phase("trunk");
  const auto cache = compute_trunk_cache(base, data, say);
  run.phase("train");
  const auto result = finetune_af(base, data, train_idx, train, &cache, say);
  run.phase("write");
  CheckpointMeta meta;
  meta.seed = train.seed;
  meta.step = train.max_iters;
  save_checkpoint(result.params, run.path("classifier"), meta);
  write_loss_csv(run.path("finetune_loss.csv"), result.loss);
  write_loss_svg(run.path("finetune_loss.svg"), result.loss, {});
  run.results()["trainable_parameters"] = result.params.trainable_count();
  run.results()["train_windows"] = train_idx.size();
  run.results()["initial_bce"] = result.loss.front();
  run.results()["final_bce"] = result.loss.back();

  if (!test_idx.empty()) {
    const auto scores = score_windows(result.params, data, test_idx, &cache);
    std::ofstream out(run.path("scores.csv"));
    out.precision(9);
    out << "window,subject,label,score\n";
    std::vector<int> labels;
    for (std::size_t k = 0; k < test_idx.size(); ++k) {
      const auto i = test_idx[k];
      out << i << ',' << data.subject_ids[i] << ',' << data.labels[i] << ',' << scores[k] << '\n';
      labels.push_back(data.labels[i]);
    }
    const double a = auc(scores, labels);
    run.results()["held_out_auc"] = std::isnan(a) ? json(nullptr) : json(a);
    run.results()["held_out_mean_score"] = std::accumulate(scores.begin(), scores.end(), 0.0) / scores.size();
  }
}

void run_loso(Run& run) {
  const auto& cfg = run.config();
  const auto train = train_config(cfg);
  const auto base = base_model(run, cfg.at("loso").at("checkpoint"));
  const auto spec = dataset_spec(cfg, load_records(run));
  if (spec.window_len > base.config().max_context) {
    throw ConfigError("data.window_len exceeds the base model's context");
  }
  run.phase("tokenize");
  const auto data = build_finetune_dataset(spec);
  say(std::to_string(data.size()) + " windows from " + std::to_string(data.subjects().size()) + " subjects");
  run.phase("folds");
  const auto report = loso_evaluate(base, data, train, say);
  run.phase("write");
  write_folds_csv(run.path("folds.csv"), report);
  write_auc_summary_csv(run.path("auc.csv"), report);
  write_scores_csv(run.path("scores.csv"), report);
  run.results()["folds"] = report.folds.size();
  run.results()["pooled_auc"] = report.pooled_auc;
  run.results()["subject_auc"] = report.subject_auc;
  json seconds = json::array();
  for (const auto& f : report.folds) seconds.push_back(f.seconds);
  run.results()["fold_seconds"] = seconds;
}

void run_attn_aggregate(Run& run) {
  const auto& a = run.config().at("attention");
  const auto params = load_model(run, a.at("checkpoint"), HeadKind::lm, "--checkpoint");
  const auto records = prepared_records(run);
  const auto w = attention_window(records, a, params.config().max_context);
  run.phase("forward");
  const auto record = forward_with_attention(params, w.window.tokens).second;
  const auto layers = layer_list(a.at("layers"), record.layers(), "layer");
  std::vector<Vector<double>> per_layer;
  for (int l : layers) per_layer.push_back(aggregate_final_row(record, l));
  write_aggregate_csv(run.path("aggregate.csv"), w.window.tokens, per_layer, layers);
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const std::string l = std::to_string(layers[k]);
    write_attention_svg(run.path("attention_layer" + l + ".svg"), "Layer " + l + " aggregate attention",
                        w.window.tokens, per_layer[k]);
  }
  run.results()["layers"] = layers;
}

void run_attn_lookback(Run& run) {
  const auto& cfg = run.config();
  const auto& a = cfg.at("attention");
  const auto params = load_model(run, a.at("checkpoint"), HeadKind::lm, "--checkpoint");
  const auto records = prepared_records(run);
  const long length = params.config().max_context;
  const long shift = cfg.at("data").at("window_shift").get<long>();
  const auto cap = a.at("max_windows").get<std::size_t>();
  std::vector<FinalRows> windows;
  run.phase("forward");
  for (const auto& r : records) {
    const long n = window_count(static_cast<long>(r.samples.size()), length, shift);
    for (long k = 0; k < n && (cap == 0 || windows.size() < cap); ++k) {
      const auto w = tokenize_window(segment(r, k * shift, length), r.fs, r.modality);
      windows.push_back(capture_final_rows(params, w.tokens));
    }
  }
  if (windows.empty()) throw DataError("no record is long enough for one context window");
  say("look-back over " + std::to_string(windows.size()) + " windows");
  const auto table = lookback_distance(windows, records.front().fs);
  write_lookback_csv(run.path("lookback.csv"), table);
  write_lookback_svg(run.path("lookback.svg"), table);
  json means = json::array();
  for (const auto& row : table) means.push_back(row.mean);
  run.results()["windows"] = windows.size();
  run.results()["mean_s"] = means;
}

void run_attn_similarity(Run& run) {
  const auto& a = run.config().at("attention");
  const auto params = load_model(run, a.at("checkpoint"), HeadKind::lm, "--checkpoint");
  const auto records = prepared_records(run);
  const auto w = attention_window(records, a, params.config().max_context);
  const Index reference = a.at("reference").is_null() ? rising_reference(w.window) : a.at("reference").get<Index>();
  if (reference < 0 || reference >= static_cast<Index>(w.window.tokens.size())) {
    throw UsageError("reference position " + std::to_string(reference) + " lies outside the window");
  }
  const auto selected = select_slope_tokens(w.window, reference, a.at("tolerance").get<int>());
  run.phase("forward");
  const auto trace = similarity_trace(params, w.window.tokens, selected, reference);
  write_similarity_csv(run.path("similarity.csv"), trace);
  write_similarity_svg(run.path("similarity.svg"), trace);
  const int last = trace.stages() - 1;
  auto finite = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  run.results()["reference"] = reference;
  run.results()["rising_tokens"] = std::count_if(selected.begin(), selected.end(),
                                                 [](const SlopeToken& t) { return t.slope == Slope::rising; });
  run.results()["falling_tokens"] = std::count_if(selected.begin(), selected.end(),
                                                  [](const SlopeToken& t) { return t.slope == Slope::falling; });
  run.results()["final_rising_mean"] = finite(trace.class_mean(Slope::rising, last));
  run.results()["final_falling_mean"] = finite(trace.class_mean(Slope::falling, last));
}

void run_attn_heads(Run& run) {
  const auto& a = run.config().at("attention");
  const auto params = load_model(run, a.at("checkpoint"), HeadKind::lm, "--checkpoint");
  const auto records = prepared_records(run);
  const Index n = params.config().max_context;
  const auto& r = pick_record(records, a.at("record").get<long>());
  const long start = a.at("start").get<long>();
  const auto samples = segment(r, start, 2 * n - 1);
  const auto heads = layer_list(a.at("heads"), params.config().n_heads, "head");

  run.phase("shift-and-add");
  say("shift-and-add over " + std::to_string(n) + " windows");
  auto maps = shift_and_add_samples(params, samples, n);
  const auto min_distance = a.at("min_distance").get<Index>();
  const auto rel_height = a.at("rel_height").get<double>();
  for (auto& m : maps) m.peaks = find_attention_peaks(m.weights, min_distance, rel_height);
  const auto context = tokenize_window(samples.first(static_cast<std::size_t>(n)), r.fs, r.modality).tokens;
  write_head_maps_csv(run.path("head_maps.csv"), maps);
  write_head_maps_svg(run.path("head_maps.svg"), context, maps, heads);
  run.results()["peaks"] = [&] {
    json p = json::array();
    for (const auto& m : maps) p.push_back(m.peaks);
    return p;
  }();

  if (r.beats.empty()) return;
  // Distance from every peak to the nearest beat (systolic peak for PPG,
  // R peak for ECG) inside the first window.
  std::vector<double> beats;
  for (double b : window_beats(r, start, n))
    if (b >= 0 && b <= static_cast<double>(n - 1)) beats.push_back(b);
  std::ofstream out(run.path("peak_alignment.csv"));
  out.precision(9);
  out << "head,peak,nearest_beat,distance\n";
  json aligned = json::array();
  for (std::size_t h = 0; h < maps.size(); ++h) {
    bool all_close = !maps[h].peaks.empty() && !beats.empty();
    for (Index p : maps[h].peaks) {
      double best = std::numeric_limits<double>::infinity(), at = -1;
      for (double b : beats) {
        if (std::abs(b - static_cast<double>(p)) < best) {
          best = std::abs(b - static_cast<double>(p));
          at = b;
        }
      }
      out << h + 1 << ',' << p << ',' << at << ',' << best << '\n';
      all_close = all_close && best <= 3.0;
    }
    if (all_close) aligned.push_back(h + 1);
  }
  run.results()["heads_aligned_within_3"] = aligned;
}

void run_attn_delta(Run& run) {
  const auto& a = run.config().at("attention");
  const auto base = load_model(run, a.at("checkpoint"), HeadKind::lm, "--checkpoint");
  const auto tuned = load_model(run, a.at("tuned"), HeadKind::cls, "--tuned");
  const auto records = prepared_records(run);
  const long length = base.config().max_context;
  const auto w = attention_window(records, a, length);
  run.phase("forward");
  const auto delta = attention_delta(base, tuned, w.window.tokens);
  write_delta_csv(run.path("delta.csv"), w.window.tokens, delta);
  write_delta_svg(run.path("delta.svg"), w.window.tokens, delta);
  run.results()["delta_sum"] = delta.delta.sum();

  if (w.record->beats.empty()) return;
  const auto beats = window_beats(*w.record, w.start, length);
  const auto mask = irregular_interval_mask(beats, length, a.at("irregular_tolerance").get<double>());
  std::ofstream out(run.path("regions.csv"));
  out << "position,irregular\n";
  for (std::size_t i = 0; i < mask.size(); ++i) out << i << ',' << (mask[i] ? 1 : 0) << '\n';
  const auto [in, outside] = positive_delta_contrast(delta.delta, mask);
  auto finite = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  run.results()["irregular_positions"] = std::count(mask.begin(), mask.end(), true);
  run.results()["mean_positive_delta_irregular"] = finite(in);
  run.results()["mean_positive_delta_regular"] = finite(outside);
}

}  // namespace pulseformer::cli
