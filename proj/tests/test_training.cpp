#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "pulseformer/checkpoint.hpp"
#include "pulseformer/synth.hpp"
#include "pulseformer/training.hpp"

using namespace pulseformer;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_blocks = 2;
  c.n_heads = 2;
  c.max_context = 32;
  c.dropout = 0.1;
  return c;
}

// A one-tensor store whose only tensor is named like a weight matrix.
ParamStore<double> scalar_store(double value, const std::string& name = "lm_head.weight") {
  ModelConfig c;
  c.d_model = 1;
  c.n_blocks = 1;
  c.n_heads = 1;
  c.vocab = 1 + 1;
  c.max_context = 1;
  ParamStore<double> p(c, HeadKind::lm);
  for (auto& t : p.tensors()) t.node.mutable_value().flat().setConstant(value);
  p.set_trainable({name});
  return p;
}

void set_grad(ParamStore<double>& p, const std::string& name, double g) {
  p.at(name).mutable_grad().flat().setConstant(g);
}

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

FinetuneDataset tiny_af_dataset(int subjects, int context) {
  CohortConfig cc;
  cc.subjects = subjects;
  cc.mix = CohortMix::mixed;
  cc.duration = 12.0;
  cc.fs = 125.0;
  DatasetSpec spec;
  spec.records = build_cohort(cc);
  spec.window_len = context;
  spec.window_shift = 10;
  spec.target_fs = 25.0;
  spec.bandpass = std::make_pair(1.0, 10.0);
  return build_finetune_dataset(spec);
}

}  // namespace

TEST_CASE("AdamW single step matches the hand-evaluated update") {
  auto p = scalar_store(1.0);
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW<double> opt(cfg);
  set_grad(p, "lm_head.weight", 1.0);
  opt.step(p, 3e-4);
  // m_hat = 1, v_hat = 1: p = 1 - 3e-4 / (1 + 1e-8).
  CHECK(std::abs(p.at("lm_head.weight").value()[0] - (1.0 - 3e-4 / (1.0 + 1e-8))) < 1e-15);
  CHECK(p.at("lm_head.weight").value()[0] == doctest::Approx(0.9997).epsilon(1e-9));
  // Frozen tensors never move.
  CHECK(p.at("lm_head.bias").value()[0] == 1.0);
}

TEST_CASE("AdamW two-step trace with weight decay") {
  // Reference written straight from the update equations in long double.
  long double ref = 0.5L, m = 0, v = 0;
  const long double lr = 1e-2L, wd = 0.01L, b1 = 0.9L, b2 = 0.999L, eps = 1e-8L, g = 0.3L;
  for (int t = 1; t <= 2; ++t) {
    ref -= lr * wd * ref;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const long double mh = m / (1 - std::pow(b1, static_cast<long double>(t)));
    const long double vh = v / (1 - std::pow(b2, static_cast<long double>(t)));
    ref -= lr * mh / (std::sqrt(vh) + eps);
  }
  auto p = scalar_store(0.5);
  AdamW<double> opt;
  for (int t = 0; t < 2; ++t) {
    set_grad(p, "lm_head.weight", 0.3);
    opt.step(p, 1e-2);
  }
  CHECK(std::abs(p.at("lm_head.weight").value()[0] - static_cast<double>(ref)) < 1e-14);
  CHECK(opt.steps() == 2);
}

TEST_CASE("AdamW zero gradient without decay leaves parameters unchanged") {
  auto p = scalar_store(0.7);
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW<double> opt(cfg);
  for (int i = 0; i < 3; ++i) {
    set_grad(p, "lm_head.weight", 0.0);
    opt.step(p, 3e-4);
  }
  CHECK(p.at("lm_head.weight").value()[0] == 0.7);
}

TEST_CASE("weight decay exclusions") {
  CHECK_FALSE(decays("token_embedding"));
  CHECK_FALSE(decays("position_embedding"));
  CHECK_FALSE(decays("blocks.0.ln1.gain"));
  CHECK_FALSE(decays("blocks.3.ln2.bias"));
  CHECK_FALSE(decays("final_ln.gain"));
  CHECK(decays("blocks.0.attn.query"));
  CHECK(decays("blocks.0.ffn.fc1.bias"));
  CHECK(decays("lm_head.weight"));

  for (const std::string name : {"final_ln.gain", "lm_head.weight"}) {
    auto p = scalar_store(2.0, name);
    set_grad(p, name, 0.0);
    AdamW<double> opt;
    opt.step(p, 0.1);
    CHECK(p.at(name).value()[0] == (decays(name) ? 2.0 - 0.1 * 0.01 * 2.0 : 2.0));
  }
}

TEST_CASE("AdamW rejects non-finite gradients before touching anything") {
  auto p = scalar_store(1.0);
  p.set_trainable({"lm_head.weight", "lm_head.bias"});
  set_grad(p, "lm_head.weight", 1.0);
  p.at("lm_head.bias").mutable_grad()[0] = NAN;
  AdamW<double> opt;
  try {
    opt.step(p, 1e-3);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("lm_head.bias") != std::string::npos);
  }
  CHECK(p.at("lm_head.weight").value()[0] == 1.0);
  CHECK(opt.steps() == 0);
}

TEST_CASE("gradient clipping is opt-in") {
  auto a = scalar_store(0.0);
  auto b = scalar_store(0.0);
  AdamWConfig clipped;
  clipped.clip_norm = 0.5;
  clipped.weight_decay = 0.0;
  AdamWConfig plain;
  plain.weight_decay = 0.0;
  AdamW<double> oa(clipped), ob(plain);
  set_grad(a, "lm_head.weight", 4.0);
  set_grad(b, "lm_head.weight", 4.0);
  oa.step(a, 1e-3);
  ob.step(b, 1e-3);
  const auto n = static_cast<double>(a.at("lm_head.weight").value().size());
  const double norm = 4.0 * std::sqrt(n);
  CHECK(oa.first_moment("lm_head.weight")[0] == doctest::Approx(0.1 * 4.0 * 0.5 / norm));
  CHECK(ob.first_moment("lm_head.weight")[0] == doctest::Approx(0.1 * 4.0));
}

TEST_CASE("AUC examples and brute-force agreement") {
  CHECK(auc(std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1}) == 1.0);
  CHECK(auc(std::vector<double>{0.5, 0.5, 0.5}, std::vector<int>{0, 1, 1}) == 0.5);
  CHECK(auc(std::vector<double>{0.2, 0.8, 0.6, 0.4}, std::vector<int>{0, 1, 1, 0}) == 1.0);
  CHECK(brute_auc({0.2, 0.8, 0.6, 0.4}, {0, 1, 1, 0}) == 1.0);
  CHECK(std::isnan(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1})));

  Rng rng(31);
  for (int trial = 0; trial < 500; ++trial) {
    const auto n = static_cast<std::size_t>(2 + rng.uniform_int(99));
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.uniform_int(12)) / 11.0;  // coarse grid forces ties
      y[i] = static_cast<int>(rng.uniform_int(2));
    }
    y[0] = 0;
    y[1] = 1;
    const double a = auc(s, y);
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
    CHECK(a == doctest::Approx(brute_auc(s, y)).epsilon(1e-12));
  }
}

TEST_CASE("eval cadence") {
  CHECK(eval_points(2000, 2000) == std::vector<std::int64_t>{2000});
  CHECK(eval_points(5000, 2000) == std::vector<std::int64_t>{2000, 4000, 5000});
  CHECK(eval_points(10, 3).size() == 4);
  TrainRunConfig r;
  r.max_iters = 100;
  r.eval_interval = 200;
  CHECK_THROWS_AS(r.validate(), ConfigError);
}

TEST_CASE("initial cross-entropy is close to ln(vocab)") {
  Rng rng(32);
  const auto p = init_params<float>(ModelConfig{}, HeadKind::lm, rng);
  std::vector<int> stream(3000);
  for (auto& t : stream) t = static_cast<int>(rng.uniform_int(101));
  const double loss = estimate_loss(p, stream, 2, 2, rng);
  CHECK(std::abs(loss - std::log(101.0)) < 0.5);
}

TEST_CASE("pre-training is deterministic and follows the eval cadence") {
  CohortConfig cc;
  cc.subjects = 3;
  cc.duration = 30.0;
  DatasetSpec spec;
  spec.records = build_cohort(cc);
  spec.window_len = 32;
  spec.target_fs = 25.0;
  spec.split_fraction = 0.67;
  const auto data = build_pretrain_dataset(spec);

  TrainRunConfig run;
  run.batch_size = 4;
  run.max_iters = 25;
  run.eval_interval = 10;
  run.eval_iters = 2;
  run.learning_rate = 3e-3;
  const auto dir = std::filesystem::temp_directory_path() / "pulseformer_test_pretrain";
  std::filesystem::remove_all(dir);
  auto run_once = [&](const std::optional<std::filesystem::path>& ckpt) {
    Rng rng(5);
    return pretrain(init_params<float>(tiny_config(), HeadKind::lm, rng), data, run, ckpt);
  };
  const auto a = run_once(dir);
  const auto b = run_once(std::nullopt);
  REQUIRE(a.evals.size() == 3);
  CHECK(a.evals.back().iter == 25);
  CHECK(a.iter_loss.size() == 25);
  CHECK(a.iter_loss == b.iter_loss);
  for (const auto& t : a.params.tensors()) {
    CHECK(t.node.value().flat() == b.params.at(t.name).value().flat());
  }
  CHECK(std::filesystem::exists(dir / "iter_10.json"));
  CHECK(std::filesystem::exists(dir / "iter_25.bin"));
  CheckpointMeta meta;
  const auto best = load_checkpoint<float>(dir / "best", &meta);
  CHECK(meta.step == a.best_iter);
  CHECK(best.at("lm_head.bias").value().flat() == a.best.at("lm_head.bias").value().flat());
  std::filesystem::remove_all(dir);
}

TEST_CASE("single-batch overfit drives the loss down") {
  Rng rng(33);
  ModelConfig cfg = tiny_config();
  cfg.dropout = 0.0;
  auto params = init_params<float>(cfg, HeadKind::lm, rng);
  std::vector<int> stream(200);
  for (auto& t : stream) t = static_cast<int>(rng.uniform_int(101));
  const auto batch = sample_lm_batch(stream, 4, 32, rng);
  AdamW<float> opt;
  double first = 0, last = 0;
  std::vector<double> curve;
  for (int it = 0; it < 200; ++it) {
    const auto loss = cross_entropy(forward(params, batch.inputs, Mode::train, &rng), batch.targets);
    if (it == 0) first = loss.item();
    last = loss.item();
    curve.push_back(last);
    params.zero_grad();
    backward(loss);
    opt.step(params, 1e-2);
  }
  CHECK(first > 4.0);
  CHECK(last < 0.3);
  // Trailing moving average over 10 iterations never rises.
  std::vector<double> smooth;
  for (std::size_t i = 9; i < curve.size(); ++i) {
    double s = 0;
    for (std::size_t k = i - 9; k <= i; ++k) s += curve[k];
    smooth.push_back(s / 10);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) CHECK(smooth[i] <= smooth[i - 1]);
}

TEST_CASE("fine-tuning honours the freeze contract") {
  const auto data = tiny_af_dataset(4, 32);
  Rng rng(34);
  const auto base = init_params<float>(tiny_config(), HeadKind::lm, rng);
  TrainRunConfig run;
  run.batch_size = 8;
  run.max_iters = 5;
  run.eval_interval = 5;
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  const auto tuned = finetune_af(base, data, all, run);
  Rng probe(run.seed);
  const auto start = swap_head(base, probe);
  std::set<std::string> changed;
  for (const auto& t : tuned.params.tensors()) {
    const auto& before = start.at(t.name).value();
    const auto& after = t.node.value();
    if (std::memcmp(before.data(), after.data(), sizeof(float) * static_cast<std::size_t>(after.size())) != 0) {
      changed.insert(t.name);
    }
  }
  CHECK(changed == tuned.params.trainable());
  CHECK(tuned.loss.size() == 5);

  const auto cache = compute_trunk_cache(start, data);
  const auto cached = finetune_af(base, data, all, run, &cache);
  for (std::size_t i = 0; i < 5; ++i) CHECK(cached.loss[i] == doctest::Approx(tuned.loss[i]).epsilon(1e-4));
  const std::vector<std::size_t> some = {0, 3, 7};
  const auto s1 = score_windows(cached.params, data, some);
  const auto s2 = score_windows(cached.params, data, some, &cache);
  for (std::size_t i = 0; i < 3; ++i) CHECK(s1[i] == doctest::Approx(s2[i]).epsilon(1e-5));
}

TEST_CASE("fine-tuning aborts on a single-class fold") {
  const auto data = tiny_af_dataset(2, 32);
  Rng rng(35);
  const auto base = init_params<float>(tiny_config(), HeadKind::lm, rng);
  std::vector<std::size_t> regular;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.labels[i] == 0) regular.push_back(i);
  TrainRunConfig run;
  run.max_iters = 2;
  run.eval_interval = 1;
  CHECK_THROWS_AS(finetune_af(base, data, regular, run), DataError);
}

TEST_CASE("LOSO harness produces one fold per subject") {
  const auto data = tiny_af_dataset(4, 32);
  Rng rng(36);
  const auto base = init_params<float>(tiny_config(), HeadKind::lm, rng);
  TrainRunConfig run;
  run.batch_size = 8;
  run.max_iters = 4;
  run.eval_interval = 4;
  int seen = 0;
  const auto report = loso_evaluate(base, data, run, {}, [&](const Fold&, const FinetuneResult&) { ++seen; });
  CHECK(seen == 4);
  REQUIRE(report.folds.size() == 4);
  CHECK(report.scores.size() == data.size());
  for (const auto& f : report.folds) {
    CHECK(std::isnan(f.auc));  // every subject carries one label
    CHECK(f.label == (f.held_out == "S01" || f.held_out == "S03" ? 0 : 1));
  }
  CHECK(report.pooled_auc >= 0.0);
  CHECK(report.pooled_auc <= 1.0);

  const auto dir = std::filesystem::temp_directory_path() / "pulseformer_test_loso";
  write_folds_csv(dir / "folds.csv", report);
  std::ifstream in(dir / "folds.csv");
  int lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  CHECK(lines == 5);
  std::filesystem::remove_all(dir);
}
