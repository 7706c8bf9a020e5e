#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "gradcheck.hpp"
#include "pulseformer/checkpoint.hpp"
#include "pulseformer/model.hpp"

using namespace pulseformer;
using pulseformer::testing::gradient_error;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_blocks = 2;
  c.n_heads = 2;
  c.vocab = 11;
  c.max_context = 16;
  c.dropout = 0.1;
  return c;
}

// Independent count: every tensor written out by hand.
Index hand_count(Index d, Index blocks, Index vocab, Index n, Index head_out) {
  const Index block = 2 * d + 3 * d * d + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
  return vocab * d + n * d + blocks * block + 2 * d + (d * head_out + head_out);
}

std::vector<int> random_tokens(Index t, int vocab, Rng& rng) {
  std::vector<int> out(static_cast<std::size_t>(t));
  for (auto& x : out) x = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(vocab)));
  return out;
}

// Rescales weights so activations are far from the near-uniform init regime.
void spread(ParamStore<double>& p, Rng& rng, double sd) {
  for (auto& t : p.tensors()) {
    auto& v = t.node.mutable_value();
    for (Index i = 0; i < v.size(); ++i) v[i] += rng.normal(0.0, sd);
  }
}

}  // namespace

TEST_CASE("parameter counts") {
  const ModelConfig def;
  CHECK(param_count(def, HeadKind::lm) == 443493);
  CHECK(param_count(def, HeadKind::lm) == hand_count(64, 8, 101, 500, 101));
  CHECK(param_count(def, HeadKind::cls) == 436993);
  CHECK(param_count(def, HeadKind::cls) == 443493 - (64 * 101 + 101) + (64 + 1));

  ModelConfig tiny;
  tiny.d_model = 4;
  tiny.n_blocks = 1;
  tiny.n_heads = 1;
  tiny.vocab = 3;
  tiny.max_context = 5;
  CHECK(param_count(tiny, HeadKind::lm) == 287);
  CHECK(hand_count(4, 1, 3, 5, 3) == 287);

  Index block = 0;
  for (const auto& [name, shape] : parameter_shapes(def, HeadKind::lm)) {
    if (name.rfind(block_prefix(7), 0) == 0) block += shape.size();
  }
  CHECK(block == 49792);

  Rng rng(1);
  const auto p = init_params<float>(def, HeadKind::lm, rng);
  CHECK(p.count() == 443493);
  CHECK(p.at("blocks.3.ffn.fc1.weight").shape() == Shape{64, 256});
}

TEST_CASE("config validation") {
  ModelConfig c;
  c.d_model = 63;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(head_from_string("mlp"), ConfigError);
}

TEST_CASE("initialization conventions") {
  Rng rng(2);
  const auto p = init_params<double>(ModelConfig{}, HeadKind::lm, rng);
  CHECK(p.at("blocks.0.ln1.gain").value().flat().isOnes());
  CHECK(p.at("blocks.0.ffn.fc1.bias").value().flat().isZero());
  const auto& w = p.at("token_embedding").value().flat();
  const double mean = w.mean();
  const double sd = std::sqrt((w.array() - mean).square().mean());
  CHECK(std::abs(mean) < 0.002);
  CHECK(std::abs(sd - 0.02) < 0.002);
}

TEST_CASE("single token attends to itself") {
  Rng rng(3);
  const auto p = init_params<double>(small_config(), HeadKind::lm, rng);
  const std::vector<int> tok = {4};
  const auto [logits, rec] = forward_with_attention(p, tok);
  CHECK(logits.rows() == 1);
  REQUIRE(rec.layers() == 2);
  for (const auto& layer : rec.weights) {
    for (const auto& w : layer) {
      REQUIRE(w.rows() == 1);
      CHECK(w(0, 0) == 1.0);
    }
  }
}

TEST_CASE("attention rows are stochastic and lower triangular") {
  Rng rng(4);
  auto p = init_params<double>(small_config(), HeadKind::lm, rng);
  spread(p, rng, 0.5);
  for (Index t : {2, 7, 16}) {
    const auto tok = random_tokens(t, 11, rng);
    const auto [logits, rec] = forward_with_attention(p, tok);
    CHECK(rec.heads() == 2);
    for (const auto& layer : rec.weights) {
      for (const auto& w : layer) {
        for (Index i = 0; i < t; ++i) {
          CHECK(std::abs(w.row(i).sum() - 1.0) < 1e-6);
          CHECK((w.row(i).array() >= 0.0).all());
          for (Index j = i + 1; j < t; ++j) CHECK(w(i, j) == 0.0);
        }
      }
    }
  }
}

TEST_CASE("perturbing token j only changes logits at positions >= j") {
  Rng rng(5);
  auto p = init_params<double>(small_config(), HeadKind::lm, rng);
  spread(p, rng, 0.5);
  const Index t = 12;
  const auto base = random_tokens(t, 11, rng);
  const auto ref = forward_with_attention(p, base).first;
  for (Index j = 0; j < t; ++j) {
    auto alt = base;
    alt[static_cast<std::size_t>(j)] = (alt[static_cast<std::size_t>(j)] + 5) % 11;
    const auto out = forward_with_attention(p, alt).first;
    for (Index i = 0; i < j; ++i) CHECK(out.row(i) == ref.row(i));
    CHECK((out.row(j) - ref.row(j)).norm() > 0.0);
  }
}

TEST_CASE("eval mode is deterministic, train mode uses the rng") {
  Rng rng(6);
  const auto p = init_params<double>(small_config(), HeadKind::lm, rng);
  const auto tok = as_row(random_tokens(10, 11, rng));
  Rng a(9), b(9), c(10);
  const auto e1 = forward(p, tok, Mode::eval, &a).value().flat();
  const auto e2 = forward(p, tok, Mode::eval, &c).value().flat();
  CHECK(e1 == e2);
  Rng a2(9);
  const auto t1 = forward(p, tok, Mode::train, &a2).value().flat();
  const auto t2 = forward(p, tok, Mode::train, &b).value().flat();
  const auto t3 = forward(p, tok, Mode::train, &c).value().flat();
  CHECK(t1 == t2);
  CHECK(t1 != t3);
}

TEST_CASE("position embeddings contribute") {
  Rng rng(7);
  auto p = init_params<double>(small_config(), HeadKind::lm, rng);
  const auto tok = random_tokens(6, 11, rng);
  const auto with = forward_with_attention(p, tok).first;
  p.at("position_embedding").mutable_value().set_zero();
  const auto without = forward_with_attention(p, tok).first;
  CHECK((with - without).norm() > 1e-6);
}

TEST_CASE("input contract errors") {
  Rng rng(8);
  const auto p = init_params<double>(small_config(), HeadKind::lm, rng);
  CHECK_THROWS_AS(forward_with_attention(p, std::vector<int>(17, 1)), ContextOverflowError);
  CHECK_THROWS_AS(forward_with_attention(p, std::vector<int>{1, 11}), VocabularyError);
  CHECK_THROWS_AS(forward_with_attention(p, std::vector<int>{-1}), VocabularyError);
}

TEST_CASE("full model loss matches finite differences") {
  Rng rng(11);
  auto p = init_params<double>(small_config(), HeadKind::lm, rng);
  spread(p, rng, 0.3);
  const Index t = 16;
  TokenMatrix tok(2, t);
  std::vector<int> targets(static_cast<std::size_t>(2 * t));
  for (Index i = 0; i < tok.size(); ++i) tok.data()[i] = static_cast<int>(rng.uniform_int(11));
  for (auto& x : targets) x = static_cast<int>(rng.uniform_int(11));
  std::vector<Node<double>> inputs;
  for (auto& tensor : p.tensors()) inputs.push_back(tensor.node);
  auto loss_fn = [&]() -> Node<double> {
    Rng drop(42);  // same dropout masks on every evaluation
    return cross_entropy(forward(p, tok, Mode::train, &drop), targets);
  };
  CHECK(gradient_error(loss_fn, inputs) < 1e-4);
}

TEST_CASE("classification path matches finite differences") {
  Rng rng(12);
  auto lm = init_params<double>(small_config(), HeadKind::lm, rng);
  spread(lm, rng, 0.3);
  auto p = swap_head(lm, rng, true);
  TokenMatrix tok(3, 9);
  for (Index i = 0; i < tok.size(); ++i) tok.data()[i] = static_cast<int>(rng.uniform_int(11));
  const std::vector<double> labels = {1.0, 0.0, 1.0};
  std::vector<Node<double>> inputs;
  for (auto& tensor : p.tensors())
    if (p.is_trainable(tensor.name)) inputs.push_back(tensor.node);
  auto loss_fn = [&]() -> Node<double> {
    Rng drop(43);
    auto base = [&] {
      NoGradGuard frozen;
      return trunk(p, tok, Mode::eval, nullptr);
    }();
    return bce_with_logits(classify_from_trunk(p, base, Mode::train, &drop), std::span<const double>(labels));
  };
  CHECK(gradient_error(loss_fn, inputs) < 1e-4);
}

TEST_CASE("forward_classify") {
  Rng rng(13);
  auto lm = init_params<double>(small_config(), HeadKind::lm, rng);
  spread(lm, rng, 0.3);
  CHECK_THROWS_AS(forward_classify(lm, as_row(std::vector<int>{1, 2}), Mode::eval, nullptr),
                  ContractError);
  auto p = swap_head(lm, rng);
  TokenMatrix tok(4, 10);
  for (Index i = 0; i < tok.size(); ++i) tok.data()[i] = static_cast<int>(rng.uniform_int(11));

  SUBCASE("matches the last row of the full forward") {
    const auto probs = forward_classify(p, tok, Mode::eval, nullptr);
    const auto full = forward(p, tok, Mode::eval, nullptr);
    REQUIRE(probs.size() == 4);
    for (Index b = 0; b < 4; ++b) {
      const double logit = full.value().item(b)(9, 0);
      CHECK(probs[b] == doctest::Approx(1.0 / (1.0 + std::exp(-logit))).epsilon(1e-12));
    }
  }
  SUBCASE("zero head gives one half") {
    p.at("cls_head.weight").mutable_value().set_zero();
    p.at("cls_head.bias").mutable_value().set_zero();
    const auto probs = forward_classify(p, tok, Mode::eval, nullptr);
    CHECK((probs.array() == 0.5).all());
  }
  SUBCASE("bias pushes toward one") {
    double previous = 0.0;
    for (double c : {0.0, 2.0, 8.0, 40.0}) {
      p.at("cls_head.bias").mutable_value()[0] = c;
      const double prob = forward_classify(p, tok, Mode::eval, nullptr)[0];
      CHECK(prob >= previous);
      previous = prob;
    }
    CHECK(previous > 0.999999);
  }
}

TEST_CASE("swap_head keeps the trunk and sets the trainable census") {
  Rng rng(14);
  const auto lm = init_params<float>(ModelConfig{}, HeadKind::lm, rng);
  const auto cls = swap_head(lm, rng);
  CHECK(cls.head() == HeadKind::cls);
  CHECK(cls.count() == 436993);
  CHECK(cls.trainable_count() == 49857);
  for (const auto& t : lm.tensors()) {
    if (t.name.rfind("lm_head", 0) == 0) {
      CHECK_FALSE(cls.contains(t.name));
      continue;
    }
    CHECK(cls.at(t.name).value().flat() == t.node.value().flat());
    CHECK(cls.is_trainable(t.name) == (t.name.rfind(block_prefix(7), 0) == 0));
  }
  CHECK(cls.is_trainable("cls_head.weight"));
  CHECK_FALSE(cls.is_trainable("final_ln.gain"));
  CHECK(swap_head(lm, rng, true).trainable_count() == 49857 + 128);
  CHECK_THROWS_AS(swap_head(cls, rng), ContractError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto dir = std::filesystem::temp_directory_path() / "pulseformer_test_ckpt";
  std::filesystem::remove_all(dir);
  Rng rng(15);
  auto lm = init_params<float>(small_config(), HeadKind::lm, rng);
  auto p = swap_head(lm, rng);
  CheckpointMeta meta;
  meta.seed = 77;
  meta.step = 1234;
  meta.extra = {{"note", "x"}};
  save_checkpoint(p, dir / "model", meta);

  CheckpointMeta back;
  const auto q = load_checkpoint<float>(dir / "model", &back);
  CHECK(back.seed == 77);
  CHECK(back.step == 1234);
  CHECK(back.extra["note"] == "x");
  CHECK(q.head() == HeadKind::cls);
  CHECK(q.config().d_model == 8);
  CHECK(q.trainable() == p.trainable());
  for (const auto& t : p.tensors()) {
    const auto& a = t.node.value();
    const auto& b = q.at(t.name).value();
    CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0);
  }
  CHECK(std::filesystem::file_size(dir / "model.bin") == sizeof(float) * static_cast<std::size_t>(p.count()));

  CHECK_THROWS_AS(load_checkpoint<float>(dir / "missing"), DataError);
  std::filesystem::resize_file(dir / "model.bin", 40);
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "model"), DataError);
  std::filesystem::remove_all(dir);
}
