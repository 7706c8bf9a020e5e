#include <doctest.h>

#include <cmath>
#include <map>
#include <string>

#include "gradcheck.hpp"
#include "pulseformer/ops.hpp"

using namespace pulseformer;
using pulseformer::testing::gradient_error;
using pulseformer::testing::random_array;
using DNode = Node<double>;

namespace {

DNode mat(std::initializer_list<std::initializer_list<double>> rows, bool grad = false) {
  const Index r = static_cast<Index>(rows.size());
  const Index c = static_cast<Index>(rows.begin()->size());
  Array<double> a(Shape{r, c});
  Index i = 0;
  for (const auto& row : rows)
    for (double v : row) a[i++] = v;
  return DNode(std::move(a), grad);
}

DNode param(const Shape& s, Rng& rng, double stddev = 1.0) {
  return DNode::parameter(random_array(s, rng, stddev));
}

}  // namespace

TEST_CASE("matmul hand examples") {
  const DNode id = mat({{1, 0}, {0, 1}});
  const DNode col = mat({{3}, {4}});
  const auto r1 = matmul(id, col);
  CHECK(r1.value()[0] == 3.0);
  CHECK(r1.value()[1] == 4.0);
  const auto r2 = matmul(mat({{1, 2}}), col);
  CHECK(r2.shape() == Shape{1, 1});
  CHECK(r2.value()[0] == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const DNode a(Array<double>(Shape{2, 3}));
  const DNode b(Array<double>(Shape{2, 2}));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("gradient of sum(A x B) w.r.t. A is B-transpose broadcast") {
  Rng rng(7);
  auto a = param(Shape{3, 4}, rng);
  auto b = param(Shape{4, 2}, rng);
  backward(sum(matmul(a, b)));
  const auto bsum = b.value().matrix().rowwise().sum();
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 4; ++j) CHECK(a.grad().matrix()(i, j) == doctest::Approx(bsum(j)));
  a.zero_grad();
  b.zero_grad();
  CHECK(gradient_error([&] { return sum(matmul(a, b)); }, {a, b}) < 1e-5);
}

TEST_CASE("batched and broadcast matmul gradients") {
  Rng rng(11);
  auto a = param(Shape{2, 3, 4}, rng);
  auto w = param(Shape{4, 5}, rng);
  auto c = param(Shape{2, 5, 3}, rng);
  auto weights = DNode(random_array(Shape{2, 3, 3}, rng));
  auto f = [&] { return sum(mul(matmul(matmul(a, w), c), weights)); };
  CHECK(gradient_error(f, {a, w, c}) < 1e-6);
  const DNode wt(random_array(Shape{2, 5, 3}, rng));
  auto g = [&] { return sum(mul(transpose_last(matmul(a, w)), wt)); };
  CHECK(gradient_error(g, {a, w}) < 1e-6);
}

TEST_CASE("softmax rows") {
  auto s = softmax_rows(mat({{0, 0, 0}}));
  for (int i = 0; i < 3; ++i) CHECK(s.value()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  auto big = softmax_rows(mat({{1000, 0}}));
  CHECK(std::abs(big.value()[0] - 1.0) < 1e-9);
  CHECK(big.value()[1] < 1e-9);
  CHECK(big.value().all_finite());

  Rng rng(3);
  const DNode x(random_array(Shape{8, 13}, rng, 10.0));
  const auto y = softmax_rows(x).value().matrix();
  for (Index r = 0; r < 8; ++r) {
    CHECK(std::abs(y.row(r).sum() - 1.0) < 1e-9);
    CHECK(y.row(r).minCoeff() >= 0.0);
  }

  Array<double> bad(Shape{1, 2});
  bad[0] = std::nan("");
  CHECK_THROWS_AS(softmax_rows(DNode(bad)), NumericError);

  auto p = param(Shape{4, 6}, rng);
  auto w = DNode(random_array(Shape{4, 6}, rng));
  CHECK(gradient_error([&] { return sum(mul(softmax_rows(p), w)); }, {p}) < 1e-6);
}

TEST_CASE("layer norm") {
  const DNode gain(Array<double>(Shape{2}, 1.0));
  const DNode bias(Array<double>(Shape{2}, 0.0));
  auto y = layer_norm(mat({{1, 3}}), gain, bias);
  CHECK(y.value()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y.value()[1] == doctest::Approx(1.0).epsilon(1e-4));

  const DNode g3(Array<double>(Shape{3}, 1.0));
  const DNode b3(Array<double>(Shape{3}, 0.0));
  auto flat = layer_norm(mat({{2, 2, 2}}), g3, b3);
  for (int i = 0; i < 3; ++i) CHECK(flat.value()[i] == 0.0);

  Rng rng(5);
  auto x = param(Shape{2, 3, 6}, rng);
  auto gain6 = param(Shape{6}, rng);
  auto bias6 = param(Shape{6}, rng);
  auto w = DNode(random_array(Shape{2, 3, 6}, rng));
  CHECK(gradient_error([&] { return sum(mul(layer_norm(x, gain6, bias6), w)); }, {x, gain6, bias6}) <
        1e-4);
  CHECK_THROWS_AS(layer_norm(x, g3, bias6), DimensionError);
}

TEST_CASE("relu, dropout, embedding, concat") {
  auto r = relu(mat({{-1, 2}}));
  CHECK(r.value()[0] == 0.0);
  CHECK(r.value()[1] == 2.0);

  Rng rng(9);
  auto x = param(Shape{3, 4}, rng);
  auto same = dropout(x, 0.0, &rng, true);
  CHECK(same.value().flat() == x.value().flat());
  CHECK(dropout(x, 0.5, &rng, false).value().flat() == x.value().flat());
  CHECK_THROWS_AS(dropout(x, 1.0, &rng, true), ContractError);

  const DNode ones(Array<double>(Shape{10000}, 1.0));
  auto d = dropout(ones, 0.2, &rng, true);
  CHECK(std::abs(d.value().flat().mean() - 1.0) < 0.02);

  auto table = param(Shape{5, 3}, rng);
  TokenMatrix idx(2, 3);
  idx << 0, 4, 4, 1, 2, 0;
  auto e = embed_lookup(table, idx);
  CHECK(e.shape() == Shape{2, 3, 3});
  CHECK(e.value().item(0).row(1) == table.value().matrix().row(4));
  TokenMatrix oob(1, 1);
  oob << 5;
  CHECK_THROWS_AS(embed_lookup(table, oob), VocabularyError);

  auto w = DNode(random_array(Shape{2, 3, 3}, rng));
  CHECK(gradient_error([&] { return sum(mul(embed_lookup(table, idx), w)); }, {table}) < 1e-6);

  auto a = param(Shape{2, 3, 2}, rng);
  auto b = param(Shape{2, 3, 3}, rng);
  auto w5 = DNode(random_array(Shape{2, 3, 5}, rng));
  CHECK(gradient_error([&] { return sum(mul(concat_features<double>({a, b}), w5)); }, {a, b}) < 1e-6);
  auto w1 = DNode(random_array(Shape{2, 1, 3}, rng));
  CHECK(gradient_error([&] { return sum(mul(slice_positions(b, 2, 1), w1)); }, {b}) < 1e-6);

  auto rx = param(Shape{3, 5}, rng);
  auto rw = DNode(random_array(Shape{3, 5}, rng));
  CHECK(gradient_error([&] { return sum(mul(relu(rx), rw)); }, {rx}) < 1e-6);
  auto dx = param(Shape{3, 5}, rng);
  CHECK(gradient_error(
            [&] {
              Rng fixed(17);
              return sum(mul(dropout(dx, 0.3, &fixed, true), rw));
            },
            {dx}) < 1e-6);
}

TEST_CASE("broadcast add and bias gradients") {
  Rng rng(21);
  auto a = param(Shape{2, 3, 4}, rng);
  auto bias = param(Shape{4}, rng);
  auto table = param(Shape{1, 3, 4}, rng);
  auto w = DNode(random_array(Shape{2, 3, 4}, rng));
  CHECK(gradient_error([&] { return sum(mul(add(add(a, bias), table), w)); }, {a, bias, table}) < 1e-6);
  CHECK_THROWS_AS(add(a, DNode(Array<double>(Shape{3}))), DimensionError);
}

TEST_CASE("cross entropy") {
  Array<double> uniform(Shape{4, 101}, 0.0);
  std::vector<int> tgt = {0, 50, 100, 7};
  auto loss = cross_entropy(DNode(uniform), tgt);
  CHECK(loss.item() == doctest::Approx(std::log(101.0)).epsilon(1e-12));
  CHECK(std::abs(loss.item() - 4.6151) < 1e-4);

  Array<double> sure(Shape{1, 5}, 0.0);
  sure[2] = 30.0;
  std::vector<int> two = {2};
  CHECK(cross_entropy(DNode(sure), two).item() < 1e-9);
  std::vector<int> oob = {5};
  CHECK_THROWS_AS(cross_entropy(DNode(sure), oob), VocabularyError);

  Rng rng(13);
  auto logits = param(Shape{3, 5}, rng);
  std::vector<int> t3 = {4, 0, 2};
  CHECK(gradient_error([&] { return cross_entropy(logits, t3); }, {logits}) < 1e-5);
}

TEST_CASE("binary cross entropy and sigmoid") {
  Rng rng(4);
  auto z = param(Shape{6, 1, 1}, rng, 3.0);
  std::vector<double> y = {0, 1, 1, 0, 1, 0};
  CHECK(gradient_error([&] { return bce_with_logits<double>(z, y); }, {z}) < 1e-6);
  auto s = param(Shape{5}, rng);
  auto w = DNode(random_array(Shape{5}, rng));
  CHECK(gradient_error([&] { return sum(mul(sigmoid(s), w)); }, {s}) < 1e-6);
  Array<double> zero(Shape{1});
  std::vector<double> one = {1.0};
  CHECK(bce_with_logits<double>(DNode(zero), one).item() == doctest::Approx(std::log(2.0)));
}

TEST_CASE("causal mask zeroes the upper triangle after softmax") {
  Rng rng(8);
  const DNode s(random_array(Shape{2, 4, 4}, rng));
  const auto p = softmax_rows(causal_mask(s));
  for (Index b = 0; b < 2; ++b) {
    const auto m = p.value().item(b);
    for (Index i = 0; i < 4; ++i) {
      CHECK(std::abs(m.row(i).sum() - 1.0) < 1e-12);
      for (Index j = i + 1; j < 4; ++j) CHECK(m(i, j) == 0.0);
    }
  }
}

TEST_CASE("backward contract: scalar loss, accumulation, reset") {
  Rng rng(2);
  auto x = param(Shape{3}, rng);
  CHECK_THROWS_AS(backward(scale(x, 2.0)), ContractError);
  auto loss = sum(scale(x, 2.0));
  backward(loss);
  CHECK(x.grad()[0] == 2.0);
  backward(loss);
  CHECK(x.grad()[0] == 4.0);
  x.zero_grad();
  backward(loss);
  CHECK(x.grad()[0] == 2.0);
}

TEST_CASE("shared subexpressions match brute-force path enumeration") {
  // loss = c + b, c = a * b, b = a + x, a = x * y
  const double xv = 1.3, yv = -0.7;
  auto x = DNode::parameter(Array<double>(Shape{1}, xv));
  auto y = DNode::parameter(Array<double>(Shape{1}, yv));
  auto a = mul(x, y);
  auto b = add(a, x);
  auto c = mul(a, b);
  auto loss = add(c, b);
  backward(loss);

  const double av = xv * yv, bv = av + xv;
  // Edges child -> parent with local partial derivative.
  std::multimap<std::string, std::pair<std::string, double>> edges = {
      {"loss", {"c", 1.0}}, {"loss", {"b", 1.0}}, {"c", {"a", bv}}, {"c", {"b", av}},
      {"b", {"a", 1.0}},    {"b", {"x", 1.0}},    {"a", {"x", yv}}, {"a", {"y", xv}}};
  std::function<double(const std::string&, const std::string&)> paths =
      [&](const std::string& from, const std::string& to) -> double {
    if (from == to) return 1.0;
    double total = 0.0;
    auto [lo, hi] = edges.equal_range(from);
    for (auto it = lo; it != hi; ++it) total += it->second.second * paths(it->second.first, to);
    return total;
  };
  CHECK(x.grad()[0] == doctest::Approx(paths("loss", "x")).epsilon(1e-14));
  CHECK(y.grad()[0] == doctest::Approx(paths("loss", "y")).epsilon(1e-14));
}

TEST_CASE("rng streams are reproducible") {
  Rng a(123), b(123), c(124);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs = differs || x != c.next_u64();
  }
  CHECK(differs);
  Rng r1(5), r2(5);
  const DNode ones(Array<double>(Shape{64}, 1.0));
  auto d1 = dropout(ones, 0.5, &r1, true);
  auto d2 = dropout(ones, 0.5, &r2, true);
  CHECK(d1.value().flat() == d2.value().flat());
  double m = 0.0;
  Rng g(99);
  for (int i = 0; i < 20000; ++i) m += g.normal();
  CHECK(std::abs(m / 20000.0) < 0.03);
}

namespace {

// Attention composed from primitive ops; the fused kernel must agree.
DNode reference_attention(const DNode& q, const DNode& k, const DNode& v, int heads) {
  const Index d = q.shape()[2];
  const Index dk = d / heads;
  std::vector<DNode> outs;
  for (int h = 0; h < heads; ++h) {
    auto qh = slice_features(q, h * dk, dk);
    auto kh = slice_features(k, h * dk, dk);
    auto vh = slice_features(v, h * dk, dk);
    auto scores = scale(matmul(qh, transpose_last(kh)), 1.0 / std::sqrt(double(dk)));
    outs.push_back(matmul(softmax_rows(causal_mask(scores)), vh));
  }
  return concat_features(outs);
}

}  // namespace

TEST_CASE("fused causal attention matches the composed reference") {
  Rng rng(31);
  for (Index tq : {Index(1), Index(5), Index(70), Index(140)}) {
    const Index tk = tq == 140 ? 140 : tq + 3;
    auto q = param(Shape{2, tq, 8}, rng);
    auto k = param(Shape{2, tk, 8}, rng);
    auto v = param(Shape{2, tk, 8}, rng);
    const auto fused = causal_attention(q, k, v, 2, 0.0, nullptr, false);
    const auto ref = reference_attention(q, k, v, 2);
    CHECK((fused.value().flat() - ref.value().flat()).cwiseAbs().maxCoeff() < 1e-12);

    const auto w = DNode(random_array(fused.shape(), rng));
    backward(sum(mul(fused, w)));
    const Vector<double> gq = q.grad().flat(), gk = k.grad().flat(), gv = v.grad().flat();
    q.zero_grad();
    k.zero_grad();
    v.zero_grad();
    backward(sum(mul(ref, w)));
    CHECK((gq - q.grad().flat()).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((gk - k.grad().flat()).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((gv - v.grad().flat()).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("fused attention gradients with dropout and capture") {
  Rng rng(41);
  auto q = param(Shape{2, 6, 4}, rng);
  auto k = param(Shape{2, 9, 4}, rng);
  auto v = param(Shape{2, 9, 4}, rng);
  auto w = DNode(random_array(Shape{2, 6, 4}, rng));
  auto f = [&] {
    Rng fixed(77);
    return sum(mul(causal_attention(q, k, v, 2, 0.25, &fixed, true), w));
  };
  CHECK(gradient_error(f, {q, k, v}) < 1e-6);

  AttentionCapture<double> cap;
  auto one_q = param(Shape{1, 5, 4}, rng);
  auto one_k = param(Shape{1, 5, 4}, rng);
  causal_attention(one_q, one_k, one_k, 2, 0.0, nullptr, false, &cap);
  REQUIRE(cap.size() == 2);
  for (const auto& m : cap) {
    for (Index i = 0; i < 5; ++i) {
      CHECK(std::abs(m.row(i).sum() - 1.0) < 1e-12);
      for (Index j = i + 1; j < 5; ++j) CHECK(m(i, j) == 0.0);
    }
  }
  CHECK_THROWS_AS(causal_attention(q, k, v, 3, 0.0, nullptr, false), DimensionError);
}
