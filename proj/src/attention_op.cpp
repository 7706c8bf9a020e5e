#include <cmath>
#include <cstdint>
#include <string>

#include "pulseformer/ops.hpp"

namespace pulseformer {

namespace {

// Query rows are processed in blocks so each block only touches the keys
// its last row can see; this skips most of the masked upper triangle.
constexpr Index kRowBlock = 64;

template <typename Scalar>
struct HeadCache {
  RowMatrix<Scalar> weights;  // post-softmax, pre-dropout [Tq x Tk]
  RowMatrix<Scalar> mask;     // 0 or 1/(1-rate) on the causal triangle; empty without dropout
};

}  // namespace

template <typename Scalar>
Node<Scalar> causal_attention(const Node<Scalar>& q, const Node<Scalar>& k, const Node<Scalar>& v,
                              int n_heads, double dropout_rate, Rng* rng, bool training,
                              AttentionCapture<Scalar>* capture) {
  const Shape& sq = q.shape();
  const Shape& sk = k.shape();
  if (sq.rank() != 3 || sk.rank() != 3 || sk != v.shape() || sq[0] != sk[0] || sq[2] != sk[2] ||
      sq[1] > sk[1]) {
    throw DimensionError("attention shapes incompatible: q " + sq.str() + ", k " + sk.str() +
                         ", v " + v.shape().str());
  }
  const Index batch = sq[0], tq = sq[1], tk = sk[1], d = sq[2];
  if (n_heads <= 0 || d % n_heads != 0) {
    throw DimensionError("feature width " + std::to_string(d) + " not divisible into " +
                         std::to_string(n_heads) + " heads");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ContractError("dropout rate must lie in [0, 1)");
  const bool drop = training && dropout_rate > 0.0;
  if (drop && rng == nullptr) throw ContractError("training-mode dropout needs an rng");
  if (capture != nullptr && batch != 1) throw ContractError("attention capture needs batch 1");

  const Index dk = d / n_heads;
  const Index offset = tk - tq;
  const Scalar score_scale = Scalar(1) / std::sqrt(Scalar(dk));

  Array<Scalar> out(Shape{batch, tq, d});
  std::vector<HeadCache<Scalar>> caches(static_cast<std::size_t>(batch * n_heads));
  RowMatrix<Scalar> dropped;

  for (Index b = 0; b < batch; ++b) {
    const auto qb = q.value().item(b);
    const auto kb = k.value().item(b);
    const auto vb = v.value().item(b);
    auto ob = out.item(b);
    for (int h = 0; h < n_heads; ++h) {
      auto& cache = caches[static_cast<std::size_t>(b * n_heads + h)];
      auto& p = cache.weights;
      p.setZero(tq, tk);
      const auto qh = qb.middleCols(h * dk, dk);
      const auto kh = kb.middleCols(h * dk, dk);
      const auto vh = vb.middleCols(h * dk, dk);
      for (Index r0 = 0; r0 < tq; r0 += kRowBlock) {
        const Index rr = std::min(kRowBlock, tq - r0);
        const Index width = offset + r0 + rr;
        p.block(r0, 0, rr, width).noalias() =
            score_scale * (qh.middleRows(r0, rr) * kh.topRows(width).transpose());
        for (Index i = 0; i < rr; ++i) {
          const Index valid = offset + r0 + i + 1;
          auto row = p.row(r0 + i);
          auto seg = row.head(valid);
          if (!seg.allFinite()) throw NumericError("attention scores contain non-finite values");
          seg = (seg.array() - seg.maxCoeff()).exp().matrix();
          seg /= seg.sum();
          if (valid < width) row.segment(valid, width - valid).setZero();
        }
      }
      if (capture != nullptr) capture->push_back(p);

      if (drop) {
        cache.mask.setZero(tq, tk);
        for (Index i = 0; i < tq; ++i) {
          fill_dropout_mask(cache.mask.row(i).data(), offset + i + 1, dropout_rate, *rng);
        }
      }
      auto oh = ob.middleCols(h * dk, dk);
      for (Index r0 = 0; r0 < tq; r0 += kRowBlock) {
        const Index rr = std::min(kRowBlock, tq - r0);
        const Index width = offset + r0 + rr;
        if (drop) {
          dropped = p.block(r0, 0, rr, width).cwiseProduct(cache.mask.block(r0, 0, rr, width));
          oh.middleRows(r0, rr).noalias() = dropped * vh.topRows(width);
        } else {
          oh.middleRows(r0, rr).noalias() = p.block(r0, 0, rr, width) * vh.topRows(width);
        }
      }
    }
  }

  auto backward = [caches = std::move(caches), n_heads, dk, offset, score_scale, drop](NodeData<Scalar>& self) {
    const auto& qv = self.parents[0]->value;
    const auto& kv = self.parents[1]->value;
    const auto& vv = self.parents[2]->value;
    const bool gq = self.parents[0]->requires_grad;
    const bool gk = self.parents[1]->requires_grad;
    const bool gv = self.parents[2]->requires_grad;
    Array<Scalar>* dq = gq ? &self.parents[0]->grad_buffer() : nullptr;
    Array<Scalar>* dkey = gk ? &self.parents[1]->grad_buffer() : nullptr;
    Array<Scalar>* dval = gv ? &self.parents[2]->grad_buffer() : nullptr;
    const Index batch = qv.batch();
    const Index tq = qv.item_rows();
    RowMatrix<Scalar> mixed, dscore;
    for (Index b = 0; b < batch; ++b) {
      const auto g = self.grad.item(b);
      for (int h = 0; h < n_heads; ++h) {
        const auto& cache = caches[static_cast<std::size_t>(b * n_heads + h)];
        const auto& p = cache.weights;
        const auto qh = qv.item(b).middleCols(h * dk, dk);
        const auto kh = kv.item(b).middleCols(h * dk, dk);
        const auto vh = vv.item(b).middleCols(h * dk, dk);
        const auto gh = g.middleCols(h * dk, dk);
        for (Index r0 = 0; r0 < tq; r0 += kRowBlock) {
          const Index rr = std::min(kRowBlock, tq - r0);
          const Index width = offset + r0 + rr;
          if (gv) {
            auto dv = dval->item(b).middleCols(h * dk, dk).topRows(width);
            if (drop) {
              mixed = p.block(r0, 0, rr, width).cwiseProduct(cache.mask.block(r0, 0, rr, width));
              dv.noalias() += mixed.transpose() * gh.middleRows(r0, rr);
            } else {
              dv.noalias() += p.block(r0, 0, rr, width).transpose() * gh.middleRows(r0, rr);
            }
          }
          if (!gq && !gk) continue;
          dscore.noalias() = gh.middleRows(r0, rr) * vh.topRows(width).transpose();
          if (drop) dscore.array() *= cache.mask.block(r0, 0, rr, width).array();
          for (Index i = 0; i < rr; ++i) {
            const Index valid = offset + r0 + i + 1;
            auto drow = dscore.row(i);
            const auto prow = p.row(r0 + i).head(valid);
            const Scalar dot = drow.head(valid).dot(prow);
            drow.head(valid) = (prow.array() * (drow.head(valid).array() - dot) * score_scale).matrix();
            if (valid < width) drow.segment(valid, width - valid).setZero();
          }
          if (gq) {
            dq->item(b).middleCols(h * dk, dk).middleRows(r0, rr).noalias() +=
                dscore * kh.topRows(width);
          }
          if (gk) {
            dkey->item(b).middleCols(h * dk, dk).topRows(width).noalias() +=
                dscore.transpose() * qh.middleRows(r0, rr);
          }
        }
      }
    }
  };
  return make_result<Scalar>(std::move(out), {q, k, v}, std::move(backward));
}

template Node<float> causal_attention<float>(const Node<float>&, const Node<float>&,
                                             const Node<float>&, int, double, Rng*, bool,
                                             AttentionCapture<float>*);
template Node<double> causal_attention<double>(const Node<double>&, const Node<double>&,
                                               const Node<double>&, int, double, Rng*, bool,
                                               AttentionCapture<double>*);

}  // namespace pulseformer
