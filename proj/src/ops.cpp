#include "pulseformer/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace pulseformer {

namespace {

template <typename Scalar>
using Data = NodeData<Scalar>;

template <typename Scalar>
bool wants(const Data<Scalar>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

template <typename Scalar>
Array<Scalar>& grad_of(Data<Scalar>& self, std::size_t i) {
  return self.parents[i]->grad_buffer();
}

std::string pair_str(const Shape& a, const Shape& b) { return a.str() + " and " + b.str(); }

// True when `small` equals the trailing extents of `big` (leading 1s ignored).
bool trailing_match(const Shape& big, const Shape& small) {
  int r = small.rank();
  while (r > 1 && small[small.rank() - r] == 1) --r;
  if (r > big.rank()) return false;
  for (int i = 0; i < r; ++i) {
    if (small[small.rank() - 1 - i] != big[big.rank() - 1 - i]) return false;
  }
  return true;
}

}  // namespace

template <typename Scalar>
void fill_dropout_mask(Scalar* out, Index n, double rate, Rng& rng) {
  // Four 16-bit draws per 64-bit output; drop probability is
  // round(rate * 65536) / 65536.
  const auto threshold = static_cast<std::uint64_t>(std::llround(rate * 65536.0));
  const Scalar keep = Scalar(1.0 / (1.0 - rate));
  Index i = 0;
  while (i < n) {
    std::uint64_t bits = rng.next_u64();
    for (int c = 0; c < 4 && i < n; ++c, ++i, bits >>= 16) {
      out[i] = (bits & 0xffffu) < threshold ? Scalar(0) : keep;
    }
  }
}

template <typename Scalar>
Node<Scalar> matmul(const Node<Scalar>& a, const Node<Scalar>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.rank() < 2 || sb.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + pair_str(sa, sb));
  }
  if (sb.rank() == 2) {
    if (sa.cols() != sb[0]) throw DimensionError("matmul inner extents differ: " + pair_str(sa, sb));
    const Shape so = sa.rank() == 3 ? Shape{sa[0], sa[1], sb[1]} : Shape{sa[0], sb[1]};
    Array<Scalar> out(so);
    out.matrix().noalias() = a.value().matrix() * b.value().matrix();
    return make_result<Scalar>(std::move(out), {a, b}, [](Data<Scalar>& self) {
      const auto g = self.grad.matrix();
      const auto& av = self.parents[0]->value;
      const auto& bv = self.parents[1]->value;
      if (wants(self, 0)) grad_of(self, 0).matrix().noalias() += g * bv.matrix().transpose();
      if (wants(self, 1)) grad_of(self, 1).matrix().noalias() += av.matrix().transpose() * g;
    });
  }
  if (sa.rank() != 3 || sb.rank() != 3 || sa[0] != sb[0] || sa[2] != sb[1]) {
    throw DimensionError("batched matmul shapes incompatible: " + pair_str(sa, sb));
  }
  Array<Scalar> out(Shape{sa[0], sa[1], sb[2]});
  for (Index i = 0; i < sa[0]; ++i) {
    out.item(i).noalias() = a.value().item(i) * b.value().item(i);
  }
  return make_result<Scalar>(std::move(out), {a, b}, [](Data<Scalar>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    for (Index i = 0; i < av.batch(); ++i) {
      const auto g = self.grad.item(i);
      if (wants(self, 0)) grad_of(self, 0).item(i).noalias() += g * bv.item(i).transpose();
      if (wants(self, 1)) grad_of(self, 1).item(i).noalias() += av.item(i).transpose() * g;
    }
  });
}

template <typename Scalar>
Node<Scalar> transpose_last(const Node<Scalar>& x) {
  const Shape& s = x.shape();
  if (s.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + s.str());
  const Shape so = s.rank() == 3 ? Shape{s[0], s[2], s[1]} : Shape{s[1], s[0]};
  Array<Scalar> out(so);
  for (Index i = 0; i < x.value().batch(); ++i) out.item(i) = x.value().item(i).transpose();
  return make_result<Scalar>(std::move(out), {x}, [](Data<Scalar>& self) {
    auto& g = grad_of(self, 0);
    for (Index i = 0; i < g.batch(); ++i) g.item(i) += self.grad.item(i).transpose();
  });
}

template <typename Scalar>
Node<Scalar> add(const Node<Scalar>& a, const Node<Scalar>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) {
    Array<Scalar> out(sa);
    out.flat() = a.value().flat() + b.value().flat();
    return make_result<Scalar>(std::move(out), {a, b}, [](Data<Scalar>& self) {
      if (wants(self, 0)) grad_of(self, 0).flat() += self.grad.flat();
      if (wants(self, 1)) grad_of(self, 1).flat() += self.grad.flat();
    });
  }
  if (sb.size() == 0 || sa.size() % sb.size() != 0 || !trailing_match(sa, sb)) {
    throw DimensionError("add cannot broadcast " + pair_str(sa, sb));
  }
  const Index inner = sb.size();
  const Index reps = sa.size() / inner;
  Array<Scalar> out(sa);
  {
    Eigen::Map<RowMatrix<Scalar>> o(out.data(), reps, inner);
    Eigen::Map<const RowMatrix<Scalar>> av(a.value().data(), reps, inner);
    Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> bv(b.value().data(), inner);
    o = av.rowwise() + bv;
  }
  return make_result<Scalar>(std::move(out), {a, b}, [reps, inner](Data<Scalar>& self) {
    if (wants(self, 0)) grad_of(self, 0).flat() += self.grad.flat();
    if (wants(self, 1)) {
      Eigen::Map<const RowMatrix<Scalar>> g(self.grad.data(), reps, inner);
      Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> gb(grad_of(self, 1).data(), inner);
      gb += g.colwise().sum();
    }
  });
}

template <typename Scalar>
Node<Scalar> mul(const Node<Scalar>& a, const Node<Scalar>& b) {
  if (a.shape() != b.shape()) throw DimensionError("mul shapes differ: " + pair_str(a.shape(), b.shape()));
  Array<Scalar> out(a.shape());
  out.flat() = a.value().flat().cwiseProduct(b.value().flat());
  return make_result<Scalar>(std::move(out), {a, b}, [](Data<Scalar>& self) {
    const auto& av = self.parents[0]->value.flat();
    const auto& bv = self.parents[1]->value.flat();
    if (wants(self, 0)) grad_of(self, 0).flat() += self.grad.flat().cwiseProduct(bv);
    if (wants(self, 1)) grad_of(self, 1).flat() += self.grad.flat().cwiseProduct(av);
  });
}

template <typename Scalar>
Node<Scalar> scale(const Node<Scalar>& x, Scalar factor) {
  Array<Scalar> out(x.shape());
  out.flat() = x.value().flat() * factor;
  return make_result<Scalar>(std::move(out), {x}, [factor](Data<Scalar>& self) {
    grad_of(self, 0).flat() += self.grad.flat() * factor;
  });
}

template <typename Scalar>
Node<Scalar> relu(const Node<Scalar>& x) {
  Array<Scalar> out(x.shape());
  out.flat() = x.value().flat().cwiseMax(Scalar(0));
  return make_result<Scalar>(std::move(out), {x}, [](Data<Scalar>& self) {
    const auto& xv = self.parents[0]->value.flat();
    grad_of(self, 0).flat().array() +=
        (xv.array() > Scalar(0)).select(self.grad.flat().array(), Scalar(0));
  });
}

template <typename Scalar>
Node<Scalar> sigmoid(const Node<Scalar>& x) {
  Array<Scalar> out(x.shape());
  out.flat() = x.value().flat().unaryExpr([](Scalar z) {
    // Split by sign so exp never overflows.
    if (z >= 0) return Scalar(1) / (Scalar(1) + std::exp(-z));
    const Scalar e = std::exp(z);
    return e / (Scalar(1) + e);
  });
  return make_result<Scalar>(std::move(out), {x}, [](Data<Scalar>& self) {
    const auto y = self.value.flat().array();
    grad_of(self, 0).flat().array() += self.grad.flat().array() * y * (Scalar(1) - y);
  });
}

template <typename Scalar>
Node<Scalar> softmax_rows(const Node<Scalar>& x) {
  if (x.shape().cols() < 1) throw DimensionError("softmax over empty rows " + x.shape().str());
  if (!x.value().all_finite()) throw NumericError("softmax input contains non-finite values");
  Array<Scalar> out(x.shape());
  auto y = out.matrix();
  const auto xv = x.value().matrix();
  for (Index r = 0; r < y.rows(); ++r) {
    const Scalar m = xv.row(r).maxCoeff();
    y.row(r) = (xv.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return make_result<Scalar>(std::move(out), {x}, [](Data<Scalar>& self) {
    const auto y = self.value.matrix();
    const auto g = self.grad.matrix();
    auto gx = grad_of(self, 0).matrix();
    for (Index r = 0; r < y.rows(); ++r) {
      const Scalar dot = g.row(r).dot(y.row(r));
      gx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

template <typename Scalar>
Node<Scalar> causal_mask(const Node<Scalar>& scores) {
  const Shape& s = scores.shape();
  if (s.rank() < 2) throw DimensionError("causal mask needs rank >= 2, got " + s.str());
  const Index tq = scores.value().item_rows();
  const Index tk = s.cols();
  if (tq > tk) throw DimensionError("causal mask with more queries than keys: " + s.str());
  const Index offset = tk - tq;
  const Scalar fill = std::numeric_limits<Scalar>::lowest() / Scalar(2);
  Array<Scalar> out = scores.value();
  for (Index b = 0; b < out.batch(); ++b) {
    auto m = out.item(b);
    for (Index i = 0; i < tq; ++i) {
      const Index first_masked = i + offset + 1;
      if (first_masked < tk) m.row(i).tail(tk - first_masked).setConstant(fill);
    }
  }
  return make_result<Scalar>(std::move(out), {scores}, [tq, tk, offset](Data<Scalar>& self) {
    auto& gx = grad_of(self, 0);
    for (Index b = 0; b < gx.batch(); ++b) {
      auto gi = gx.item(b);
      const auto go = self.grad.item(b);
      for (Index i = 0; i < tq; ++i) {
        const Index keep = std::min(tk, i + offset + 1);
        gi.row(i).head(keep) += go.row(i).head(keep);
      }
    }
  });
}

template <typename Scalar>
Node<Scalar> layer_norm(const Node<Scalar>& x, const Node<Scalar>& gain, const Node<Scalar>& bias,
                        Scalar eps) {
  const Index d = x.shape().cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm gain/bias " + pair_str(gain.shape(), bias.shape()) +
                         " do not match features of " + x.shape().str());
  }
  const Index rows = x.shape().rows();
  Array<Scalar> out(x.shape());
  RowMatrix<Scalar> xhat(rows, d);
  Vector<Scalar> inv_std(rows);
  const auto xv = x.value().matrix();
  const auto gv = gain.value().flat().transpose();
  const auto bv = bias.value().flat().transpose();
  auto y = out.matrix();
  for (Index r = 0; r < rows; ++r) {
    const Scalar mu = xv.row(r).mean();
    const auto centered = (xv.row(r).array() - mu).matrix();
    const Scalar var = centered.squaredNorm() / Scalar(d);
    inv_std[r] = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std[r];
    y.row(r) = xhat.row(r).cwiseProduct(gv) + bv;
  }
  return make_result<Scalar>(
      std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), d](Data<Scalar>& self) {
        const auto g = self.grad.matrix();
        const auto gv = self.parents[1]->value.flat().transpose();
        if (wants(self, 0)) {
          auto gx = grad_of(self, 0).matrix();
          for (Index r = 0; r < g.rows(); ++r) {
            const auto dxhat = g.row(r).cwiseProduct(gv);
            const Scalar mean_d = dxhat.sum() / Scalar(d);
            const Scalar mean_dx = dxhat.dot(xhat.row(r)) / Scalar(d);
            gx.row(r).array() +=
                inv_std[r] * (dxhat.array() - mean_d - xhat.row(r).array() * mean_dx);
          }
        }
        if (wants(self, 1)) {
          grad_of(self, 1).flat() += g.cwiseProduct(xhat).colwise().sum().transpose();
        }
        if (wants(self, 2)) grad_of(self, 2).flat() += g.colwise().sum().transpose();
      });
}

template <typename Scalar>
Node<Scalar> embed_lookup(const Node<Scalar>& table, const TokenMatrix& indices) {
  if (table.shape().rank() != 2) throw DimensionError("embedding table must be rank 2, got " + table.shape().str());
  const Index vocab = table.shape()[0];
  const Index d = table.shape()[1];
  for (Index i = 0; i < indices.size(); ++i) {
    const int t = indices.data()[i];
    if (t < 0 || t >= vocab) {
      throw VocabularyError("index " + std::to_string(t) + " outside table of " +
                            std::to_string(vocab) + " rows");
    }
  }
  Array<Scalar> out(Shape{indices.rows(), indices.cols(), d});
  auto o = out.matrix();
  const auto tv = table.value().matrix();
  for (Index i = 0; i < indices.size(); ++i) o.row(i) = tv.row(indices.data()[i]);
  return make_result<Scalar>(std::move(out), {table}, [indices](Data<Scalar>& self) {
    auto gt = grad_of(self, 0).matrix();
    const auto g = self.grad.matrix();
    for (Index i = 0; i < indices.size(); ++i) gt.row(indices.data()[i]) += g.row(i);
  });
}

template <typename Scalar>
Node<Scalar> dropout(const Node<Scalar>& x, double rate, Rng* rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("dropout rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  if (rng == nullptr) throw ContractError("training-mode dropout needs an rng");
  Array<Scalar> mask(x.shape());
  fill_dropout_mask(mask.data(), mask.size(), rate, *rng);
  Array<Scalar> out(x.shape());
  out.flat() = x.value().flat().cwiseProduct(mask.flat());
  return make_result<Scalar>(std::move(out), {x}, [mask = std::move(mask)](Data<Scalar>& self) {
    grad_of(self, 0).flat() += self.grad.flat().cwiseProduct(mask.flat());
  });
}

template <typename Scalar>
Node<Scalar> concat_features(const std::vector<Node<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat of zero arrays");
  const Shape& s0 = parts.front().shape();
  Index total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.rank() != s0.rank() || s.rows() != s0.rows() ||
        (s.rank() == 3 && s[0] != s0[0])) {
      throw DimensionError("concat shapes incompatible: " + pair_str(s0, s));
    }
    total += s.cols();
  }
  Shape so = s0.rank() == 3 ? Shape{s0[0], s0[1], total}
                            : (s0.rank() == 2 ? Shape{s0[0], total} : Shape{total});
  Array<Scalar> out(so);
  std::vector<Index> widths;
  Index at = 0;
  for (const auto& p : parts) {
    const Index w = p.shape().cols();
    out.matrix().middleCols(at, w) = p.value().matrix();
    widths.push_back(w);
    at += w;
  }
  return make_result<Scalar>(std::move(out), parts, [widths](Data<Scalar>& self) {
    Index at = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (wants(self, i)) grad_of(self, i).matrix() += self.grad.matrix().middleCols(at, widths[i]);
      at += widths[i];
    }
  });
}

template <typename Scalar>
Node<Scalar> slice_features(const Node<Scalar>& x, Index start, Index length) {
  const Shape& s = x.shape();
  if (start < 0 || length < 0 || start + length > s.cols()) {
    throw DimensionError("feature slice out of range for " + s.str());
  }
  Shape so = s.rank() == 3 ? Shape{s[0], s[1], length}
                           : (s.rank() == 2 ? Shape{s[0], length} : Shape{length});
  Array<Scalar> out(so);
  out.matrix() = x.value().matrix().middleCols(start, length);
  return make_result<Scalar>(std::move(out), {x}, [start, length](Data<Scalar>& self) {
    grad_of(self, 0).matrix().middleCols(start, length) += self.grad.matrix();
  });
}

template <typename Scalar>
Node<Scalar> slice_positions(const Node<Scalar>& x, Index start, Index length) {
  const Shape& s = x.shape();
  if (s.rank() != 3) throw DimensionError("position slice needs rank 3, got " + s.str());
  if (start < 0 || length < 0 || start + length > s[1]) {
    throw DimensionError("position slice out of range for " + s.str());
  }
  Array<Scalar> out(Shape{s[0], length, s[2]});
  for (Index b = 0; b < s[0]; ++b) out.item(b) = x.value().item(b).middleRows(start, length);
  return make_result<Scalar>(std::move(out), {x}, [start, length](Data<Scalar>& self) {
    auto& g = grad_of(self, 0);
    for (Index b = 0; b < g.batch(); ++b) g.item(b).middleRows(start, length) += self.grad.item(b);
  });
}

template <typename Scalar>
Node<Scalar> sum(const Node<Scalar>& x) {
  Array<Scalar> out(Shape{1});
  out[0] = x.value().flat().sum();
  return make_result<Scalar>(std::move(out), {x}, [](Data<Scalar>& self) {
    grad_of(self, 0).flat().array() += self.grad[0];
  });
}

template <typename Scalar>
Node<Scalar> mean(const Node<Scalar>& x) {
  return scale(sum(x), Scalar(1) / Scalar(x.value().size()));
}

template <typename Scalar>
Node<Scalar> cross_entropy(const Node<Scalar>& logits, std::span<const int> targets) {
  const Index rows = logits.shape().rows();
  const Index vocab = logits.shape().cols();
  if (static_cast<Index>(targets.size()) != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         logits.shape().str());
  }
  const auto z = logits.value().matrix();
  RowMatrix<Scalar> probs(rows, vocab);
  Scalar total = 0;
  for (Index r = 0; r < rows; ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= vocab) {
      throw VocabularyError("target " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(vocab));
    }
    const Scalar m = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - m).exp().matrix();
    const Scalar norm = probs.row(r).sum();
    probs.row(r) /= norm;
    total += (m + std::log(norm)) - z(r, t);
  }
  if (!std::isfinite(total)) throw NumericError("cross_entropy produced a non-finite loss");
  Array<Scalar> out(Shape{1});
  out[0] = total / Scalar(rows);
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result<Scalar>(
      std::move(out), {logits},
      [probs = std::move(probs), tgt = std::move(tgt)](Data<Scalar>& self) {
        const Scalar w = self.grad[0] / Scalar(probs.rows());
        auto g = grad_of(self, 0).matrix();
        g += probs * w;
        for (Index r = 0; r < probs.rows(); ++r) g(r, tgt[static_cast<std::size_t>(r)]) -= w;
      });
}

template <typename Scalar>
Node<Scalar> bce_with_logits(const Node<Scalar>& logits, std::span<const Scalar> labels) {
  const Index n = logits.value().size();
  if (static_cast<Index>(labels.size()) != n) {
    throw DimensionError("bce: " + std::to_string(labels.size()) + " labels for logits " +
                         logits.shape().str());
  }
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar z = logits.value()[i];
    const Scalar y = labels[static_cast<std::size_t>(i)];
    total += std::max(z, Scalar(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  if (!std::isfinite(total)) throw NumericError("bce produced a non-finite loss");
  Array<Scalar> out(Shape{1});
  out[0] = total / Scalar(n);
  std::vector<Scalar> y(labels.begin(), labels.end());
  return make_result<Scalar>(std::move(out), {logits}, [y = std::move(y)](Data<Scalar>& self) {
    auto& g = grad_of(self, 0);
    const auto& z = self.parents[0]->value;
    const Scalar w = self.grad[0] / Scalar(y.size());
    for (Index i = 0; i < z.size(); ++i) {
      const Scalar zi = z[i];
      const Scalar p = zi >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-zi))
                               : std::exp(zi) / (Scalar(1) + std::exp(zi));
      g[i] += w * (p - y[static_cast<std::size_t>(i)]);
    }
  });
}

#define PULSEFORMER_INSTANTIATE_OPS(S)                                                          \
  template Node<S> matmul<S>(const Node<S>&, const Node<S>&);                                   \
  template Node<S> transpose_last<S>(const Node<S>&);                                           \
  template Node<S> add<S>(const Node<S>&, const Node<S>&);                                      \
  template Node<S> mul<S>(const Node<S>&, const Node<S>&);                                      \
  template Node<S> scale<S>(const Node<S>&, S);                                                 \
  template Node<S> relu<S>(const Node<S>&);                                                     \
  template Node<S> sigmoid<S>(const Node<S>&);                                                  \
  template Node<S> softmax_rows<S>(const Node<S>&);                                             \
  template Node<S> causal_mask<S>(const Node<S>&);                                              \
  template Node<S> layer_norm<S>(const Node<S>&, const Node<S>&, const Node<S>&, S);            \
  template Node<S> embed_lookup<S>(const Node<S>&, const TokenMatrix&);                         \
  template Node<S> dropout<S>(const Node<S>&, double, Rng*, bool);                              \
  template Node<S> concat_features<S>(const std::vector<Node<S>>&);                             \
  template Node<S> slice_features<S>(const Node<S>&, Index, Index);                             \
  template Node<S> slice_positions<S>(const Node<S>&, Index, Index);                            \
  template Node<S> sum<S>(const Node<S>&);                                                      \
  template Node<S> mean<S>(const Node<S>&);                                                     \
  template Node<S> cross_entropy<S>(const Node<S>&, std::span<const int>);                      \
  template Node<S> bce_with_logits<S>(const Node<S>&, std::span<const S>);

template void fill_dropout_mask<float>(float*, Index, double, Rng&);
template void fill_dropout_mask<double>(double*, Index, double, Rng&);

PULSEFORMER_INSTANTIATE_OPS(float)
PULSEFORMER_INSTANTIATE_OPS(double)

}  // namespace pulseformer
