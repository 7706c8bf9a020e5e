#pragma once

#include <span>
#include <vector>

#include "pulseformer/autodiff.hpp"
#include "pulseformer/rng.hpp"

namespace pulseformer {

// Differentiable operations. Every op validates shapes up front and throws
// DimensionError naming the offending shapes.

/// a: [M x K] or [B x M x K]; b: [K x N] (shared across the batch) or
/// [B x K x N] (per batch item).
template <typename Scalar>
Node<Scalar> matmul(const Node<Scalar>& a, const Node<Scalar>& b);

/// Swaps the two innermost axes.
template <typename Scalar>
Node<Scalar> transpose_last(const Node<Scalar>& x);

/// Elementwise sum. `b` may be broadcast when its extents match the
/// trailing extents of `a` (bias vectors, position tables).
template <typename Scalar>
Node<Scalar> add(const Node<Scalar>& a, const Node<Scalar>& b);

/// Elementwise product of equal shapes.
template <typename Scalar>
Node<Scalar> mul(const Node<Scalar>& a, const Node<Scalar>& b);

template <typename Scalar>
Node<Scalar> scale(const Node<Scalar>& x, Scalar factor);

template <typename Scalar>
Node<Scalar> relu(const Node<Scalar>& x);

template <typename Scalar>
Node<Scalar> sigmoid(const Node<Scalar>& x);

/// Softmax over the last axis with max subtraction. Throws NumericError on
/// non-finite input.
template <typename Scalar>
Node<Scalar> softmax_rows(const Node<Scalar>& x);

/// Replaces scores above the causal diagonal with a large negative finite
/// value. Row i of a [Tq x Tk] item sits at absolute position i + Tk - Tq.
template <typename Scalar>
Node<Scalar> causal_mask(const Node<Scalar>& scores);

/// Per-row normalization to zero mean and unit variance (epsilon inside the
/// square root), then gain * xhat + bias. gain and bias are rank-1 [D].
template <typename Scalar>
Node<Scalar> layer_norm(const Node<Scalar>& x, const Node<Scalar>& gain,
                        const Node<Scalar>& bias, Scalar eps = Scalar(1e-5));

/// Gathers rows of `table` [V x D] for each index: result [B x T x D].
template <typename Scalar>
Node<Scalar> embed_lookup(const Node<Scalar>& table, const TokenMatrix& indices);

/// Writes n inverted-dropout multipliers (0 or 1/(1-rate)).
template <typename Scalar>
void fill_dropout_mask(Scalar* out, Index n, double rate, Rng& rng);

/// Inverted dropout. Identity when `training` is false or rate is 0.
template <typename Scalar>
Node<Scalar> dropout(const Node<Scalar>& x, double rate, Rng* rng, bool training);

template <typename Scalar>
Node<Scalar> concat_features(const std::vector<Node<Scalar>>& parts);

template <typename Scalar>
Node<Scalar> slice_features(const Node<Scalar>& x, Index start, Index length);

/// Slice along the sequence axis of a rank-3 array.
template <typename Scalar>
Node<Scalar> slice_positions(const Node<Scalar>& x, Index start, Index length);

template <typename Scalar>
Node<Scalar> sum(const Node<Scalar>& x);

template <typename Scalar>
Node<Scalar> mean(const Node<Scalar>& x);

/// Mean negative log-likelihood of `targets` (one per row of `logits`).
template <typename Scalar>
Node<Scalar> cross_entropy(const Node<Scalar>& logits, std::span<const int> targets);

/// Mean binary cross-entropy of sigmoid(logits) against labels in {0, 1},
/// evaluated in the numerically stable logit form.
template <typename Scalar>
Node<Scalar> bce_with_logits(const Node<Scalar>& logits, std::span<const Scalar> labels);

/// Per-head attention weights for one sequence, one [Tq x Tk] matrix per head.
template <typename Scalar>
using AttentionCapture = std::vector<RowMatrix<Scalar>>;

/// Fused multi-head causal self-attention,
///   concat_h softmax(mask(Q_h K_h^T / sqrt(d_k))) V_h,
/// with heads laid out as consecutive column blocks of width D / n_heads.
/// q: [B x Tq x D], k and v: [B x Tk x D], Tq <= Tk; query row i is the
/// token at absolute position Tk - Tq + i. Dropout hits the attention
/// weights after softmax. When `capture` is set (B must be 1) the
/// pre-dropout weights are appended to it, one matrix per head.
template <typename Scalar>
Node<Scalar> causal_attention(const Node<Scalar>& q, const Node<Scalar>& k,
                              const Node<Scalar>& v, int n_heads, double dropout_rate,
                              Rng* rng, bool training,
                              AttentionCapture<Scalar>* capture = nullptr);

}  // namespace pulseformer
