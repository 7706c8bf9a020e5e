#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pulseformer/ops.hpp"

namespace pulseformer {

/// Architecture hyperparameters. Defaults reproduce the 443,493-parameter
/// language model.
struct ModelConfig {
  int d_model = 64;
  int n_blocks = 8;
  int n_heads = 8;
  int vocab = 101;
  int max_context = 500;
  double dropout = 0.2;

  int head_dim() const { return d_model / n_heads; }
  /// Throws ConfigError on any contradiction.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class HeadKind { lm, cls };
std::string to_string(HeadKind head);
HeadKind head_from_string(const std::string& s);

enum class Mode { train, eval };

/// Every trainable tensor implied by a configuration, in storage order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config, HeadKind head);

/// Exact number of trainable scalars.
Index param_count(const ModelConfig& config, HeadKind head);

/// Tensor-name prefix of block `layer` (0-based).
std::string block_prefix(int layer);

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Node<Scalar> node;
};

/// Named model tensors plus the set of names the optimizer may update.
///
/// Attention projections are stored fused per block: `attn.query` is
/// d_model x d_model and its column block [h*d_k, (h+1)*d_k) is head h's
/// d_model x d_k projection (same for key/value).
template <typename Scalar>
class ParamStore {
 public:
  ParamStore() = default;
  /// Zero-filled tensors of the right shapes, all trainable.
  ParamStore(const ModelConfig& config, HeadKind head);

  const ModelConfig& config() const { return config_; }
  HeadKind head() const { return head_; }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const Node<Scalar>& at(const std::string& name) const;
  Node<Scalar>& at(const std::string& name);
  const std::vector<NamedTensor<Scalar>>& tensors() const { return tensors_; }
  std::vector<NamedTensor<Scalar>>& tensors() { return tensors_; }

  bool is_trainable(const std::string& name) const { return trainable_.count(name) > 0; }
  const std::set<std::string>& trainable() const { return trainable_; }
  /// Restricts optimization to `names`; everything else is frozen and stops
  /// requesting gradients.
  void set_trainable(const std::set<std::string>& names);

  Index count() const;
  Index trainable_count() const;
  void zero_grad();

  /// Deep copy (fresh nodes, same values).
  ParamStore clone() const;

  template <typename Other>
  ParamStore<Other> cast() const {
    ParamStore<Other> out(config_, head_);
    for (const auto& t : tensors_) {
      Array<Other> a(t.node.shape());
      a.flat() = t.node.value().flat().template cast<Other>();
      out.at(t.name).mutable_value() = std::move(a);
    }
    out.set_trainable(trainable_);
    return out;
  }

 private:
  ModelConfig config_;
  HeadKind head_ = HeadKind::lm;
  std::vector<NamedTensor<Scalar>> tensors_;
  std::map<std::string, std::size_t> index_;
  std::set<std::string> trainable_;
};

/// normal(0, 0.02) for embeddings and weight matrices, zero biases, unit
/// layer-norm gains.
template <typename Scalar>
ParamStore<Scalar> init_params(const ModelConfig& config, HeadKind head, Rng& rng);

/// Per-layer, per-head attention weights of one sequence (captured
/// post-softmax, pre-dropout). weights[layer][head] is T x T.
template <typename Scalar>
struct AttentionRecord {
  std::vector<std::vector<RowMatrix<Scalar>>> weights;

  int layers() const { return static_cast<int>(weights.size()); }
  int heads() const { return weights.empty() ? 0 : static_cast<int>(weights.front().size()); }
  Index length() const { return weights.empty() ? 0 : weights.front().front().rows(); }
};

/// Optional taps into a single-sequence forward pass.
template <typename Scalar>
struct ForwardTrace {
  AttentionRecord<Scalar> attention;
  /// residual[0] is the embedded input; residual[l] the stream after block l.
  std::vector<RowMatrix<Scalar>> residual;
};

/// Token + position embeddings, [B x T x d_model].
template <typename Scalar>
Node<Scalar> embed(const ParamStore<Scalar>& params, const TokenMatrix& tokens);

/// One pre-norm transformer block. With `last_query_only` the block emits
/// only the final position (keys and values still span the whole input).
template <typename Scalar>
Node<Scalar> transformer_block(const ParamStore<Scalar>& params, int layer, const Node<Scalar>& x,
                               Mode mode, Rng* rng, bool last_query_only = false,
                               AttentionCapture<Scalar>* capture = nullptr);

/// Final layer norm and whichever head is installed.
template <typename Scalar>
Node<Scalar> apply_head(const ParamStore<Scalar>& params, const Node<Scalar>& x);

/// Full model. tokens is [B x T]; output is [B x T x vocab] for the LM head
/// and [B x T x 1] for the classification head. A trace requires B == 1.
template <typename Scalar>
Node<Scalar> forward(const ParamStore<Scalar>& params, const TokenMatrix& tokens, Mode mode,
                     Rng* rng, ForwardTrace<Scalar>* trace = nullptr);

/// Eval-mode single-sequence pass returning logits [T x vocab] and the
/// attention record.
template <typename Scalar>
std::pair<RowMatrix<Scalar>, AttentionRecord<Scalar>> forward_with_attention(
    const ParamStore<Scalar>& params, std::span<const int> tokens);

/// Embeddings followed by every block except the last: the part of the
/// network that stays frozen during fine-tuning. Output [B x T x d_model].
template <typename Scalar>
Node<Scalar> trunk(const ParamStore<Scalar>& params, const TokenMatrix& tokens, Mode mode, Rng* rng);

/// Final block (last query only), final layer norm and classification head
/// applied to trunk output. Logits [B x 1 x 1].
template <typename Scalar>
Node<Scalar> classify_from_trunk(const ParamStore<Scalar>& params, const Node<Scalar>& trunk_out,
                                 Mode mode, Rng* rng);

/// sigmoid of the classification head at the final position, one
/// probability per row of `tokens`.
template <typename Scalar>
Vector<Scalar> forward_classify(const ParamStore<Scalar>& params, const TokenMatrix& tokens,
                                Mode mode, Rng* rng);

/// Replaces the LM head with a freshly initialized 1-output head. Every other
/// tensor is copied bit for bit. Trainable set becomes the final block and the
/// new head, plus the final layer norm when `train_final_norm` is set.
template <typename Scalar>
ParamStore<Scalar> swap_head(const ParamStore<Scalar>& lm_params, Rng& rng,
                             bool train_final_norm = false);

/// Names of the tensors in block `layer`.
std::vector<std::string> block_tensor_names(const ModelConfig& config, int layer);

TokenMatrix as_row(std::span<const int> tokens);

}  // namespace pulseformer
