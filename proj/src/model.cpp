#include "pulseformer/model.hpp"

#include <numeric>

namespace pulseformer {

void ModelConfig::validate() const {
  if (d_model <= 0 || n_blocks <= 0 || n_heads <= 0 || vocab <= 1 || max_context <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model}, {"n_blocks", c.n_blocks},
                     {"n_heads", c.n_heads}, {"vocab", c.vocab},
                     {"max_context", c.max_context}, {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.d_model = j.value("d_model", c.d_model);
  c.n_blocks = j.value("n_blocks", c.n_blocks);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.vocab = j.value("vocab", c.vocab);
  c.max_context = j.value("max_context", c.max_context);
  c.dropout = j.value("dropout", c.dropout);
}

std::string to_string(HeadKind head) { return head == HeadKind::lm ? "lm" : "cls"; }

HeadKind head_from_string(const std::string& s) {
  if (s == "lm") return HeadKind::lm;
  if (s == "cls") return HeadKind::cls;
  throw ConfigError("unknown head type '" + s + "'");
}

std::string block_prefix(int layer) { return "blocks." + std::to_string(layer) + "."; }

std::vector<std::string> block_tensor_names(const ModelConfig& config, int layer) {
  std::vector<std::string> names;
  for (const auto& [name, shape] : parameter_shapes(config, HeadKind::lm)) {
    if (name.rfind(block_prefix(layer), 0) == 0) names.push_back(name);
  }
  return names;
}

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config, HeadKind head) {
  config.validate();
  const Index d = config.d_model;
  std::vector<std::pair<std::string, Shape>> shapes = {
      {"token_embedding", Shape{config.vocab, d}},
      {"position_embedding", Shape{config.max_context, d}},
  };
  for (int l = 0; l < config.n_blocks; ++l) {
    const std::string p = block_prefix(l);
    shapes.insert(shapes.end(), {
                                    {p + "ln1.gain", Shape{d}},
                                    {p + "ln1.bias", Shape{d}},
                                    {p + "attn.query", Shape{d, d}},
                                    {p + "attn.key", Shape{d, d}},
                                    {p + "attn.value", Shape{d, d}},
                                    {p + "attn.proj.weight", Shape{d, d}},
                                    {p + "attn.proj.bias", Shape{d}},
                                    {p + "ln2.gain", Shape{d}},
                                    {p + "ln2.bias", Shape{d}},
                                    {p + "ffn.fc1.weight", Shape{d, 4 * d}},
                                    {p + "ffn.fc1.bias", Shape{4 * d}},
                                    {p + "ffn.fc2.weight", Shape{4 * d, d}},
                                    {p + "ffn.fc2.bias", Shape{d}},
                                });
  }
  shapes.push_back({"final_ln.gain", Shape{d}});
  shapes.push_back({"final_ln.bias", Shape{d}});
  if (head == HeadKind::lm) {
    shapes.push_back({"lm_head.weight", Shape{d, config.vocab}});
    shapes.push_back({"lm_head.bias", Shape{config.vocab}});
  } else {
    shapes.push_back({"cls_head.weight", Shape{d, 1}});
    shapes.push_back({"cls_head.bias", Shape{1}});
  }
  return shapes;
}

Index param_count(const ModelConfig& config, HeadKind head) {
  Index n = 0;
  for (const auto& [name, shape] : parameter_shapes(config, head)) n += shape.size();
  return n;
}

TokenMatrix as_row(std::span<const int> tokens) {
  TokenMatrix m(1, static_cast<Index>(tokens.size()));
  for (std::size_t i = 0; i < tokens.size(); ++i) m(0, static_cast<Index>(i)) = tokens[i];
  return m;
}

template <typename Scalar>
ParamStore<Scalar>::ParamStore(const ModelConfig& config, HeadKind head) : config_(config), head_(head) {
  for (const auto& [name, shape] : parameter_shapes(config, head)) {
    index_[name] = tensors_.size();
    tensors_.push_back({name, Node<Scalar>::parameter(Array<Scalar>(shape))});
    trainable_.insert(name);
  }
}

template <typename Scalar>
const Node<Scalar>& ParamStore<Scalar>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no tensor named '" + name + "'");
  return tensors_[it->second].node;
}

template <typename Scalar>
Node<Scalar>& ParamStore<Scalar>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no tensor named '" + name + "'");
  return tensors_[it->second].node;
}

template <typename Scalar>
void ParamStore<Scalar>::set_trainable(const std::set<std::string>& names) {
  for (const auto& n : names) {
    if (!contains(n)) throw ContractError("cannot train unknown tensor '" + n + "'");
  }
  trainable_ = names;
  for (auto& t : tensors_) t.node.set_requires_grad(trainable_.count(t.name) > 0);
}

template <typename Scalar>
Index ParamStore<Scalar>::count() const {
  Index n = 0;
  for (const auto& t : tensors_) n += t.node.value().size();
  return n;
}

template <typename Scalar>
Index ParamStore<Scalar>::trainable_count() const {
  Index n = 0;
  for (const auto& t : tensors_)
    if (is_trainable(t.name)) n += t.node.value().size();
  return n;
}

template <typename Scalar>
void ParamStore<Scalar>::zero_grad() {
  for (auto& t : tensors_) t.node.zero_grad();
}

template <typename Scalar>
ParamStore<Scalar> ParamStore<Scalar>::clone() const {
  ParamStore out(config_, head_);
  for (const auto& t : tensors_) out.at(t.name).mutable_value() = t.node.value();
  out.set_trainable(trainable_);
  return out;
}

namespace {

bool is_norm_or_bias(const std::string& name) {
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".bias") || ends_with(".gain");
}

template <typename Scalar>
void init_tensor(const std::string& name, Array<Scalar>& a, Rng& rng) {
  if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".gain") == 0) {
    a.flat().setOnes();
  } else if (is_norm_or_bias(name)) {
    a.flat().setZero();
  } else {
    for (Index i = 0; i < a.size(); ++i) a[i] = static_cast<Scalar>(rng.normal(0.0, 0.02));
  }
}

void check_tokens(const ModelConfig& config, const TokenMatrix& tokens) {
  if (tokens.cols() < 1) throw ContractError("empty token sequence");
  if (tokens.cols() > config.max_context) {
    throw ContextOverflowError("sequence of " + std::to_string(tokens.cols()) +
                               " tokens exceeds the context of " + std::to_string(config.max_context));
  }
  for (Index i = 0; i < tokens.size(); ++i) {
    const int t = tokens.data()[i];
    if (t < 0 || t >= config.vocab) {
      throw VocabularyError("token " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(config.vocab));
    }
  }
}

}  // namespace

template <typename Scalar>
ParamStore<Scalar> init_params(const ModelConfig& config, HeadKind head, Rng& rng) {
  ParamStore<Scalar> params(config, head);
  for (auto& t : params.tensors()) init_tensor(t.name, t.node.mutable_value(), rng);
  return params;
}

template <typename Scalar>
Node<Scalar> embed(const ParamStore<Scalar>& params, const TokenMatrix& tokens) {
  check_tokens(params.config(), tokens);
  TokenMatrix positions(1, tokens.cols());
  std::iota(positions.data(), positions.data() + positions.size(), 0);
  return add(embed_lookup(params.at("token_embedding"), tokens),
             embed_lookup(params.at("position_embedding"), positions));
}

template <typename Scalar>
Node<Scalar> transformer_block(const ParamStore<Scalar>& params, int layer, const Node<Scalar>& x,
                               Mode mode, Rng* rng, bool last_query_only,
                               AttentionCapture<Scalar>* capture) {
  const auto& cfg = params.config();
  const std::string p = block_prefix(layer);
  const bool training = mode == Mode::train;
  const Index t = x.shape()[1];

  auto h = layer_norm(x, params.at(p + "ln1.gain"), params.at(p + "ln1.bias"));
  auto hq = last_query_only ? slice_positions(h, t - 1, 1) : h;
  auto q = matmul(hq, params.at(p + "attn.query"));
  auto k = matmul(h, params.at(p + "attn.key"));
  auto v = matmul(h, params.at(p + "attn.value"));
  auto att = causal_attention(q, k, v, cfg.n_heads, cfg.dropout, rng, training, capture);
  auto proj = add(matmul(att, params.at(p + "attn.proj.weight")), params.at(p + "attn.proj.bias"));
  auto residual = last_query_only ? slice_positions(x, t - 1, 1) : x;
  auto x1 = add(residual, dropout(proj, cfg.dropout, rng, training));

  auto h2 = layer_norm(x1, params.at(p + "ln2.gain"), params.at(p + "ln2.bias"));
  auto hidden = relu(add(matmul(h2, params.at(p + "ffn.fc1.weight")), params.at(p + "ffn.fc1.bias")));
  auto ff = add(matmul(hidden, params.at(p + "ffn.fc2.weight")), params.at(p + "ffn.fc2.bias"));
  return add(x1, dropout(ff, cfg.dropout, rng, training));
}

template <typename Scalar>
Node<Scalar> apply_head(const ParamStore<Scalar>& params, const Node<Scalar>& x) {
  auto h = layer_norm(x, params.at("final_ln.gain"), params.at("final_ln.bias"));
  const std::string head = params.head() == HeadKind::lm ? "lm_head" : "cls_head";
  return add(matmul(h, params.at(head + ".weight")), params.at(head + ".bias"));
}

template <typename Scalar>
Node<Scalar> forward(const ParamStore<Scalar>& params, const TokenMatrix& tokens, Mode mode, Rng* rng,
                     ForwardTrace<Scalar>* trace) {
  if (trace != nullptr && tokens.rows() != 1) throw ContractError("forward trace needs batch 1");
  auto x = embed(params, tokens);
  if (trace != nullptr) {
    trace->attention.weights.clear();
    trace->residual.clear();
    trace->residual.push_back(x.value().item(0));
  }
  for (int l = 0; l < params.config().n_blocks; ++l) {
    AttentionCapture<Scalar>* capture = nullptr;
    if (trace != nullptr) capture = &trace->attention.weights.emplace_back();
    x = transformer_block(params, l, x, mode, rng, false, capture);
    if (trace != nullptr) trace->residual.push_back(x.value().item(0));
  }
  return apply_head(params, x);
}

template <typename Scalar>
std::pair<RowMatrix<Scalar>, AttentionRecord<Scalar>> forward_with_attention(
    const ParamStore<Scalar>& params, std::span<const int> tokens) {
  NoGradGuard no_grad;
  ForwardTrace<Scalar> trace;
  auto logits = forward(params, as_row(tokens), Mode::eval, nullptr, &trace);
  return {RowMatrix<Scalar>(logits.value().item(0)), std::move(trace.attention)};
}

template <typename Scalar>
Node<Scalar> trunk(const ParamStore<Scalar>& params, const TokenMatrix& tokens, Mode mode, Rng* rng) {
  auto x = embed(params, tokens);
  for (int l = 0; l + 1 < params.config().n_blocks; ++l) x = transformer_block(params, l, x, mode, rng);
  return x;
}

template <typename Scalar>
Node<Scalar> classify_from_trunk(const ParamStore<Scalar>& params, const Node<Scalar>& trunk_out,
                                 Mode mode, Rng* rng) {
  if (params.head() != HeadKind::cls) throw ContractError("classification needs the classification head");
  const int last = params.config().n_blocks - 1;
  return apply_head(params, transformer_block(params, last, trunk_out, mode, rng, true));
}

template <typename Scalar>
Vector<Scalar> forward_classify(const ParamStore<Scalar>& params, const TokenMatrix& tokens, Mode mode,
                                Rng* rng) {
  if (params.head() != HeadKind::cls) throw ContractError("forward_classify needs the classification head");
  return sigmoid(classify_from_trunk(params, trunk(params, tokens, mode, rng), mode, rng)).value().flat();
}

template <typename Scalar>
ParamStore<Scalar> swap_head(const ParamStore<Scalar>& lm_params, Rng& rng, bool train_final_norm) {
  if (lm_params.head() != HeadKind::lm) throw ContractError("swap_head expects a language-model head");
  const auto& cfg = lm_params.config();
  ParamStore<Scalar> out(cfg, HeadKind::cls);
  for (auto& t : out.tensors()) {
    if (lm_params.contains(t.name)) {
      t.node.mutable_value() = lm_params.at(t.name).value();
    } else {
      init_tensor(t.name, t.node.mutable_value(), rng);
    }
  }
  std::set<std::string> trainable = {"cls_head.weight", "cls_head.bias"};
  for (const auto& name : block_tensor_names(cfg, cfg.n_blocks - 1)) trainable.insert(name);
  if (train_final_norm) {
    trainable.insert("final_ln.gain");
    trainable.insert("final_ln.bias");
  }
  out.set_trainable(trainable);
  return out;
}

#define PULSEFORMER_INSTANTIATE_MODEL(S)                                                        \
  template class ParamStore<S>;                                                                 \
  template ParamStore<S> init_params<S>(const ModelConfig&, HeadKind, Rng&);                    \
  template Node<S> embed<S>(const ParamStore<S>&, const TokenMatrix&);                          \
  template Node<S> transformer_block<S>(const ParamStore<S>&, int, const Node<S>&, Mode, Rng*,  \
                                        bool, AttentionCapture<S>*);                            \
  template Node<S> apply_head<S>(const ParamStore<S>&, const Node<S>&);                         \
  template Node<S> forward<S>(const ParamStore<S>&, const TokenMatrix&, Mode, Rng*,             \
                              ForwardTrace<S>*);                                                \
  template std::pair<RowMatrix<S>, AttentionRecord<S>> forward_with_attention<S>(               \
      const ParamStore<S>&, std::span<const int>);                                              \
  template Node<S> trunk<S>(const ParamStore<S>&, const TokenMatrix&, Mode, Rng*);               \
  template Node<S> classify_from_trunk<S>(const ParamStore<S>&, const Node<S>&, Mode, Rng*);     \
  template Vector<S> forward_classify<S>(const ParamStore<S>&, const TokenMatrix&, Mode, Rng*); \
  template ParamStore<S> swap_head<S>(const ParamStore<S>&, Rng&, bool);

PULSEFORMER_INSTANTIATE_MODEL(float)
PULSEFORMER_INSTANTIATE_MODEL(double)

}  // namespace pulseformer
