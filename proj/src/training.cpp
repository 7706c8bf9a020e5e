#include "pulseformer/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "pulseformer/checkpoint.hpp"

namespace pulseformer {

namespace {

void say(const Progress& progress, const std::string& msg) {
  if (progress) progress(msg);
}

std::ofstream open_csv(const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw DataError("cannot write " + file.string());
  out.precision(9);
  return out;
}

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream s;
  s.precision(9);
  s << v;
  return s.str();
}

}  // namespace

void TrainRunConfig::validate() const {
  if (!(learning_rate > 0.0) || batch_size < 1 || max_iters < 1 || eval_interval < 1 || eval_iters < 1) {
    throw ConfigError("learning rate, batch size and iteration counts must be positive");
  }
  if (eval_interval > max_iters) {
    throw ConfigError("eval_interval " + std::to_string(eval_interval) + " exceeds max_iters " +
                      std::to_string(max_iters));
  }
  if (!(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0 && adamw.beta2 >= 0.0 && adamw.beta2 < 1.0) ||
      !(adamw.eps > 0.0) || adamw.weight_decay < 0.0 || (adamw.clip_norm && !(*adamw.clip_norm > 0.0))) {
    throw ConfigError("invalid AdamW hyperparameters");
  }
}

void to_json(nlohmann::json& j, const TrainRunConfig& c) {
  j = {{"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"max_iters", c.max_iters},
       {"eval_interval", c.eval_interval},
       {"eval_iters", c.eval_iters},
       {"seed", c.seed},
       {"train_final_norm", c.train_final_norm},
       {"adamw",
        {{"beta1", c.adamw.beta1},
         {"beta2", c.adamw.beta2},
         {"eps", c.adamw.eps},
         {"weight_decay", c.adamw.weight_decay},
         {"clip_norm", c.adamw.clip_norm ? nlohmann::json(*c.adamw.clip_norm) : nlohmann::json(nullptr)}}}};
}

void from_json(const nlohmann::json& j, TrainRunConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_iters = j.value("max_iters", c.max_iters);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  c.eval_iters = j.value("eval_iters", c.eval_iters);
  c.seed = j.value("seed", c.seed);
  c.train_final_norm = j.value("train_final_norm", c.train_final_norm);
  if (j.contains("adamw")) {
    const auto& a = j["adamw"];
    c.adamw.beta1 = a.value("beta1", c.adamw.beta1);
    c.adamw.beta2 = a.value("beta2", c.adamw.beta2);
    c.adamw.eps = a.value("eps", c.adamw.eps);
    c.adamw.weight_decay = a.value("weight_decay", c.adamw.weight_decay);
    if (a.contains("clip_norm") && !a["clip_norm"].is_null()) c.adamw.clip_norm = a["clip_norm"].get<double>();
  }
}

bool decays(const std::string& name) {
  if (name == "token_embedding" || name == "position_embedding") return false;
  const bool norm = name.find("ln1.") != std::string::npos || name.find("ln2.") != std::string::npos ||
                    name.rfind("final_ln.", 0) == 0;
  return !norm;
}

template <typename Scalar>
void AdamW<Scalar>::step(ParamStore<Scalar>& params, double lr) {
  std::vector<NamedTensor<Scalar>*> active;
  for (auto& t : params.tensors()) {
    if (!params.is_trainable(t.name)) continue;
    if (t.node.has_grad() && !t.node.grad().all_finite()) {
      throw NumericError("non-finite gradient in tensor '" + t.name + "'");
    }
    active.push_back(&t);
  }
  Scalar clip = Scalar(1);
  if (config_.clip_norm) {
    double sq = 0.0;
    for (auto* t : active)
      if (t->node.has_grad()) sq += static_cast<double>(t->node.grad().flat().squaredNorm());
    const double norm = std::sqrt(sq);
    if (norm > *config_.clip_norm) clip = static_cast<Scalar>(*config_.clip_norm / norm);
  }
  ++steps_;
  const auto t_step = static_cast<double>(steps_);
  const auto b1 = static_cast<Scalar>(config_.beta1);
  const auto b2 = static_cast<Scalar>(config_.beta2);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(config_.beta1, t_step));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(config_.beta2, t_step));
  const auto eps = static_cast<Scalar>(config_.eps);
  const auto rate = static_cast<Scalar>(lr);
  const auto decay = static_cast<Scalar>(lr * config_.weight_decay);
  for (auto* t : active) {
    auto& p = t->node.mutable_value().flat();
    auto [it, fresh] = moments_.try_emplace(t->name);
    if (fresh) {
      it->second.first = Array<Scalar>(t->node.shape());
      it->second.second = Array<Scalar>(t->node.shape());
    }
    auto& m = it->second.first.flat();
    auto& v = it->second.second.flat();
    if (decay != Scalar(0) && decays(t->name)) p -= decay * p;
    if (t->node.has_grad()) {
      const auto g = (t->node.grad().flat() * clip).eval();
      m = b1 * m + (Scalar(1) - b1) * g;
      v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
    } else {
      m *= b1;
      v *= b2;
    }
    p.array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

template class AdamW<float>;
template class AdamW<double>;

std::vector<std::int64_t> eval_points(int max_iters, int eval_interval) {
  std::vector<std::int64_t> out;
  for (std::int64_t i = eval_interval; i <= max_iters; i += eval_interval) out.push_back(i);
  if (out.empty() || out.back() != max_iters) out.push_back(max_iters);
  return out;
}

double estimate_loss(const ParamStore<float>& params, const std::vector<int>& stream, int batches,
                     int batch_size, Rng& rng) {
  NoGradGuard no_grad;
  double total = 0.0;
  for (int i = 0; i < batches; ++i) {
    const auto b = sample_lm_batch(stream, batch_size, params.config().max_context, rng);
    total += cross_entropy(forward(params, b.inputs, Mode::eval, nullptr), b.targets).item();
  }
  return total / batches;
}

PretrainResult pretrain(ParamStore<float> params, const PretrainData& data, const TrainRunConfig& run,
                        const std::optional<std::filesystem::path>& checkpoint_dir, const Progress& progress) {
  run.validate();
  if (params.head() != HeadKind::lm) throw ContractError("pre-training needs the language-model head");
  const int n = params.config().max_context;
  if (data.train.size() < static_cast<std::size_t>(n) + 1 || data.val.size() < static_cast<std::size_t>(n) + 1) {
    throw DataError("token streams shorter than context + 1");
  }
  PretrainResult result;
  result.best_val = std::numeric_limits<double>::infinity();
  Rng rng(run.seed);
  AdamW<float> opt(run.adamw);
  const auto points = eval_points(run.max_iters, run.eval_interval);
  auto next_eval = points.begin();
  for (std::int64_t it = 1; it <= run.max_iters; ++it) {
    const auto batch = sample_lm_batch(data.train, run.batch_size, n, rng);
    const auto loss = cross_entropy(forward(params, batch.inputs, Mode::train, &rng), batch.targets);
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericError("non-finite training loss at iteration " + std::to_string(it));
    params.zero_grad();
    backward(loss);
    opt.step(params, run.learning_rate);
    result.iter_loss.push_back(value);

    if (next_eval != points.end() && it == *next_eval) {
      ++next_eval;
      // Evaluation draws from its own stream so cadence never perturbs training.
      Rng eval_rng(run.seed ^ (0x632be59bd9b4e019ULL * static_cast<std::uint64_t>(it)));
      const double tr = estimate_loss(params, data.train, run.eval_iters, run.batch_size, eval_rng);
      const double va = estimate_loss(params, data.val, run.eval_iters, run.batch_size, eval_rng);
      result.evals.push_back({it, tr, va});
      say(progress, "iter " + std::to_string(it) + "  train " + num(tr) + "  val " + num(va));
      const bool improved = va < result.best_val;
      if (improved) {
        result.best_val = va;
        result.best_iter = it;
        result.best = params.clone();
      }
      if (checkpoint_dir) {
        CheckpointMeta meta{run.seed, it, {{"train_loss", tr}, {"val_loss", va}}};
        save_checkpoint(params, *checkpoint_dir / ("iter_" + std::to_string(it)), meta);
        if (improved) save_checkpoint(params, *checkpoint_dir / "best", meta);
      }
    }
  }
  result.params = std::move(params);
  return result;
}

TrunkCache compute_trunk_cache(const ParamStore<float>& params, const FinetuneDataset& data,
                               const Progress& progress) {
  NoGradGuard no_grad;
  TrunkCache cache;
  cache.features.reserve(data.size());
  constexpr std::size_t kChunk = 16;
  for (std::size_t s = 0; s < data.size(); s += kChunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(data.size(), s + kChunk); ++i) idx.push_back(i);
    const auto out = trunk(params, gather_windows(data, idx), Mode::eval, nullptr);
    for (std::size_t b = 0; b < idx.size(); ++b) cache.features.emplace_back(out.value().item(static_cast<Index>(b)));
    if ((s / kChunk) % 32 == 31) say(progress, "trunk " + std::to_string(s + idx.size()) + "/" + std::to_string(data.size()));
  }
  return cache;
}

namespace {

Node<float> trunk_batch(const ParamStore<float>& params, const FinetuneDataset& data,
                        const std::vector<std::size_t>& idx, const TrunkCache* cache) {
  if (cache == nullptr) {
    NoGradGuard no_grad;
    return trunk(params, gather_windows(data, idx), Mode::eval, nullptr);
  }
  const auto& first = cache->features.at(idx.front());
  Array<float> a(Shape{static_cast<Index>(idx.size()), first.rows(), first.cols()});
  for (std::size_t b = 0; b < idx.size(); ++b) a.item(static_cast<Index>(b)) = cache->features.at(idx[b]);
  return Node<float>::constant(std::move(a));
}

}  // namespace

FinetuneResult finetune_af(const ParamStore<float>& base_lm, const FinetuneDataset& data,
                           const std::vector<std::size_t>& train, const TrainRunConfig& run,
                           const TrunkCache* cache, const Progress& progress) {
  run.validate();
  if (train.empty()) throw DataError("fine-tuning fold has no training windows");
  std::set<int> classes;
  for (auto i : train) classes.insert(data.labels.at(i));
  if (classes.size() < 2) throw DataError("fine-tuning fold contains a single class; aborting");

  Rng rng(run.seed);
  FinetuneResult result{swap_head(base_lm, rng, run.train_final_norm), {}};
  auto& params = result.params;
  const std::string last_block = block_prefix(params.config().n_blocks - 1);
  for (const auto& name : params.trainable()) {
    if (name.rfind(last_block, 0) != 0 && name.rfind("cls_head.", 0) != 0 && name.rfind("final_ln.", 0) != 0) {
      throw ContractError("trunk tensor '" + name + "' is trainable; its frozen output is assumed");
    }
  }
  AdamW<float> opt(run.adamw);
  std::vector<std::size_t> idx(static_cast<std::size_t>(run.batch_size));
  std::vector<float> labels(idx.size());
  for (int it = 1; it <= run.max_iters; ++it) {
    for (std::size_t b = 0; b < idx.size(); ++b) {
      idx[b] = train[rng.uniform_int(train.size())];
      labels[b] = static_cast<float>(data.labels[idx[b]]);
    }
    const auto x = trunk_batch(params, data, idx, cache);
    const auto loss = bce_with_logits(classify_from_trunk(params, x, Mode::train, &rng),
                                      std::span<const float>(labels));
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericError("non-finite fine-tuning loss at iteration " + std::to_string(it));
    params.zero_grad();
    backward(loss);
    opt.step(params, run.learning_rate);
    result.loss.push_back(value);
    if (it % run.eval_interval == 0 || it == run.max_iters) {
      say(progress, "finetune iter " + std::to_string(it) + "  bce " + num(value));
    }
  }
  return result;
}

std::vector<double> score_windows(const ParamStore<float>& cls, const FinetuneDataset& data,
                                  const std::vector<std::size_t>& windows, const TrunkCache* cache) {
  NoGradGuard no_grad;
  std::vector<double> out;
  constexpr std::size_t kChunk = 32;
  for (std::size_t s = 0; s < windows.size(); s += kChunk) {
    const std::vector<std::size_t> idx(windows.begin() + static_cast<long>(s),
                                       windows.begin() + static_cast<long>(std::min(windows.size(), s + kChunk)));
    const auto logits = classify_from_trunk(cls, trunk_batch(cls, data, idx, cache), Mode::eval, nullptr);
    const auto probs = sigmoid(logits);
    for (Index i = 0; i < probs.value().size(); ++i) out.push_back(static_cast<double>(probs.value()[i]));
  }
  return out;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        rank_sum += mid;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::numeric_limits<double>::quiet_NaN();
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

AucReport loso_evaluate(const ParamStore<float>& base_lm, const FinetuneDataset& data, const TrainRunConfig& run,
                        const Progress& progress,
                        const std::function<void(const Fold&, const FinetuneResult&)>& on_fold) {
  const auto folds = loso_folds(data);
  if (folds.size() < 2) throw DataError("LOSO needs at least two subjects");
  if (std::set<int>(data.labels.begin(), data.labels.end()).size() < 2) {
    throw DataError("LOSO needs both classes in the dataset");
  }
  say(progress, "caching frozen trunk output for " + std::to_string(data.size()) + " windows");
  Rng probe(run.seed);
  const auto cache = compute_trunk_cache(swap_head(base_lm, probe), data, progress);

  AucReport report;
  for (const auto& fold : folds) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto tuned = finetune_af(base_lm, data, fold.train, run, &cache);
    const auto scores = score_windows(tuned.params, data, fold.test, &cache);
    FoldResult fr;
    fr.held_out = fold.held_out;
    fr.n_train = fold.train.size();
    fr.n_test = fold.test.size();
    std::vector<int> labels;
    for (auto i : fold.test) labels.push_back(data.labels[i]);
    const bool single = std::all_of(labels.begin(), labels.end(), [&](int l) { return l == labels.front(); });
    fr.label = single ? labels.front() : -1;
    fr.mean_score = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
    fr.auc = auc(scores, labels);
    fr.initial_loss = tuned.loss.front();
    fr.final_loss = tuned.loss.back();
    fr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (std::size_t k = 0; k < fold.test.size(); ++k) {
      report.windows.push_back(fold.test[k]);
      report.scores.push_back(scores[k]);
      report.labels.push_back(labels[k]);
      report.subjects.push_back(fold.held_out);
    }
    say(progress, "fold " + fold.held_out + "  mean score " + num(fr.mean_score) + "  label " +
                      std::to_string(fr.label) + "  " + num(fr.seconds) + " s");
    report.folds.push_back(fr);
    if (on_fold) on_fold(fold, tuned);
  }
  report.pooled_auc = auc(report.scores, report.labels);
  std::vector<double> subject_scores;
  std::vector<int> subject_labels;
  for (const auto& f : report.folds) {
    if (f.label < 0) continue;
    subject_scores.push_back(f.mean_score);
    subject_labels.push_back(f.label);
  }
  report.subject_auc = auc(subject_scores, subject_labels);
  return report;
}

void write_loss_csv(const std::filesystem::path& file, const std::vector<double>& loss) {
  auto out = open_csv(file);
  out << "iter,loss\n";
  for (std::size_t i = 0; i < loss.size(); ++i) out << i + 1 << ',' << num(loss[i]) << '\n';
}

void write_eval_csv(const std::filesystem::path& file, const std::vector<EvalRow>& rows) {
  auto out = open_csv(file);
  out << "iter,train_loss,val_loss\n";
  for (const auto& r : rows) out << r.iter << ',' << num(r.train_loss) << ',' << num(r.val_loss) << '\n';
}

void write_folds_csv(const std::filesystem::path& file, const AucReport& report) {
  auto out = open_csv(file);
  out << "fold,held_out,label,n_train,n_test,mean_score,auc,initial_bce,final_bce\n";
  for (std::size_t i = 0; i < report.folds.size(); ++i) {
    const auto& f = report.folds[i];
    out << i + 1 << ',' << f.held_out << ',' << f.label << ',' << f.n_train << ',' << f.n_test << ','
        << num(f.mean_score) << ',' << num(f.auc) << ',' << num(f.initial_loss) << ',' << num(f.final_loss) << '\n';
  }
}

void write_auc_summary_csv(const std::filesystem::path& file, const AucReport& report) {
  auto out = open_csv(file);
  out << "metric,n,value\n";
  out << "pooled_window_auc," << report.scores.size() << ',' << num(report.pooled_auc) << '\n';
  out << "subject_mean_score_auc," << report.folds.size() << ',' << num(report.subject_auc) << '\n';
}

void write_scores_csv(const std::filesystem::path& file, const AucReport& report) {
  auto out = open_csv(file);
  out << "window,subject,label,score\n";
  for (std::size_t i = 0; i < report.scores.size(); ++i) {
    out << report.windows[i] << ',' << report.subjects[i] << ',' << report.labels[i] << ',' << num(report.scores[i])
        << '\n';
  }
}

}  // namespace pulseformer
