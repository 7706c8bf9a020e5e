#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pulseformer/dataset.hpp"
#include "pulseformer/model.hpp"

namespace pulseformer {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  /// Global gradient-norm clip; off when unset.
  std::optional<double> clip_norm;
};

struct TrainRunConfig {
  double learning_rate = 3e-4;
  int batch_size = 64;
  int max_iters = 500000;
  int eval_interval = 2000;
  int eval_iters = 200;
  std::uint64_t seed = 1;
  AdamWConfig adamw;
  /// Fine-tuning only: also train the final layer norm.
  bool train_final_norm = false;

  /// Throws ConfigError on non-positive sizes or eval_interval > max_iters.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainRunConfig& c);
void from_json(const nlohmann::json& j, TrainRunConfig& c);

/// Decoupled weight decay applies to every tensor except layer-norm gains
/// and biases and the two embedding tables.
bool decays(const std::string& tensor_name);

/// AdamW over the trainable tensors of a ParamStore. Per step, for each
/// trainable tensor: p -= lr*wd*p (when it decays), then the bias-corrected
/// Adam update. Frozen tensors are never written.
template <typename Scalar>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  /// Throws NumericError naming the first tensor with a non-finite gradient,
  /// before anything is modified.
  void step(ParamStore<Scalar>& params, double lr);

  std::int64_t steps() const { return steps_; }
  const Array<Scalar>& first_moment(const std::string& name) const { return moments_.at(name).first; }
  const Array<Scalar>& second_moment(const std::string& name) const { return moments_.at(name).second; }

 private:
  AdamWConfig config_;
  std::int64_t steps_ = 0;
  std::map<std::string, std::pair<Array<Scalar>, Array<Scalar>>> moments_;
};

using Progress = std::function<void(const std::string&)>;

struct EvalRow {
  std::int64_t iter;  // completed iterations
  double train_loss;
  double val_loss;
};

struct PretrainResult {
  ParamStore<float> params;
  ParamStore<float> best;
  std::int64_t best_iter = 0;
  double best_val = 0.0;
  std::vector<double> iter_loss;
  std::vector<EvalRow> evals;
};

/// Iterations at which pre-training evaluates: every eval_interval, plus
/// the final iteration.
std::vector<std::int64_t> eval_points(int max_iters, int eval_interval);

/// Mean next-token cross-entropy over `batches` random batches, eval mode.
double estimate_loss(const ParamStore<float>& params, const std::vector<int>& stream, int batches,
                     int batch_size, Rng& rng);

/// Next-token pre-training. Each iteration draws batch_size random contexts
/// of max_context tokens and steps AdamW on the mean cross-entropy over all
/// positions. At each eval point the mean train/val loss over eval_iters
/// batches is recorded and, when `checkpoint_dir` is set, `iter_<n>` and the
/// best-validation `best` checkpoints are written there.
PretrainResult pretrain(ParamStore<float> params, const PretrainData& data, const TrainRunConfig& run,
                        const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt,
                        const Progress& progress = {});

/// Output of the frozen part of the classifier for every window, computed
/// once in eval mode. Valid for any model sharing the frozen tensors.
struct TrunkCache {
  std::vector<RowMatrix<float>> features;  // per window, [T x d_model]
};

TrunkCache compute_trunk_cache(const ParamStore<float>& params, const FinetuneDataset& data,
                               const Progress& progress = {});

struct FinetuneResult {
  ParamStore<float> params;
  std::vector<double> loss;  // per iteration BCE
};

/// Head swap plus training of the final block and classification head on
/// `train` windows with BCE at the final position. The frozen trunk runs in
/// eval mode; `cache`, when given, supplies its output. Throws DataError when
/// the training windows hold a single class.
FinetuneResult finetune_af(const ParamStore<float>& base_lm, const FinetuneDataset& data,
                           const std::vector<std::size_t>& train, const TrainRunConfig& run,
                           const TrunkCache* cache = nullptr, const Progress& progress = {});

/// Eval-mode probabilities for the listed windows.
std::vector<double> score_windows(const ParamStore<float>& cls, const FinetuneDataset& data,
                                  const std::vector<std::size_t>& windows, const TrunkCache* cache = nullptr);

/// Mann-Whitney AUC with ties counted half; NaN when only one class is present.
double auc(std::span<const double> scores, std::span<const int> labels);

struct FoldResult {
  std::string held_out;
  int label = -1;  // held-out subject's label, -1 if mixed
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  double mean_score = 0.0;
  double auc = 0.0;  // NaN when the held-out subject has one class
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double seconds = 0.0;
};

struct AucReport {
  std::vector<FoldResult> folds;
  std::vector<std::size_t> windows;
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::string> subjects;
  double pooled_auc = 0.0;   // over all held-out windows
  double subject_auc = 0.0;  // over per-subject mean scores
};

/// One fine-tune per subject; held-out windows scored and pooled. Needs at
/// least two subjects and both classes. `on_fold` sees each trained fold.
AucReport loso_evaluate(const ParamStore<float>& base_lm, const FinetuneDataset& data, const TrainRunConfig& run,
                        const Progress& progress = {},
                        const std::function<void(const Fold&, const FinetuneResult&)>& on_fold = {});

void write_loss_csv(const std::filesystem::path& file, const std::vector<double>& loss);
void write_eval_csv(const std::filesystem::path& file, const std::vector<EvalRow>& rows);
/// One row per fold; wall-clock timings are left out so reruns are byte-identical.
void write_folds_csv(const std::filesystem::path& file, const AucReport& report);
/// Pooled window-level and per-subject AUC.
void write_auc_summary_csv(const std::filesystem::path& file, const AucReport& report);
void write_scores_csv(const std::filesystem::path& file, const AucReport& report);

}  // namespace pulseformer
