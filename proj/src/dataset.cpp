#include "pulseformer/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace pulseformer {

void DatasetSpec::validate() const {
  if (window_len < 1 || window_len > 500) throw ConfigError("window length must lie in [1, 500]");
  if (window_shift < 1) throw ConfigError("window shift must be >= 1");
  if (!(target_fs > 0.0)) throw ConfigError("target sample rate must be positive");
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
  if (records.empty()) throw DataError("dataset has no records");
}

SignalRecord preprocess(const SignalRecord& record, const DatasetSpec& spec) {
  record.validate();
  SignalRecord r = record;
  if (spec.bandpass) r = bandpass(r, spec.bandpass->first, spec.bandpass->second);
  return resample(r, spec.target_fs);
}

PretrainData build_pretrain_dataset(const DatasetSpec& spec) {
  spec.validate();
  const std::size_t m = spec.records.size();
  if (m < 2) throw DataError("pre-training split needs at least 2 records");
  const auto n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(spec.split_fraction * static_cast<double>(m))), 1, m - 1);
  PretrainData out;
  const auto w = static_cast<std::size_t>(spec.window_len);
  for (std::size_t r = 0; r < m; ++r) {
    const auto rec = preprocess(spec.records[r], spec);
    auto& stream = r < n_train ? out.train : out.val;
    (r < n_train ? out.train_subjects : out.val_subjects).push_back(rec.subject_id);
    for (std::size_t s = 0; s + w <= rec.samples.size(); s += w) {
      const auto win = tokenize_window(std::span<const double>(rec.samples).subspan(s, w), rec.fs, rec.modality);
      stream.insert(stream.end(), win.tokens.begin(), win.tokens.end());
    }
  }
  const std::size_t need = w + 1;
  if (out.train.size() < need || out.val.size() < need) {
    throw DataError("token streams too short: train " + std::to_string(out.train.size()) + ", val " +
                    std::to_string(out.val.size()) + ", need " + std::to_string(need));
  }
  return out;
}

LmBatch sample_lm_batch(const std::vector<int>& stream, int batch, int context, Rng& rng) {
  const auto n = static_cast<std::size_t>(context);
  if (stream.size() < n + 1) throw DataError("token stream shorter than context + 1");
  LmBatch b{TokenMatrix(batch, context), std::vector<int>(static_cast<std::size_t>(batch) * n)};
  for (int i = 0; i < batch; ++i) {
    const auto off = static_cast<std::size_t>(rng.uniform_int(stream.size() - n));
    for (std::size_t t = 0; t < n; ++t) {
      b.inputs(i, static_cast<Index>(t)) = stream[off + t];
      b.targets[static_cast<std::size_t>(i) * n + t] = stream[off + t + 1];
    }
  }
  return b;
}

std::vector<std::string> FinetuneDataset::subjects() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& s : subject_ids) {
    if (seen.insert(s).second) out.push_back(s);
  }
  return out;
}

FinetuneDataset build_finetune_dataset(const DatasetSpec& spec) {
  spec.validate();
  FinetuneDataset out;
  out.fs = spec.target_fs;
  for (std::size_t r = 0; r < spec.records.size(); ++r) {
    const auto& src = spec.records[r];
    if (!src.label) throw DataError("fine-tuning record '" + src.subject_id + "' has no label");
    const auto rec = preprocess(src, spec);
    const long count = window_count(static_cast<long>(rec.samples.size()), spec.window_len, spec.window_shift);
    for (long k = 0; k < count; ++k) {
      const long s = k * spec.window_shift;
      const auto win = tokenize_window(
          std::span<const double>(rec.samples).subspan(static_cast<std::size_t>(s),
                                                       static_cast<std::size_t>(spec.window_len)),
          rec.fs, rec.modality);
      out.windows.push_back(win.tokens);
      out.labels.push_back(*src.label);
      out.subject_ids.push_back(src.subject_id);
      out.record_index.push_back(r);
      out.start.push_back(s);
      out.scales.emplace_back(win.scale_min, win.scale_max);
    }
  }
  if (out.windows.empty()) throw DataError("no record is long enough for one window");
  return out;
}

std::vector<Fold> loso_folds(const FinetuneDataset& data) {
  std::vector<Fold> folds;
  for (const auto& subject : data.subjects()) {
    Fold f;
    f.held_out = subject;
    for (std::size_t i = 0; i < data.size(); ++i) {
      (data.subject_ids[i] == subject ? f.test : f.train).push_back(i);
    }
    folds.push_back(std::move(f));
  }
  return folds;
}

TokenMatrix gather_windows(const FinetuneDataset& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("no windows selected");
  const auto len = static_cast<Index>(data.windows[indices.front()].size());
  TokenMatrix m(static_cast<Index>(indices.size()), len);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& w = data.windows.at(indices[i]);
    for (Index t = 0; t < len; ++t) m(static_cast<Index>(i), t) = w[static_cast<std::size_t>(t)];
  }
  return m;
}

}  // namespace pulseformer
