#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pulseformer/array.hpp"
#include "pulseformer/rng.hpp"
#include "pulseformer/signal.hpp"

namespace pulseformer {

struct DatasetSpec {
  std::vector<SignalRecord> records;
  int window_len = 500;
  int window_shift = 50;
  double target_fs = 50.0;
  /// Pass band in Hz, applied before resampling when set.
  std::optional<std::pair<double, double>> bandpass;
  /// Share of records (in order) used for training.
  double split_fraction = 0.9;

  void validate() const;
};

/// Band-pass (if configured) then resample, in that order.
SignalRecord preprocess(const SignalRecord& record, const DatasetSpec& spec);

struct PretrainData {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<std::string> train_subjects;
  std::vector<std::string> val_subjects;
};

/// Each record is cut into consecutive, non-overlapping windows of
/// window_len samples (trailing remainder dropped), each tokenized on its
/// own scale and appended to its stream. Records are split in order at a
/// record boundary, so no record contributes to both streams. Needs at least
/// two records and streams of at least window_len + 1 tokens.
PretrainData build_pretrain_dataset(const DatasetSpec& spec);

/// Random (context, next-token target) pairs drawn from a token stream.
struct LmBatch {
  TokenMatrix inputs;        // [B x N]
  std::vector<int> targets;  // B * N, row-major
};

LmBatch sample_lm_batch(const std::vector<int>& stream, int batch, int context, Rng& rng);

struct FinetuneDataset {
  std::vector<std::vector<int>> windows;
  std::vector<int> labels;
  std::vector<std::string> subject_ids;
  std::vector<std::size_t> record_index;
  std::vector<long> start;  // first sample of the window in the preprocessed record
  std::vector<std::pair<double, double>> scales;
  double fs = 0.0;

  std::size_t size() const { return windows.size(); }
  /// Subject ids in first-appearance order.
  std::vector<std::string> subjects() const;
};

/// Sliding windows (window_len, window_shift) over every preprocessed,
/// labeled record, each tokenized independently.
FinetuneDataset build_finetune_dataset(const DatasetSpec& spec);

struct Fold {
  std::string held_out;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// One fold per subject, holding out all of that subject's windows.
std::vector<Fold> loso_folds(const FinetuneDataset& data);

/// Rows `indices` of the window table as a token matrix.
TokenMatrix gather_windows(const FinetuneDataset& data, const std::vector<std::size_t>& indices);

// ---- files ------------------------------------------------------------------

enum class SampleFormat { csv, f32 };

/// Reads `<file>` (.csv: one sample per line; .f32: raw little-endian
/// float32) and its JSON sidecar `<file stem>.json`.
SignalRecord read_signal(const std::filesystem::path& file);

/// Writes samples and sidecar; returns the sample file path.
std::filesystem::path write_signal(const SignalRecord& record, const std::filesystem::path& dir,
                                   const std::string& stem, SampleFormat format = SampleFormat::csv);

/// dataset.json: {"records": [{"file", "subject_id", "label"}...]}.
void write_dataset_manifest(const std::filesystem::path& dir, const std::vector<std::string>& files,
                            const std::vector<SignalRecord>& records);

/// Accepts a dataset.json path, a directory holding one, or a single
/// signal file. Manifest labels override sidecar labels.
std::vector<SignalRecord> read_dataset(const std::filesystem::path& path);

}  // namespace pulseformer
