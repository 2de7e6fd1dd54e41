#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "surgline/dualenc.hpp"
#include "surgline/ingest.hpp"
#include "surgline/vocab.hpp"
#include "surgline/zeroshot.hpp"

namespace surgline {

enum class StageKind { gesture_ft, phase_ft, control_phase_only, control_phase_only_long };
enum class Balancing { upsample, downsample, none };
enum class Selection { last_epoch, best_val };

std::string to_string(StageKind kind);
std::string to_string(Balancing balancing);
std::string to_string(Selection selection);
StageKind stage_kind_from_string(std::string_view name);
Balancing balancing_from_string(std::string_view name);
Selection selection_from_string(std::string_view name);

/// Task a stage trains on: gestures for gesture_ft, phases otherwise.
Task stage_task(StageKind kind);

inline constexpr const char* kPretrainedBase = "pretrained_base";

struct StageConfig {
  StageKind stage = StageKind::gesture_ft;
  int epochs = 50;
  double learning_rate = 5e-5;
  int batch_size = 64;
  Balancing balancing = Balancing::upsample;
  FreezePolicy freeze;
  std::uint64_t seed = 0;
  std::string init_from = kPretrainedBase;
  Selection selection = Selection::last_epoch;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Missing keys keep the values already in `base`.
  static StageConfig from_json(const nlohmann::json& j, StageConfig base);
  static StageConfig from_json(const nlohmann::json& j);
};

/// Gesture fine-tuning: 50 epochs, lr 5e-5, batch 64, up-sampling, last 3 blocks.
StageConfig stage_a_config();
/// Phase fine-tuning from a gesture checkpoint: 15 epochs, batch 32, down-sampling.
StageConfig stage_b_config(const std::string& init_from);
/// Phase-only control from the base model: 15 epochs, or 65 with `long_run`.
StageConfig control_config(bool long_run);
StageConfig preset_config(StageKind kind);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_top1;
};

struct CheckpointRecord {
  std::string id;
  StageConfig config;
  std::vector<EpochRecord> history;
  int selected_epoch = 0;
};

/// CSV: epoch,train_loss,val_loss,val_top1 (empty cells when no val split).
std::string history_csv(const std::vector<EpochRecord>& history);

struct StageResult {
  CheckpointRecord record;
  DualEncoder encoder;
};

struct StageOptions {
  /// Called after every epoch.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called after every optimizer step with (epoch, batch, loss).
  std::function<void(int, int, double)> on_step;
  /// Image source; DefaultFrameDecoder when null. Each distinct image is
  /// decoded and preprocessed once per run.
  const FrameDecoder* decoder = nullptr;
};

/// Fine-tunes a copy of `enc` on `train` (balanced here per cfg.balancing,
/// once per run) with Adam on the freeze policy's trainable set. Every frame
/// in a batch is paired with one text drawn uniformly from its class's five;
/// positives are all pairs sharing a class. `val` may be empty.
StageResult run_stage(const DualEncoder& enc, const std::vector<FrameRecord>& train,
                      const std::vector<FrameRecord>& val, const ClassVocabulary& vocab, const StageConfig& cfg,
                      const StageOptions& options = {});

/// Checkpoint archive: encoder tensors plus stage metadata and a content id.
TensorArchive checkpoint_archive(const CheckpointRecord& record, const DualEncoder& enc);
/// sha256 over canonical metadata (without "id") and tensor bytes.
std::string checkpoint_id(const TensorArchive& archive);
void save_checkpoint(const std::filesystem::path& path, const CheckpointRecord& record, const DualEncoder& enc);

struct LoadedCheckpoint {
  CheckpointRecord record;
  DualEncoder encoder;
};
/// Throws ValidationError when the stored id does not match the contents.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

struct ProbeConfig {
  int epochs = 200;
  double learning_rate = 5e-4;
  std::uint64_t seed = 0;
};

struct ProbeSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct ProbeResult {
  Matrix weight;    // C x D
  RowVector bias;   // 1 x C
  std::vector<ClassId> classes;
  std::optional<double> train_accuracy;
  std::optional<double> val_accuracy;
  std::optional<double> test_accuracy;
  std::vector<std::string> warnings;

  std::vector<std::size_t> predict(const Matrix& embeddings) const;
};

/// Single linear layer (weight C x D plus bias) trained full-batch with Adam
/// on softmax cross-entropy. Split index sets must be disjoint.
ProbeResult train_linear_probe(const EmbeddingMatrix& embeddings, const std::vector<ClassId>& labels,
                               const std::vector<ClassId>& classes, const ProbeConfig& cfg, const ProbeSplit& split);

}  // namespace surgline
