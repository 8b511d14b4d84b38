#pragma once

// Pretraining loop: two masked views per image, joint contrastive + reconstruction
// objective, AdamW with linear scaling and warmup-cosine schedule, checkpoints, metrics.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mrcl/data.hpp"
#include "mrcl/losses.hpp"
#include "mrcl/masking.hpp"
#include "mrcl/optim.hpp"
#include "mrcl/vit.hpp"

namespace mrcl::train {

struct DatasetSpec {
  data::DatasetName name = data::DatasetName::kCifar10;
  std::filesystem::path root;
  data::Split split = data::Split::kTrain;
  /// Keep only the first `limit` items (0 = all).
  std::size_t limit = 0;

  [[nodiscard]] data::Dataset load() const;
  bool operator==(const DatasetSpec&) const = default;
};

struct TrainConfig {
  double base_lr = 1.5e-4;
  std::int64_t batch_size = 512;
  double weight_decay = 1e-6;
  std::array<double, 2> adam_betas{0.9, 0.95};
  double adam_eps = 1e-8;
  std::int64_t epochs = 100;
  std::int64_t warmup_epochs = 10;
  double mask_ratio = 0.2;
  masking::MaskStrategy mask_strategy = masking::MaskStrategy::kRandom;
  loss::LossWeights loss;
  loss::ContrastiveHead head = loss::ContrastiveHead::kInfoNce;
  std::uint64_t seed = 0;
  /// Periodic checkpoint interval in steps (0 = final checkpoint only).
  std::int64_t checkpoint_every = 0;
  /// Global gradient-norm clip (0 = off).
  double grad_clip = 0.0;

  /// base_lr * batch_size / 256.
  [[nodiscard]] double peak_lr() const { return optim::scaled_lr(base_lr, batch_size); }
  [[nodiscard]] optim::AdamWConfig adamw() const;
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct PretrainConfig {
  DatasetSpec dataset;
  data::AugConfig aug;
  vit::ViTConfig model;
  TrainConfig train;
  std::filesystem::path run_dir;

  void validate() const;
  bool operator==(const PretrainConfig&) const = default;
};

std::int64_t steps_per_epoch(std::size_t dataset_size, std::int64_t batch_size);
optim::LrSchedule make_schedule(const TrainConfig& cfg, std::int64_t steps_per_epoch);

/// Everything needed to continue training bit-identically. All randomness is keyed
/// by (seed, epoch, sample index, view, stream), so `seed` plus the counters is the RNG state.
template <typename T>
struct TrainState {
  TrainState(vit::ViTConfig model_config, optim::AdamWConfig adam);

  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::uint64_t seed = 0;
  vit::VisionTransformer<T> model;
  optim::AdamW<T> optimizer;
};

/// Fresh model initialized from cfg.train.seed.
template <typename T>
TrainState<T> initial_state(const vit::ViTConfig& model, const TrainConfig& train);

/// Patchified, standardized views and their mask plans.
template <typename T>
struct ViewBatch {
  std::vector<masking::PatchSequence<T>> patches1, patches2;
  std::vector<masking::MaskPlan> plan1, plan2;
  [[nodiscard]] std::size_t size() const { return patches1.size(); }
};

/// Each view of each pair gets its own plan drawn from the (seed, epoch, index, view) mask stream.
template <typename T>
ViewBatch<T> prepare_batch(const vit::VisionTransformer<T>& model, std::span<const data::ViewPair> pairs,
                           double mask_ratio, masking::MaskStrategy strategy, std::uint64_t seed,
                           std::uint64_t epoch);

inline constexpr double kActivationBudgetBytes = 768.0 * 1024 * 1024;

/// Forward pass of the joint objective. With `accumulate_grads`, zeroes the model gradients and
/// fills them with d(total)/d(params). When the per-view caches would exceed the budget, each
/// view is recomputed during the backward pass instead of being kept.
template <typename T>
loss::LossBreakdown compute_loss(vit::VisionTransformer<T>& model, const ViewBatch<T>& batch,
                                 const loss::LossWeights& weights, loss::ContrastiveHead head,
                                 bool accumulate_grads, double activation_budget_bytes = kActivationBudgetBytes);

/// Projector outputs, reconstructions, and targets of a batch, for evaluating loss::total_loss.
template <typename T>
loss::PairOutputs<T> forward_outputs(const vit::VisionTransformer<T>& model, const ViewBatch<T>& batch);

struct StepResult {
  loss::LossBreakdown loss;
  double lr = 0.0;
  double grad_norm = 0.0;
};

/// One forward/backward over both views and one AdamW update at lr = schedule(state.step).
/// Non-finite losses raise NumericError carrying the breakdown.
template <typename T>
StepResult train_step(std::span<const data::ViewPair> batch, TrainState<T>& state, const TrainConfig& cfg,
                      const optim::LrSchedule& schedule);

struct MetricRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double lr = 0.0;
  loss::LossBreakdown loss;
  double wallclock = 0.0;

  [[nodiscard]] std::string to_json() const;
  static MetricRecord from_json(const std::string& line);
};

std::vector<MetricRecord> read_metrics(const std::filesystem::path& path);

struct PretrainOptions {
  /// Continue from run_dir/checkpoints/latest.ckpt when it exists.
  bool resume = false;
  /// Stop after this many total steps (< 0 = run to completion); a checkpoint is written at the stop.
  std::int64_t stop_at_step = -1;
  std::ostream* log = nullptr;
  /// Resolved config text recorded in checkpoint metadata.
  std::string config_text;
};

/// Layout under run_dir: metrics.jsonl, checkpoints/{step_<n>,latest,final}.ckpt.
/// Returns the path of the last checkpoint written.
std::filesystem::path pretrain(const PretrainConfig& cfg, const PretrainOptions& opts = {});

/// Pretraining on an already-loaded dataset.
std::filesystem::path pretrain(const PretrainConfig& cfg, const data::Dataset& dataset,
                               const PretrainOptions& opts = {});

}  // namespace mrcl::train
