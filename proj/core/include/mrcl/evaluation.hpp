#pragma once

// Linear probing of frozen encoder features and the ablation sweep harness.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mrcl/data.hpp"
#include "mrcl/trainer.hpp"
#include "mrcl/vit.hpp"

namespace mrcl::eval {

enum class ProbeOptimizer { kSgd };

ProbeOptimizer parse_probe_optimizer(std::string_view name);
std::string to_string(ProbeOptimizer opt);

struct ProbeConfig {
  double lr = 0.2;
  std::int64_t batch_size = 1024;
  std::int64_t epochs = 100;
  ProbeOptimizer optimizer = ProbeOptimizer::kSgd;
  double momentum = 0.9;
  double weight_decay = 0.0;
  /// Number of crop+flip feature copies cycled through the epochs (0 = clean train features only).
  int augment_views = 2;
  std::uint64_t seed = 0;

  /// Batch clamped to the train-set size.
  [[nodiscard]] std::int64_t effective_batch(std::size_t train_size) const;
  /// lr scaled by effective_batch / 1024.
  [[nodiscard]] double effective_lr(std::size_t train_size) const;
  void validate() const;
  bool operator==(const ProbeConfig&) const = default;
};

struct Features {
  Mat<double> x;  // n x D
  std::vector<int> labels;
  [[nodiscard]] std::size_t size() const { return labels.size(); }
};

struct FeatureOptions {
  /// Must stay 0: evaluation never masks.
  double mask_ratio = 0.0;
  /// When set, each image gets the crop+flip probe view for this key's (seed, epoch) instead of the
  /// centered full-image view.
  std::optional<data::SampleKey> augment;
};

/// Pooled class-token features of every image, unmasked, in dataset order.
Features extract_features(const vit::VisionTransformer<float>& model, const data::Dataset& dataset,
                          const FeatureOptions& opts = {});
Features extract_features(const std::filesystem::path& checkpoint, const data::Dataset& dataset,
                          const FeatureOptions& opts = {});

/// Softmax regression on fixed features.
struct LinearClassifier {
  Mat<double> weight;  // D x K
  RowVec<double> bias;
  RowVec<double> mean;  // standardizer fitted on the clean train features
  RowVec<double> inv_std;

  [[nodiscard]] std::vector<int> predict(const Mat<double>& x) const;
  [[nodiscard]] double accuracy(const Features& f) const;
};

/// SGD with momentum and a cosine schedule on softmax cross-entropy. `extra_views` are additional
/// augmented copies of the train features (same row order) cycled per epoch.
LinearClassifier train_linear(const Features& train, const ProbeConfig& cfg, int num_classes,
                              const std::vector<Features>& extra_views = {});

struct ProbeResult {
  double top1 = 0.0;
  double train_top1 = 0.0;
  std::uint64_t params_hash_before = 0;
  std::uint64_t params_hash_after = 0;
};

/// Test top-1 of a linear classifier trained on frozen features of `checkpoint`.
ProbeResult linear_probe(const vit::VisionTransformer<float>& model, const data::Dataset& train_set,
                         const data::Dataset& test_set, const ProbeConfig& cfg);
ProbeResult linear_probe(const std::filesystem::path& checkpoint, const data::Dataset& train_set,
                         const data::Dataset& test_set, const ProbeConfig& cfg);

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { kMaskRatio, kRecWeight, kMaskUnmaskRatio };

SweepAxis parse_sweep_axis(std::string_view name);
std::string to_string(SweepAxis axis);

/// acc(better) > acc(worse), or >= when !strict, counted per seed.
struct Comparison {
  double better = 0.0;
  double worse = 0.0;
  bool strict = true;
  bool operator==(const Comparison&) const = default;
};

struct SweepSpec {
  SweepAxis axis = SweepAxis::kMaskRatio;
  std::vector<double> values;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  /// Template for every cell; the axis value and seed are substituted in.
  train::PretrainConfig base;
  train::DatasetSpec probe_train;
  train::DatasetSpec probe_test;
  ProbeConfig probe;
  /// Empty: compare the best interior value against both extremes.
  std::vector<Comparison> comparisons;
  std::filesystem::path out_dir;

  void validate() const;
};

/// mask_ratio sets r; rec_weight sets alpha = lam = v; mask_unmask_ratio sets lam = alpha / v.
train::PretrainConfig cell_config(const SweepSpec& spec, double value, std::uint64_t seed);
std::string cell_name(const SweepSpec& spec, double value, std::uint64_t seed);

struct SweepCell {
  double value = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double top1 = 0.0;
  double train_top1 = 0.0;
  double final_loss = 0.0;
  std::string run_dir;

  [[nodiscard]] std::string to_json() const;
  static SweepCell from_json(const std::string& line);
};

struct Verdict {
  Comparison comparison;
  int wins = 0;
  int seeds = 0;
  /// Strict majority of the requested seeds.
  bool holds = false;
  [[nodiscard]] std::string describe() const;
};

struct SweepReport {
  SweepAxis axis = SweepAxis::kMaskRatio;
  std::vector<double> values;
  std::vector<std::uint64_t> seeds;
  std::vector<SweepCell> cells;
  std::vector<Verdict> verdicts;

  [[nodiscard]] const SweepCell* find(double value, std::uint64_t seed) const;
  /// Mean top-1 over successful cells of `value` (NaN when none).
  [[nodiscard]] double mean(double value) const;
  [[nodiscard]] std::string summary() const;
  /// Tab-separated: value, mean, then one column per seed.
  [[nodiscard]] std::string plot_table() const;
  void write(const std::filesystem::path& dir) const;
};

std::vector<Verdict> compute_verdicts(const SweepReport& report, const std::vector<Comparison>& comparisons);

/// Pretrains and probes every (value, seed) cell under spec.out_dir/cells/, skipping cells whose
/// cell.json records success. Failed cells are recorded and the sweep moves on. Writes
/// report.jsonl, summary.txt and plot.tsv into spec.out_dir.
SweepReport run_sweep(const SweepSpec& spec, std::ostream* log = nullptr);
SweepReport run_sweep(const SweepSpec& spec, const data::Dataset& pretrain_set, const data::Dataset& probe_train,
                      const data::Dataset& probe_test, std::ostream* log = nullptr);

}  // namespace mrcl::eval
