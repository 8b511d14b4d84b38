#pragma once

// Run configuration: one TOML file with [run], [dataset], [aug], [model], [train], [loss],
// [probe] and [sweep] sections, plus `section.key=value` overrides.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mrcl/evaluation.hpp"
#include "mrcl/trainer.hpp"

namespace mrcl::cli {

struct ProbeData {
  /// Empty: the pretraining dataset (stl10_unlabeled maps to stl10_labeled).
  std::string dataset;
  /// Empty: dataset.root.
  std::filesystem::path root;
  std::size_t train_limit = 0;
  std::size_t test_limit = 0;

  bool operator==(const ProbeData&) const = default;
};

struct SweepSection {
  eval::SweepAxis axis = eval::SweepAxis::kMaskRatio;
  std::vector<double> values;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<eval::Comparison> compare;

  bool operator==(const SweepSection&) const = default;
};

struct RunConfig {
  std::string run_name = "mrcl";
  /// pretrain.run_dir doubles as [run].dir; empty until resolved.
  train::PretrainConfig pretrain;
  eval::ProbeConfig probe;
  ProbeData probe_data;
  SweepSection sweep;

  [[nodiscard]] train::DatasetSpec probe_train_spec() const;
  [[nodiscard]] train::DatasetSpec probe_test_spec() const;
  [[nodiscard]] eval::SweepSpec sweep_spec() const;
  /// Field-level checks of every section; paths are not touched.
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config_file(const std::filesystem::path& path);
RunConfig parse_config_text(std::string_view text, std::string_view source = "<config>");

/// "train.mask_ratio=0.2", or a bare leaf ("mask_ratio=0.2") when it names exactly one key.
/// Values are read as TOML, falling back to a plain string.
void apply_override(RunConfig& cfg, std::string_view assignment);

/// Canonical TOML of every key; parses back to an equal RunConfig.
std::string to_toml(const RunConfig& cfg);

/// Every accepted "section.key".
std::vector<std::string> config_keys();

/// [run].dir when set, otherwise <$MRCL_RUN_ROOT or ./runs>/<run_name>-<timestamp>.
std::filesystem::path resolve_run_dir(const RunConfig& cfg);

/// ConfigError unless the dataset root names an existing path.
void require_dataset_root(const train::DatasetSpec& spec, std::string_view key);

}  // namespace mrcl::cli
