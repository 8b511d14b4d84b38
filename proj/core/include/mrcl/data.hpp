#pragma once

// Dataset ingestion and the stochastic two-view augmentation that precedes masking.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mrcl/random.hpp"
#include "mrcl/tensor.hpp"

namespace mrcl::data {

inline constexpr int kUnlabeled = -1;

struct LabeledImage {
  Image pixels;
  int label = kUnlabeled;
};

enum class DatasetName { kCifar10, kStl10Unlabeled, kStl10Labeled, kImageFolder };
enum class Split { kTrain, kTest };

DatasetName parse_dataset_name(std::string_view name);
std::string to_string(DatasetName name);
Split parse_split(std::string_view split);
std::string to_string(Split split);

/// In-memory dataset. Pixels are held as bytes and decoded to [0,1] floats on access.
class Dataset {
 public:
  Dataset() = default;

  void add(int height, int width, int channels, std::vector<std::uint8_t> bytes, int label);
  /// Quantizes a float image to bytes; used for synthetic datasets.
  void add(const LabeledImage& image);

  [[nodiscard]] std::size_t size() const { return labels_.size(); }
  [[nodiscard]] bool empty() const { return labels_.empty(); }
  [[nodiscard]] LabeledImage at(std::size_t i) const;
  [[nodiscard]] int label(std::size_t i) const { return labels_.at(i); }
  [[nodiscard]] const std::vector<int>& labels() const { return labels_; }
  [[nodiscard]] bool labeled() const;
  /// max label + 1, or 0 when unlabeled.
  [[nodiscard]] int num_classes() const;

  std::vector<std::string> class_names;

  /// First `n` items in order; n == 0 or n >= size() keeps everything.
  [[nodiscard]] Dataset head(std::size_t n) const;

 private:
  struct Shape {
    int height, width, channels;
  };
  std::vector<Shape> shapes_;
  std::vector<std::size_t> offsets_;
  std::vector<std::uint8_t> bytes_;
  std::vector<int> labels_;
};

/// Loads one split. Layouts:
///  - cifar10: data_batch_{1..5}.bin / test_batch.bin, in `root` or `root/cifar-10-batches-bin`.
///  - stl10_*: {train,test}_{X,y}.bin and unlabeled_X.bin, in `root` or `root/stl10_binary`.
///  - image_folder: `root/<split>/<class>/*.png|jpg` if `root/<split>` exists, else `root/<class>/...`.
/// Ordering is deterministic (file order, then sorted paths). Unlabeled items carry kUnlabeled.
Dataset load_dataset(const std::filesystem::path& root, Split split, DatasetName name);

/// 8-bit image file decoded to RGB in [0,1].
Image read_image(const std::filesystem::path& path);
/// Quantizes to 8 bits; the format follows the extension.
void write_image(const Image& img, const std::filesystem::path& path);

enum class SeedPolicy { kPerSample, kFixedPerSample };

/// SimCLR-style augmentation family: random resized crop, horizontal flip,
/// color jitter, grayscale.
struct AugConfig {
  std::array<double, 2> crop_scale_range{0.2, 1.0};
  std::array<double, 2> crop_ratio_range{3.0 / 4.0, 4.0 / 3.0};
  std::array<int, 2> output_size{32, 32};  // (H, W)
  double hflip_prob = 0.5;
  double color_jitter_strength = 0.5;
  double color_jitter_prob = 0.8;
  double grayscale_prob = 0.2;
  /// kPerSample keys each draw by (seed, epoch, index, view); kFixedPerSample drops the epoch.
  SeedPolicy seed_policy = SeedPolicy::kPerSample;

  /// Throws ConfigError. `patch_size` <= 0 skips the divisibility check.
  void validate(int patch_size = 0) const;
  bool operator==(const AugConfig&) const = default;
};

/// Identifies the random stream of one sample.
struct SampleKey {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t index = 0;
};

struct ViewPair {
  Image view1;
  Image view2;
  std::size_t source_index = 0;
};

/// Two views drawn with disjoint sub-streams of `key`.
ViewPair augment_pair(const LabeledImage& img, const AugConfig& cfg, const SampleKey& key);

/// One view with crop and flip only; jitter and grayscale are stripped.
LabeledImage probe_augment(const LabeledImage& img, const AugConfig& cfg, const SampleKey& key);

/// Full-image bilinear resize to cfg.output_size. The evaluation view.
LabeledImage eval_view(const LabeledImage& img, const AugConfig& cfg);

/// Crop window in source pixel coordinates.
struct CropBox {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
};

/// Random resized crop box; falls back to the full image when no valid window is drawn.
CropBox sample_crop(int height, int width, const AugConfig& cfg, Rng& rng);

/// Bilinear resample of `box` (half-pixel centers) to out_h x out_w.
Image resized_crop(const Image& src, const CropBox& box, int out_h, int out_w);

Image hflip(const Image& src);

}  // namespace mrcl::data
