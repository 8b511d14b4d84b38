#pragma once

// Patchify/unpatchify and the shuffle-and-drop mask plans applied to token sequences.

#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mrcl/random.hpp"
#include "mrcl/tensor.hpp"

namespace mrcl::masking {

/// N x (P*P*C) patches in row-major grid order. Within a patch the flattening
/// order is (row-in-patch, col-in-patch, channel).
template <typename T>
struct PatchSequence {
  Mat<T> patches;
  int rows = 0;
  int cols = 0;
  int patch_size = 0;
  int channels = 0;

  [[nodiscard]] int num_patches() const { return rows * cols; }
  [[nodiscard]] int patch_dim() const { return patch_size * patch_size * channels; }
};

template <typename T>
PatchSequence<T> patchify(const Image& img, int patch_size);

template <typename T>
Image unpatchify(const PatchSequence<T>& seq);

enum class MaskStrategy { kRandom, kBlockwise, kGridwise };

MaskStrategy parse_strategy(std::string_view name);
std::string to_string(MaskStrategy s);

/// A permutation of 0..N-1 whose first `num_visible` entries are the kept patches.
struct MaskPlan {
  std::vector<int> permutation;
  int num_visible = 0;
  double mask_ratio = 0.0;
  MaskStrategy strategy = MaskStrategy::kRandom;

  [[nodiscard]] int num_patches() const { return static_cast<int>(permutation.size()); }
  [[nodiscard]] int num_masked() const { return num_patches() - num_visible; }
  [[nodiscard]] std::span<const int> visible() const {
    return std::span<const int>(permutation).first(num_visible);
  }
  [[nodiscard]] std::span<const int> masked() const {
    return std::span<const int>(permutation).subspan(num_visible);
  }
  /// is_masked()[i] is true when patch i was dropped.
  [[nodiscard]] std::vector<bool> is_masked() const;
  [[nodiscard]] std::vector<int> inverse() const;

  /// Throws ShapeError unless permutation is a bijection and num_visible is in range.
  void validate() const;

  /// {"strategy": ..., "ratio": r, "permutation": [...], "num_visible": n}
  [[nodiscard]] std::string to_json() const;
  static MaskPlan from_json(std::string_view json);

  friend bool operator==(const MaskPlan&, const MaskPlan&) = default;
};

/// round(r*N), the number of dropped patches.
int masked_count(int num_patches, double ratio);

/// All-visible plan with the identity permutation.
MaskPlan identity_plan(int num_patches);

/// `grid` is (rows, cols) for the spatial strategies; {0,0} infers a square grid,
/// falling back to a single row. r == 0 always yields the identity plan.
MaskPlan make_mask_plan(int num_patches, double ratio, MaskStrategy strategy, Rng& rng,
                        std::pair<int, int> grid = {0, 0});

/// Rows tokens[permutation[i]] for i < num_visible.
template <typename T>
Mat<T> apply_mask(const Mat<T>& tokens, const MaskPlan& plan);

/// Inverse of apply_mask: visible rows return to their slots, masked slots get `fill`.
template <typename T>
Mat<T> restore_order(const Mat<T>& visible, const MaskPlan& plan, const RowVec<T>& fill);

}  // namespace mrcl::masking
