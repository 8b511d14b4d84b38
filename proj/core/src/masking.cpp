#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "mrcl/errors.hpp"
#include "mrcl/masking.hpp"

namespace mrcl::masking {

template <typename T>
PatchSequence<T> patchify(const Image& img, int patch_size) {
  const int p = patch_size;
  if (p <= 0 || img.height <= 0 || img.width <= 0 || img.height % p != 0 || img.width % p != 0) {
    throw ShapeError("cannot patchify H=" + std::to_string(img.height) + ", W=" +
                     std::to_string(img.width) + " with P=" + std::to_string(p) +
                     ": P must divide H and W");
  }
  PatchSequence<T> seq;
  seq.rows = img.height / p;
  seq.cols = img.width / p;
  seq.patch_size = p;
  seq.channels = img.channels;
  seq.patches.resize(seq.num_patches(), seq.patch_dim());
  for (int gr = 0; gr < seq.rows; ++gr) {
    for (int gc = 0; gc < seq.cols; ++gc) {
      const int n = gr * seq.cols + gc;
      int k = 0;
      for (int py = 0; py < p; ++py) {
        for (int px = 0; px < p; ++px) {
          for (int c = 0; c < img.channels; ++c) {
            seq.patches(n, k++) = static_cast<T>(img.at(gr * p + py, gc * p + px, c));
          }
        }
      }
    }
  }
  return seq;
}

template <typename T>
Image unpatchify(const PatchSequence<T>& seq) {
  const int p = seq.patch_size;
  if (p <= 0 || seq.rows <= 0 || seq.cols <= 0 || seq.channels <= 0 ||
      seq.patches.rows() != seq.num_patches() || seq.patches.cols() != seq.patch_dim()) {
    throw ShapeError("inconsistent patch sequence: grid " + std::to_string(seq.rows) + "x" +
                     std::to_string(seq.cols) + ", P=" + std::to_string(p) + ", tensor " +
                     std::to_string(seq.patches.rows()) + "x" + std::to_string(seq.patches.cols()));
  }
  Image img(seq.rows * p, seq.cols * p, seq.channels);
  for (int gr = 0; gr < seq.rows; ++gr) {
    for (int gc = 0; gc < seq.cols; ++gc) {
      const int n = gr * seq.cols + gc;
      int k = 0;
      for (int py = 0; py < p; ++py) {
        for (int px = 0; px < p; ++px) {
          for (int c = 0; c < seq.channels; ++c) {
            img.at(gr * p + py, gc * p + px, c) = static_cast<float>(seq.patches(n, k++));
          }
        }
      }
    }
  }
  return img;
}

MaskStrategy parse_strategy(std::string_view name) {
  if (name == "random") return MaskStrategy::kRandom;
  if (name == "blockwise") return MaskStrategy::kBlockwise;
  if (name == "gridwise") return MaskStrategy::kGridwise;
  throw ConfigError("unknown mask strategy '" + std::string(name) +
                    "' (expected random, blockwise, gridwise)");
}

std::string to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::kRandom: return "random";
    case MaskStrategy::kBlockwise: return "blockwise";
    case MaskStrategy::kGridwise: return "gridwise";
  }
  return "?";
}

std::vector<bool> MaskPlan::is_masked() const {
  std::vector<bool> out(permutation.size(), false);
  for (int idx : masked()) out[static_cast<std::size_t>(idx)] = true;
  return out;
}

std::vector<int> MaskPlan::inverse() const {
  std::vector<int> inv(permutation.size());
  for (std::size_t i = 0; i < permutation.size(); ++i) inv[static_cast<std::size_t>(permutation[i])] = static_cast<int>(i);
  return inv;
}

void MaskPlan::validate() const {
  const int n = num_patches();
  if (num_visible < 0 || num_visible > n) {
    throw ShapeError("mask plan num_visible " + std::to_string(num_visible) + " outside [0, " +
                     std::to_string(n) + "]");
  }
  std::vector<bool> seen(permutation.size(), false);
  for (int idx : permutation) {
    if (idx < 0 || idx >= n || seen[static_cast<std::size_t>(idx)]) {
      throw ShapeError("mask plan permutation is not a bijection on 0.." + std::to_string(n - 1));
    }
    seen[static_cast<std::size_t>(idx)] = true;
  }
}

std::string MaskPlan::to_json() const {
  nlohmann::json j;
  j["strategy"] = to_string(strategy);
  j["ratio"] = mask_ratio;
  j["num_visible"] = num_visible;
  j["permutation"] = permutation;
  return j.dump();
}

MaskPlan MaskPlan::from_json(std::string_view json) {
  try {
    const auto j = nlohmann::json::parse(json);
    MaskPlan plan;
    plan.strategy = parse_strategy(j.at("strategy").get<std::string>());
    plan.mask_ratio = j.at("ratio").get<double>();
    plan.permutation = j.at("permutation").get<std::vector<int>>();
    plan.num_visible = j.contains("num_visible")
                           ? j.at("num_visible").get<int>()
                           : plan.num_patches() - masked_count(plan.num_patches(), plan.mask_ratio);
    plan.validate();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw ShapeError(std::string("malformed mask plan: ") + e.what());
  }
}

int masked_count(int num_patches, double ratio) {
  return static_cast<int>(std::lround(ratio * num_patches));
}

MaskPlan identity_plan(int num_patches) {
  MaskPlan plan;
  plan.permutation.resize(static_cast<std::size_t>(num_patches));
  std::iota(plan.permutation.begin(), plan.permutation.end(), 0);
  plan.num_visible = num_patches;
  return plan;
}

namespace {

std::pair<int, int> infer_grid(int n, std::pair<int, int> grid) {
  if (grid.first > 0 && grid.second > 0) {
    if (grid.first * grid.second != n) {
      throw ShapeError("mask grid " + std::to_string(grid.first) + "x" + std::to_string(grid.second) +
                       " does not hold " + std::to_string(n) + " patches");
    }
    return grid;
  }
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (side * side == n) return {side, side};
  return {1, n};
}

// Masked set: the first `m` cells (row-major) of a near-square rectangle at a random anchor.
std::vector<int> blockwise_masked(int m, std::pair<int, int> grid, Rng& rng) {
  const auto [rows, cols] = grid;
  int h = std::min(rows, std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(m))))));
  int w = std::min(cols, (m + h - 1) / h);
  while (h * w < m) {  // grid too narrow in one direction
    if (h < rows) {
      ++h;
    } else {
      ++w;
    }
    w = std::min(cols, std::max(w, (m + h - 1) / h));
  }
  const int top = static_cast<int>(rng() % static_cast<std::uint64_t>(rows - h + 1));
  const int left = static_cast<int>(rng() % static_cast<std::uint64_t>(cols - w + 1));
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(m));
  for (int r = 0; r < h && static_cast<int>(out.size()) < m; ++r) {
    for (int c = 0; c < w && static_cast<int>(out.size()) < m; ++c) out.push_back((top + r) * cols + left + c);
  }
  return out;
}

// Masked set: indices ordered by ((i + offset) mod k, i), k = round(1/r); takes the first m.
std::vector<int> gridwise_masked(int n, int m, double ratio, Rng& rng) {
  const int k = std::max(1, static_cast<int>(std::lround(1.0 / ratio)));
  const int offset = static_cast<int>(rng() % static_cast<std::uint64_t>(k));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return (a + offset) % k < (b + offset) % k; });
  order.resize(static_cast<std::size_t>(m));
  return order;
}

}  // namespace

MaskPlan make_mask_plan(int num_patches, double ratio, MaskStrategy strategy, Rng& rng,
                        std::pair<int, int> grid) {
  if (num_patches < 1) throw ConfigError("mask plan needs at least one patch");
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw ConfigError("mask ratio " + std::to_string(ratio) + " outside [0, 1)");
  }
  const int m = masked_count(num_patches, ratio);
  MaskPlan plan = identity_plan(num_patches);
  plan.mask_ratio = ratio;
  plan.strategy = strategy;
  plan.num_visible = num_patches - m;
  if (ratio == 0.0) return plan;

  if (strategy == MaskStrategy::kRandom) {
    std::shuffle(plan.permutation.begin(), plan.permutation.end(), rng);
    return plan;
  }

  const std::vector<int> masked = strategy == MaskStrategy::kBlockwise
                                      ? blockwise_masked(m, infer_grid(num_patches, grid), rng)
                                      : gridwise_masked(num_patches, m, ratio, rng);
  std::vector<bool> dropped(static_cast<std::size_t>(num_patches), false);
  for (int idx : masked) dropped[static_cast<std::size_t>(idx)] = true;
  std::vector<int> visible;
  for (int i = 0; i < num_patches; ++i) {
    if (!dropped[static_cast<std::size_t>(i)]) visible.push_back(i);
  }
  std::shuffle(visible.begin(), visible.end(), rng);
  std::copy(visible.begin(), visible.end(), plan.permutation.begin());
  std::copy(masked.begin(), masked.end(), plan.permutation.begin() + static_cast<std::ptrdiff_t>(visible.size()));
  return plan;
}

template <typename T>
Mat<T> apply_mask(const Mat<T>& tokens, const MaskPlan& plan) {
  if (tokens.rows() != plan.num_patches()) {
    throw ShapeError("apply_mask: tokens have " + std::to_string(tokens.rows()) +
                     " rows but the plan covers " + std::to_string(plan.num_patches()));
  }
  Mat<T> out(plan.num_visible, tokens.cols());
  for (int i = 0; i < plan.num_visible; ++i) out.row(i) = tokens.row(plan.permutation[static_cast<std::size_t>(i)]);
  return out;
}

template <typename T>
Mat<T> restore_order(const Mat<T>& visible, const MaskPlan& plan, const RowVec<T>& fill) {
  if (visible.rows() != plan.num_visible || fill.cols() != visible.cols()) {
    throw ShapeError("restore_order: " + std::to_string(visible.rows()) + " visible rows for a plan with " +
                     std::to_string(plan.num_visible));
  }
  Mat<T> out(plan.num_patches(), visible.cols());
  for (int i = 0; i < plan.num_patches(); ++i) {
    const int slot = plan.permutation[static_cast<std::size_t>(i)];
    if (i < plan.num_visible) {
      out.row(slot) = visible.row(i);
    } else {
      out.row(slot) = fill;
    }
  }
  return out;
}

#define MRCL_INSTANTIATE(T)                                                    \
  template PatchSequence<T> patchify<T>(const Image&, int);                    \
  template Image unpatchify<T>(const PatchSequence<T>&);                       \
  template Mat<T> apply_mask<T>(const Mat<T>&, const MaskPlan&);               \
  template Mat<T> restore_order<T>(const Mat<T>&, const MaskPlan&, const RowVec<T>&);
MRCL_INSTANTIATE(float)
MRCL_INSTANTIATE(double)
#undef MRCL_INSTANTIATE

}  // namespace mrcl::masking
