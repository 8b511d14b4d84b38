#pragma once

// Vision transformer encoder over visible patches, mask-token decoder, and projector head.
//
// Parameter names (checkpoint keys), with weights stored in x out:
//   encoder.patch_embed.{weight,bias}     (P*P*C) x D
//   encoder.cls_token                     1 x D
//   encoder.pos_embed                     (N+1) x D, row 0 belongs to the class token
//   encoder.blocks.<i>.{norm1,norm2}.{weight,bias}
//   encoder.blocks.<i>.attn.{qkv,proj}.{weight,bias}
//   encoder.blocks.<i>.mlp.{fc1,fc2}.{weight,bias}
//   encoder.norm.{weight,bias}
//   decoder.embed.{weight,bias}           D x D_dec
//   decoder.mask_token                    1 x D_dec
//   decoder.blocks.<i>.*                  as above, width D_dec
//   decoder.norm.{weight,bias}
//   decoder.pred.{weight,bias}            D_dec x (P*P*C)
//   projector.fc1.{weight,bias}, projector.fc2.{weight,bias}
// The decoder positional table is fixed (1-D sinusoid over token index) and not stored.

#include <cstdint>
#include <string>
#include <vector>

#include "mrcl/layers.hpp"
#include "mrcl/masking.hpp"

namespace mrcl::vit {

struct ViTConfig {
  int image_height = 32;
  int image_width = 32;
  int channels = 3;
  int patch_size = 4;
  int embed_dim = 192;
  int depth = 6;
  int num_heads = 3;
  double mlp_ratio = 4.0;
  int decoder_dim = 96;
  int decoder_depth = 2;
  int decoder_heads = 3;
  int proj_hidden_dim = 512;
  int proj_dim = 128;
  bool use_class_token = true;
  double norm_eps = 1e-6;
  /// Per-channel input standardization applied before patchify.
  std::vector<double> input_mean{0.4914, 0.4822, 0.4465};
  std::vector<double> input_std{0.2470, 0.2435, 0.2616};

  [[nodiscard]] int grid_rows() const { return image_height / patch_size; }
  [[nodiscard]] int grid_cols() const { return image_width / patch_size; }
  [[nodiscard]] int num_patches() const { return grid_rows() * grid_cols(); }
  [[nodiscard]] int patch_dim() const { return patch_size * patch_size * channels; }
  [[nodiscard]] int mlp_hidden(int dim) const;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const ViTConfig&) const = default;
};

struct ForwardOptions {
  /// Disabling the closing LayerNorm turns all-zero blocks into an exact identity.
  bool final_norm = true;
};

template <typename T>
struct Representation {
  Mat<T> tokens;       // (1 + num_visible) x D, class token first
  RowVec<T> pooled;    // class-token output, or the token mean without a class token
  masking::MaskPlan plan;
};

template <typename T>
struct StackCache {
  std::vector<typename Block<T>::Cache> blocks;
  typename LayerNorm<T>::Cache norm;
  bool final_norm = true;
};

template <typename T>
struct EmbedCache {
  Mat<T> visible_patches;
  masking::MaskPlan plan;
};

template <typename T>
struct EncodeCache {
  StackCache<T> stack;
  Eigen::Index num_tokens = 0;
};

template <typename T>
struct DecodeCache {
  Mat<T> encoder_tokens;
  masking::MaskPlan plan;
  StackCache<T> stack;
  Mat<T> head_input;  // decoder outputs of the N patch slots
};

template <typename T>
struct ProjectCache {
  typename Mlp<T>::Cache mlp;
};

template <typename T>
class VisionTransformer {
 public:
  explicit VisionTransformer(ViTConfig config);

  /// Xavier-uniform linear layers, N(0, 0.02) tokens and positional rows, unit LayerNorms.
  void initialize(std::uint64_t seed);

  [[nodiscard]] const ViTConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  [[nodiscard]] const ParamStore<T>& params() const { return params_; }
  [[nodiscard]] const Mat<T>& decoder_pos_embed() const { return decoder_pos_; }
  [[nodiscard]] int class_offset() const { return config_.use_class_token ? 1 : 0; }

  /// Standardized patches of an image; also the reconstruction target.
  [[nodiscard]] masking::PatchSequence<T> prepare(const Image& img) const;

  /// Projects visible patches, adds their positional rows (each token keeps its original
  /// position), and prepends the class token. Masked patches are never read.
  Mat<T> embed_patches(const masking::PatchSequence<T>& seq, const masking::MaskPlan& plan,
                       EmbedCache<T>* cache = nullptr) const;

  Representation<T> encode(const Mat<T>& tokens, const masking::MaskPlan& plan,
                           EncodeCache<T>* cache = nullptr, ForwardOptions opts = {}) const;

  /// Reconstruction of all N patches.
  masking::PatchSequence<T> decode(const Representation<T>& rep, DecodeCache<T>* cache = nullptr,
                                   ForwardOptions opts = {}) const;

  /// B x D pooled features -> B x proj_dim (fc1, ReLU, fc2).
  Mat<T> project(const Mat<T>& pooled, ProjectCache<T>* cache = nullptr) const;

  /// Backward passes. Each accumulates into params().grad and returns the input gradient.
  Mat<T> backward_project(const ProjectCache<T>& cache, const Mat<T>& dz);
  Mat<T> backward_decode(const DecodeCache<T>& cache, const Mat<T>& drecon);
  /// `dtokens` is the gradient w.r.t. Representation::tokens, `dpooled` w.r.t. pooled.
  Mat<T> backward_encode(const EncodeCache<T>& cache, Mat<T> dtokens, const RowVec<T>& dpooled);
  void backward_embed(const EmbedCache<T>& cache, const Mat<T>& dembedded);

  const std::vector<Block<T>>& encoder_blocks() const { return encoder_blocks_; }
  const std::vector<Block<T>>& decoder_blocks() const { return decoder_blocks_; }

 private:
  Mat<T> run_stack(const std::vector<Block<T>>& blocks, const LayerNorm<T>& norm, Mat<T> x,
                   StackCache<T>* cache, bool final_norm, const char* where) const;
  Mat<T> backward_stack(const std::vector<Block<T>>& blocks, const LayerNorm<T>& norm,
                        const StackCache<T>& cache, Mat<T> dy);

  ViTConfig config_;
  ParamStore<T> params_;

  Linear<T> patch_embed_;
  std::size_t cls_token_ = 0;
  std::size_t pos_embed_ = 0;
  std::vector<Block<T>> encoder_blocks_;
  LayerNorm<T> encoder_norm_;

  Linear<T> decoder_embed_;
  std::size_t mask_token_ = 0;
  std::vector<Block<T>> decoder_blocks_;
  LayerNorm<T> decoder_norm_;
  Linear<T> decoder_pred_;
  Mat<T> decoder_pos_;

  Mlp<T> projector_;
};

/// Sinusoidal table, rows = positions: sin on even columns, cos on odd ones.
template <typename T>
Mat<T> sinusoid_table(int positions, int dim);

}  // namespace mrcl::vit
