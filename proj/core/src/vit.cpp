#include <algorithm>
#include <cmath>

#include "mrcl/errors.hpp"
#include "mrcl/vit.hpp"

namespace mrcl::vit {

using masking::MaskPlan;
using masking::PatchSequence;

int ViTConfig::mlp_hidden(int dim) const {
  return std::max(1, static_cast<int>(std::lround(dim * mlp_ratio)));
}

void ViTConfig::validate() const {
  const auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model.") + name + " must be positive");
  };
  positive(image_height, "image_height");
  positive(image_width, "image_width");
  positive(channels, "channels");
  positive(patch_size, "patch_size");
  positive(embed_dim, "embed_dim");
  positive(num_heads, "num_heads");
  positive(decoder_dim, "decoder_dim");
  positive(decoder_heads, "decoder_heads");
  positive(proj_hidden_dim, "proj_hidden_dim");
  positive(proj_dim, "proj_dim");
  if (depth < 1) throw ConfigError("model.depth must be >= 1");
  if (decoder_depth < 1) throw ConfigError("model.decoder_depth must be >= 1");
  if (image_height % patch_size != 0 || image_width % patch_size != 0) {
    throw ConfigError("model.patch_size " + std::to_string(patch_size) + " must divide the image size " +
                      std::to_string(image_height) + "x" + std::to_string(image_width));
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("model.embed_dim " + std::to_string(embed_dim) + " must be divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (decoder_dim % decoder_heads != 0) {
    throw ConfigError("model.decoder_dim " + std::to_string(decoder_dim) +
                      " must be divisible by decoder_heads " + std::to_string(decoder_heads));
  }
  if (!(mlp_ratio > 0.0)) throw ConfigError("model.mlp_ratio must be positive");
  if (!(norm_eps > 0.0)) throw ConfigError("model.norm_eps must be positive");
  if (static_cast<int>(input_mean.size()) != channels || static_cast<int>(input_std.size()) != channels) {
    throw ConfigError("model.input_mean and model.input_std need one entry per channel");
  }
  for (double s : input_std) {
    if (!(s > 0.0)) throw ConfigError("model.input_std entries must be positive");
  }
}

template <typename T>
Mat<T> sinusoid_table(int positions, int dim) {
  Mat<T> table(positions, dim);
  for (int pos = 0; pos < positions; ++pos) {
    for (int j = 0; j < dim; ++j) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / dim);
      const double angle = pos * freq;
      table(pos, j) = static_cast<T>(j % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return table;
}

template <typename T>
VisionTransformer<T>::VisionTransformer(ViTConfig config) : config_(std::move(config)) {
  config_.validate();
  const int d = config_.embed_dim;
  const int dd = config_.decoder_dim;
  const int n = config_.num_patches();
  const T eps = static_cast<T>(config_.norm_eps);

  patch_embed_ = Linear<T>(params_, "encoder.patch_embed", config_.patch_dim(), d);
  if (config_.use_class_token) cls_token_ = params_.add("encoder.cls_token", 1, d, false);
  pos_embed_ = params_.add("encoder.pos_embed", n + 1, d, false);
  for (int i = 0; i < config_.depth; ++i) {
    encoder_blocks_.emplace_back(params_, "encoder.blocks." + std::to_string(i), d, config_.num_heads,
                                 config_.mlp_hidden(d), eps);
  }
  encoder_norm_ = LayerNorm<T>(params_, "encoder.norm", d, eps);

  decoder_embed_ = Linear<T>(params_, "decoder.embed", d, dd);
  mask_token_ = params_.add("decoder.mask_token", 1, dd, false);
  for (int i = 0; i < config_.decoder_depth; ++i) {
    decoder_blocks_.emplace_back(params_, "decoder.blocks." + std::to_string(i), dd, config_.decoder_heads,
                                 config_.mlp_hidden(dd), eps);
  }
  decoder_norm_ = LayerNorm<T>(params_, "decoder.norm", dd, eps);
  decoder_pred_ = Linear<T>(params_, "decoder.pred", dd, config_.patch_dim());
  decoder_pos_ = sinusoid_table<T>(n + 1, dd);

  projector_ = Mlp<T>(params_, "projector", d, config_.proj_hidden_dim, config_.proj_dim, Activation::kRelu);
}

template <typename T>
void VisionTransformer<T>::initialize(std::uint64_t seed) {
  Rng rng = make_rng({seed, tag(Stream::kInit)});
  std::normal_distribution<double> normal(0.0, 0.02);
  const auto fill_normal = [&](std::size_t idx) {
    auto& v = params_[idx].value;
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(normal(rng));
  };
  const auto init_block = [&](const Block<T>& b) {
    b.attn.qkv.init_xavier(params_, rng);
    b.attn.proj.init_xavier(params_, rng);
    b.mlp.fc1.init_xavier(params_, rng);
    b.mlp.fc2.init_xavier(params_, rng);
    for (const auto* ln : {&b.norm1, &b.norm2}) {
      params_[ln->weight].value.setOnes();
      params_[ln->bias].value.setZero();
    }
  };

  patch_embed_.init_xavier(params_, rng);
  if (config_.use_class_token) fill_normal(cls_token_);
  fill_normal(pos_embed_);
  for (const auto& b : encoder_blocks_) init_block(b);
  decoder_embed_.init_xavier(params_, rng);
  fill_normal(mask_token_);
  for (const auto& b : decoder_blocks_) init_block(b);
  decoder_pred_.init_xavier(params_, rng);
  projector_.fc1.init_xavier(params_, rng);
  projector_.fc2.init_xavier(params_, rng);
  for (const auto* ln : {&encoder_norm_, &decoder_norm_}) {
    params_[ln->weight].value.setOnes();
    params_[ln->bias].value.setZero();
  }
  params_.zero_grad();
}

template <typename T>
PatchSequence<T> VisionTransformer<T>::prepare(const Image& img) const {
  if (img.height != config_.image_height || img.width != config_.image_width || img.channels != config_.channels) {
    throw ShapeError("model expects " + std::to_string(config_.image_height) + "x" +
                     std::to_string(config_.image_width) + "x" + std::to_string(config_.channels) +
                     " input, got " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                     std::to_string(img.channels));
  }
  PatchSequence<T> seq = masking::patchify<T>(img, config_.patch_size);
  const int c = config_.channels;
  for (Eigen::Index k = 0; k < seq.patches.cols(); ++k) {
    const auto ch = static_cast<std::size_t>(k % c);
    const T mean = static_cast<T>(config_.input_mean[ch]);
    const T inv = static_cast<T>(1.0 / config_.input_std[ch]);
    seq.patches.col(k) = ((seq.patches.col(k).array() - mean) * inv).matrix();
  }
  return seq;
}

template <typename T>
Mat<T> VisionTransformer<T>::embed_patches(const PatchSequence<T>& seq, const MaskPlan& plan,
                                           EmbedCache<T>* cache) const {
  const int n = config_.num_patches();
  if (seq.num_patches() != n || seq.patches.rows() != n || seq.patches.cols() != config_.patch_dim()) {
    throw ShapeError("embed_patches: expected " + std::to_string(n) + " patches of dim " +
                     std::to_string(config_.patch_dim()) + ", got " + std::to_string(seq.patches.rows()) + "x" +
                     std::to_string(seq.patches.cols()));
  }
  if (plan.num_patches() != n) {
    throw ShapeError("embed_patches: mask plan covers " + std::to_string(plan.num_patches()) + " patches, model has " +
                     std::to_string(n));
  }
  plan.validate();
  Mat<T> visible = masking::apply_mask(seq.patches, plan);
  const Mat<T> projected = patch_embed_.forward(params_, visible);
  const int c = class_offset();
  const auto& pos = params_[pos_embed_].value;
  Mat<T> tokens(c + plan.num_visible, config_.embed_dim);
  if (c == 1) tokens.row(0) = params_[cls_token_].value.row(0) + pos.row(0);
  for (int i = 0; i < plan.num_visible; ++i) {
    tokens.row(c + i) = projected.row(i) + pos.row(1 + plan.permutation[static_cast<std::size_t>(i)]);
  }
  if (cache) {
    cache->visible_patches = std::move(visible);
    cache->plan = plan;
  }
  return tokens;
}

template <typename T>
Mat<T> VisionTransformer<T>::run_stack(const std::vector<Block<T>>& blocks, const LayerNorm<T>& norm, Mat<T> x,
                                       StackCache<T>* cache, bool final_norm, const char* where) const {
  if (cache) {
    cache->blocks.resize(blocks.size());
    cache->final_norm = final_norm;
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    x = blocks[i].forward(params_, x, cache ? &cache->blocks[i] : nullptr);
    if (!x.allFinite()) {
      throw NumericError(std::string("non-finite activation in ") + where + " block " + std::to_string(i));
    }
  }
  if (final_norm) x = norm.forward(params_, x, cache ? &cache->norm : nullptr);
  return x;
}

template <typename T>
Mat<T> VisionTransformer<T>::backward_stack(const std::vector<Block<T>>& blocks, const LayerNorm<T>& norm,
                                            const StackCache<T>& cache, Mat<T> dy) {
  if (cache.final_norm) dy = norm.backward(params_, cache.norm, dy);
  for (std::size_t i = blocks.size(); i-- > 0;) dy = blocks[i].backward(params_, cache.blocks[i], dy);
  return dy;
}

namespace {

// Rows are summed in sorted order so the mean does not depend on token order.
template <typename T>
RowVec<T> token_mean(const Mat<T>& tokens) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(tokens.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    const T* ra = tokens.row(a).data();
    const T* rb = tokens.row(b).data();
    return std::lexicographical_compare(ra, ra + tokens.cols(), rb, rb + tokens.cols());
  });
  RowVec<T> sum = RowVec<T>::Zero(tokens.cols());
  for (const Eigen::Index i : order) sum += tokens.row(i);
  return sum / static_cast<T>(tokens.rows());
}

}  // namespace

template <typename T>
Representation<T> VisionTransformer<T>::encode(const Mat<T>& tokens, const MaskPlan& plan, EncodeCache<T>* cache,
                                              ForwardOptions opts) const {
  if (tokens.cols() != config_.embed_dim || tokens.rows() != class_offset() + plan.num_visible) {
    throw ShapeError("encode: expected " + std::to_string(class_offset() + plan.num_visible) + "x" +
                     std::to_string(config_.embed_dim) + " tokens, got " + std::to_string(tokens.rows()) + "x" +
                     std::to_string(tokens.cols()));
  }
  Representation<T> rep;
  rep.tokens = run_stack(encoder_blocks_, encoder_norm_, tokens, cache ? &cache->stack : nullptr,
                         opts.final_norm, "encoder");
  rep.pooled = config_.use_class_token ? RowVec<T>(rep.tokens.row(0)) : token_mean(rep.tokens);
  rep.plan = plan;
  if (cache) cache->num_tokens = tokens.rows();
  return rep;
}

template <typename T>
PatchSequence<T> VisionTransformer<T>::decode(const Representation<T>& rep, DecodeCache<T>* cache,
                                              ForwardOptions opts) const {
  const MaskPlan& plan = rep.plan;
  const int n = config_.num_patches();
  const int c = class_offset();
  if (plan.num_patches() != n || rep.tokens.rows() != c + plan.num_visible ||
      rep.tokens.cols() != config_.embed_dim) {
    throw ShapeError("decode: representation does not match its mask plan (" + std::to_string(rep.tokens.rows()) +
                     " tokens, " + std::to_string(plan.num_visible) + " visible of " +
                     std::to_string(plan.num_patches()) + ")");
  }
  const Mat<T> projected = decoder_embed_.forward(params_, rep.tokens);
  Mat<T> full(c + n, config_.decoder_dim);
  if (c == 1) full.row(0) = projected.row(0);
  const auto& mask_token = params_[mask_token_].value;
  for (int i = 0; i < n; ++i) {
    const int slot = plan.permutation[static_cast<std::size_t>(i)];
    if (i < plan.num_visible) {
      full.row(c + slot) = projected.row(c + i);
    } else {
      full.row(c + slot) = mask_token.row(0);
    }
  }
  full += decoder_pos_.bottomRows(c + n);

  Mat<T> out = run_stack(decoder_blocks_, decoder_norm_, std::move(full), cache ? &cache->stack : nullptr,
                         opts.final_norm, "decoder");
  Mat<T> head_input = out.bottomRows(n);
  PatchSequence<T> recon;
  recon.rows = config_.grid_rows();
  recon.cols = config_.grid_cols();
  recon.patch_size = config_.patch_size;
  recon.channels = config_.channels;
  recon.patches = decoder_pred_.forward(params_, head_input);
  if (cache) {
    cache->encoder_tokens = rep.tokens;
    cache->plan = plan;
    cache->head_input = std::move(head_input);
  }
  return recon;
}

template <typename T>
Mat<T> VisionTransformer<T>::project(const Mat<T>& pooled, ProjectCache<T>* cache) const {
  if (pooled.cols() != config_.embed_dim) throw ShapeError("project: pooled features must have embed_dim columns");
  return projector_.forward(params_, pooled, cache ? &cache->mlp : nullptr);
}

template <typename T>
Mat<T> VisionTransformer<T>::backward_project(const ProjectCache<T>& cache, const Mat<T>& dz) {
  return projector_.backward(params_, cache.mlp, dz);
}

template <typename T>
Mat<T> VisionTransformer<T>::backward_decode(const DecodeCache<T>& cache, const Mat<T>& drecon) {
  const MaskPlan& plan = cache.plan;
  const int n = config_.num_patches();
  const int c = class_offset();
  const Mat<T> dhead = decoder_pred_.backward(params_, cache.head_input, drecon);
  Mat<T> dfull = Mat<T>::Zero(c + n, config_.decoder_dim);
  dfull.bottomRows(n) = dhead;
  dfull = backward_stack(decoder_blocks_, decoder_norm_, cache.stack, std::move(dfull));

  Mat<T> dprojected(c + plan.num_visible, config_.decoder_dim);
  if (c == 1) dprojected.row(0) = dfull.row(0);
  auto& dmask = params_[mask_token_].grad;
  for (int i = 0; i < n; ++i) {
    const int slot = plan.permutation[static_cast<std::size_t>(i)];
    if (i < plan.num_visible) {
      dprojected.row(c + i) = dfull.row(c + slot);
    } else {
      dmask.row(0) += dfull.row(c + slot);
    }
  }
  return decoder_embed_.backward(params_, cache.encoder_tokens, dprojected);
}

template <typename T>
Mat<T> VisionTransformer<T>::backward_encode(const EncodeCache<T>& cache, Mat<T> dtokens, const RowVec<T>& dpooled) {
  if (config_.use_class_token) {
    dtokens.row(0) += dpooled;
  } else {
    dtokens.rowwise() += dpooled / static_cast<T>(cache.num_tokens);
  }
  return backward_stack(encoder_blocks_, encoder_norm_, cache.stack, std::move(dtokens));
}

template <typename T>
void VisionTransformer<T>::backward_embed(const EmbedCache<T>& cache, const Mat<T>& dembedded) {
  const int c = class_offset();
  const MaskPlan& plan = cache.plan;
  auto& dpos = params_[pos_embed_].grad;
  if (c == 1) {
    params_[cls_token_].grad.row(0) += dembedded.row(0);
    dpos.row(0) += dembedded.row(0);
  }
  for (int i = 0; i < plan.num_visible; ++i) {
    dpos.row(1 + plan.permutation[static_cast<std::size_t>(i)]) += dembedded.row(c + i);
  }
  patch_embed_.backward(params_, cache.visible_patches, dembedded.bottomRows(plan.num_visible));
}

template class VisionTransformer<float>;
template class VisionTransformer<double>;
template Mat<float> sinusoid_table<float>(int, int);
template Mat<double> sinusoid_table<double>(int, int);

}  // namespace mrcl::vit
