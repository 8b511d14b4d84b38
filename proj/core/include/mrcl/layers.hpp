#pragma once

// Parameter storage and the transformer building blocks. Every layer has an
// explicit forward that optionally records a cache and a backward that consumes
// it, accumulates parameter gradients into the store, and returns the input gradient.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mrcl/random.hpp"
#include "mrcl/tensor.hpp"

namespace mrcl::vit {

template <typename T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  bool decay = true;
};

/// Ordered, named parameter tensors. Layers refer to entries by index.
template <typename T>
class ParamStore {
 public:
  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols, bool decay);

  Param<T>& operator[](std::size_t i) { return params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return params_[i]; }
  [[nodiscard]] std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  [[nodiscard]] auto begin() const { return params_.begin(); }
  [[nodiscard]] auto end() const { return params_.end(); }

  Param<T>* find(std::string_view name);
  [[nodiscard]] const Param<T>* find(std::string_view name) const;

  void zero_grad();
  [[nodiscard]] std::size_t num_scalars() const;
  /// FNV-1a over names, shapes and value bytes.
  [[nodiscard]] std::uint64_t hash() const;

 private:
  std::vector<Param<T>> params_;
};

/// y = x W + b with W stored in x out.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& prefix, int in, int out);

  Mat<T> forward(const ParamStore<T>& p, const Mat<T>& x) const;
  Mat<T> backward(ParamStore<T>& p, const Mat<T>& x, const Mat<T>& dy) const;
  void init_xavier(ParamStore<T>& p, Rng& rng) const;

  std::size_t weight = 0;
  std::size_t bias = 0;
};

template <typename T>
class LayerNorm {
 public:
  struct Cache {
    Mat<T> xhat;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
  };

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& prefix, int dim, T eps);

  Mat<T> forward(const ParamStore<T>& p, const Mat<T>& x, Cache* cache) const;
  Mat<T> backward(ParamStore<T>& p, const Cache& cache, const Mat<T>& dy) const;

  std::size_t weight = 0;
  std::size_t bias = 0;
  T eps = T(1e-6);
};

/// Multi-head self-attention with a fused qkv projection.
template <typename T>
class Attention {
 public:
  struct Cache {
    Mat<T> x;
    Mat<T> qkv;
    std::vector<Mat<T>> probs;  // one T x T matrix per head
    Mat<T> context;
  };

  Attention() = default;
  Attention(ParamStore<T>& store, const std::string& prefix, int dim, int heads);

  Mat<T> forward(const ParamStore<T>& p, const Mat<T>& x, Cache* cache) const;
  Mat<T> backward(ParamStore<T>& p, const Cache& cache, const Mat<T>& dy) const;

  Linear<T> qkv;
  Linear<T> proj;
  int dim = 0;
  int heads = 1;
};

enum class Activation { kGelu, kRelu };

/// fc1 -> activation -> fc2.
template <typename T>
class Mlp {
 public:
  struct Cache {
    Mat<T> x;
    Mat<T> pre;
    Mat<T> act;
  };

  Mlp() = default;
  Mlp(ParamStore<T>& store, const std::string& prefix, int in, int hidden, int out, Activation act);

  Mat<T> forward(const ParamStore<T>& p, const Mat<T>& x, Cache* cache) const;
  Mat<T> backward(ParamStore<T>& p, const Cache& cache, const Mat<T>& dy) const;

  Linear<T> fc1;
  Linear<T> fc2;
  Activation activation = Activation::kGelu;
};

/// Pre-LN block: x' = x + MSA(LN(x)); y = x' + MLP(LN(x')).
template <typename T>
class Block {
 public:
  struct Cache {
    typename LayerNorm<T>::Cache norm1;
    typename Attention<T>::Cache attn;
    typename LayerNorm<T>::Cache norm2;
    typename Mlp<T>::Cache mlp;
  };

  Block() = default;
  Block(ParamStore<T>& store, const std::string& prefix, int dim, int heads, int mlp_hidden, T eps);

  Mat<T> forward(const ParamStore<T>& p, const Mat<T>& x, Cache* cache) const;
  Mat<T> backward(ParamStore<T>& p, const Cache& cache, const Mat<T>& dy) const;

  LayerNorm<T> norm1;
  Attention<T> attn;
  LayerNorm<T> norm2;
  Mlp<T> mlp;
};

template <typename T>
T gelu(T x);
template <typename T>
T gelu_grad(T x);

}  // namespace mrcl::vit
