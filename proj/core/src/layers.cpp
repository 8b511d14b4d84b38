#include <algorithm>
#include <cmath>
#include <numeric>
#include <cstring>
#include <numbers>

#include "mrcl/errors.hpp"
#include "mrcl/layers.hpp"

namespace mrcl::vit {

// ---------------------------------------------------------------------------
// ParamStore

template <typename T>
std::size_t ParamStore<T>::add(std::string name, Eigen::Index rows, Eigen::Index cols, bool decay) {
  if (find(name) != nullptr) throw ConfigError("duplicate parameter name: " + name);
  Param<T> p;
  p.name = std::move(name);
  p.value = Mat<T>::Zero(rows, cols);
  p.grad = Mat<T>::Zero(rows, cols);
  p.decay = decay;
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

template <typename T>
Param<T>* ParamStore<T>::find(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <typename T>
const Param<T>* ParamStore<T>::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

template <typename T>
std::size_t ParamStore<T>::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

template <typename T>
std::uint64_t ParamStore<T>::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto feed = [&h](const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params_) {
    feed(p.name.data(), p.name.size());
    const std::int64_t dims[2] = {p.value.rows(), p.value.cols()};
    feed(dims, sizeof(dims));
    feed(p.value.data(), static_cast<std::size_t>(p.value.size()) * sizeof(T));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Linear

template <typename T>
Linear<T>::Linear(ParamStore<T>& store, const std::string& prefix, int in, int out)
    : weight(store.add(prefix + ".weight", in, out, true)), bias(store.add(prefix + ".bias", 1, out, false)) {}

template <typename T>
Mat<T> Linear<T>::forward(const ParamStore<T>& p, const Mat<T>& x) const {
  Mat<T> y = x * p[weight].value;
  y.rowwise() += p[bias].value.row(0);
  return y;
}

template <typename T>
Mat<T> Linear<T>::backward(ParamStore<T>& p, const Mat<T>& x, const Mat<T>& dy) const {
  p[weight].grad.noalias() += x.transpose() * dy;
  p[bias].grad += dy.colwise().sum();
  return dy * p[weight].value.transpose();
}

template <typename T>
void Linear<T>::init_xavier(ParamStore<T>& p, Rng& rng) const {
  auto& w = p[weight].value;
  const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(uniform(rng, -bound, bound));
  p[bias].value.setZero();
}

// ---------------------------------------------------------------------------
// LayerNorm

template <typename T>
LayerNorm<T>::LayerNorm(ParamStore<T>& store, const std::string& prefix, int dim, T eps_)
    : weight(store.add(prefix + ".weight", 1, dim, false)),
      bias(store.add(prefix + ".bias", 1, dim, false)),
      eps(eps_) {
  store[weight].value.setOnes();
}

template <typename T>
Mat<T> LayerNorm<T>::forward(const ParamStore<T>& p, const Mat<T>& x, Cache* cache) const {
  const Eigen::Index n = x.rows();
  const auto d = static_cast<T>(x.cols());
  Mat<T> xhat(x.rows(), x.cols());
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).sum() / d;
    const auto centered = (x.row(i).array() - mean).matrix();
    const T var = centered.squaredNorm() / d;
    rstd(i) = T(1) / std::sqrt(var + eps);
    xhat.row(i) = centered * rstd(i);
  }
  Mat<T> y = (xhat.array().rowwise() * p[weight].value.row(0).array()).matrix();
  y.rowwise() += p[bias].value.row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename T>
Mat<T> LayerNorm<T>::backward(ParamStore<T>& p, const Cache& cache, const Mat<T>& dy) const {
  p[weight].grad += (dy.array() * cache.xhat.array()).matrix().colwise().sum();
  p[bias].grad += dy.colwise().sum();
  const Mat<T> dxhat = (dy.array().rowwise() * p[weight].value.row(0).array()).matrix();
  const auto d = static_cast<T>(dy.cols());
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const T mean_g = dxhat.row(i).sum() / d;
    const T mean_gx = dxhat.row(i).dot(cache.xhat.row(i)) / d;
    dx.row(i) = cache.rstd(i) * (dxhat.row(i).array() - mean_g - cache.xhat.row(i).array() * mean_gx).matrix();
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
Attention<T>::Attention(ParamStore<T>& store, const std::string& prefix, int dim_, int heads_)
    : qkv(store, prefix + ".qkv", dim_, 3 * dim_), proj(store, prefix + ".proj", dim_, dim_), dim(dim_), heads(heads_) {
  if (heads <= 0 || dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
}

// Keys are visited in an order fixed by their content, so every reduction over
// keys gives bitwise identical results when the token rows are permuted.
template <typename T>
std::vector<Eigen::Index> canonical_key_order(const Mat<T>& kv) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(kv.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    const T* ra = kv.row(a).data();
    const T* rb = kv.row(b).data();
    return std::lexicographical_compare(ra, ra + kv.cols(), rb, rb + kv.cols());
  });
  return order;
}

template <typename T>
Mat<T> Attention<T>::forward(const ParamStore<T>& p, const Mat<T>& x, Cache* cache) const {
  const Eigen::Index n = x.rows();
  const int hd = dim / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  Mat<T> qkv_out = qkv.forward(p, x);
  Mat<T> context = Mat<T>::Zero(n, dim);
  std::vector<Mat<T>> probs;
  if (cache) probs.reserve(static_cast<std::size_t>(heads));
  Mat<T> kv(n, 2 * hd);
  for (int h = 0; h < heads; ++h) {
    const auto q = qkv_out.block(0, h * hd, n, hd);
    const auto k = qkv_out.block(0, dim + h * hd, n, hd);
    const auto v = qkv_out.block(0, 2 * dim + h * hd, n, hd);
    kv << k, v;
    const auto order = canonical_key_order(kv);
    const Mat<T> kt = k.transpose();
    Mat<T> s = Mat<T>::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      auto row = s.row(i);
      for (int d = 0; d < hd; ++d) row += q(i, d) * kt.row(d);
      row *= scale;
      const T mx = row.maxCoeff();
      T total = 0;
      for (Eigen::Index j = 0; j < n; ++j) row(j) = std::exp(row(j) - mx);
      for (const Eigen::Index j : order) total += row(j);
      for (Eigen::Index j = 0; j < n; ++j) row(j) /= total;
      auto ctx = context.block(i, h * hd, 1, hd);
      for (const Eigen::Index j : order) ctx += row(j) * v.row(j);
    }
    if (cache) probs.push_back(std::move(s));
  }
  Mat<T> y = proj.forward(p, context);
  if (cache) {
    cache->x = x;
    cache->qkv = std::move(qkv_out);
    cache->probs = std::move(probs);
    cache->context = std::move(context);
  }
  return y;
}

template <typename T>
Mat<T> Attention<T>::backward(ParamStore<T>& p, const Cache& c, const Mat<T>& dy) const {
  const Eigen::Index n = c.x.rows();
  const int hd = dim / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const Mat<T> dcontext = proj.backward(p, c.context, dy);
  Mat<T> dqkv(n, 3 * dim);
  for (int h = 0; h < heads; ++h) {
    const auto q = c.qkv.block(0, h * hd, n, hd);
    const auto k = c.qkv.block(0, dim + h * hd, n, hd);
    const auto v = c.qkv.block(0, 2 * dim + h * hd, n, hd);
    const Mat<T>& a = c.probs[static_cast<std::size_t>(h)];
    const auto dctx = dcontext.block(0, h * hd, n, hd);
    const Mat<T> da = dctx * v.transpose();
    dqkv.block(0, 2 * dim + h * hd, n, hd).noalias() = a.transpose() * dctx;
    Mat<T> ds = a.cwiseProduct(da);
    const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = ds.rowwise().sum();
    ds -= (a.array().colwise() * row_dot.array()).matrix();
    ds *= scale;
    dqkv.block(0, h * hd, n, hd).noalias() = ds * k;
    dqkv.block(0, dim + h * hd, n, hd).noalias() = ds.transpose() * q;
  }
  return qkv.backward(p, c.x, dqkv);
}

// ---------------------------------------------------------------------------
// Mlp

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
Mlp<T>::Mlp(ParamStore<T>& store, const std::string& prefix, int in, int hidden, int out, Activation act)
    : fc1(store, prefix + ".fc1", in, hidden), fc2(store, prefix + ".fc2", hidden, out), activation(act) {}

template <typename T>
Mat<T> Mlp<T>::forward(const ParamStore<T>& p, const Mat<T>& x, Cache* cache) const {
  Mat<T> pre = fc1.forward(p, x);
  Mat<T> act = activation == Activation::kGelu ? Mat<T>(pre.unaryExpr([](T v) { return gelu(v); }))
                                               : Mat<T>(pre.cwiseMax(T(0)));
  Mat<T> y = fc2.forward(p, act);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

template <typename T>
Mat<T> Mlp<T>::backward(ParamStore<T>& p, const Cache& c, const Mat<T>& dy) const {
  Mat<T> dact = fc2.backward(p, c.act, dy);
  if (activation == Activation::kGelu) {
    dact.array() *= c.pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
  } else {
    dact.array() *= (c.pre.array() > T(0)).template cast<T>();
  }
  return fc1.backward(p, c.x, dact);
}

// ---------------------------------------------------------------------------
// Block

template <typename T>
Block<T>::Block(ParamStore<T>& store, const std::string& prefix, int dim, int heads, int mlp_hidden, T eps)
    : norm1(store, prefix + ".norm1", dim, eps),
      attn(store, prefix + ".attn", dim, heads),
      norm2(store, prefix + ".norm2", dim, eps),
      mlp(store, prefix + ".mlp", dim, mlp_hidden, dim, Activation::kGelu) {}

template <typename T>
Mat<T> Block<T>::forward(const ParamStore<T>& p, const Mat<T>& x, Cache* cache) const {
  Mat<T> mid = x + attn.forward(p, norm1.forward(p, x, cache ? &cache->norm1 : nullptr), cache ? &cache->attn : nullptr);
  return mid + mlp.forward(p, norm2.forward(p, mid, cache ? &cache->norm2 : nullptr), cache ? &cache->mlp : nullptr);
}

template <typename T>
Mat<T> Block<T>::backward(ParamStore<T>& p, const Cache& c, const Mat<T>& dy) const {
  Mat<T> dmid = dy + norm2.backward(p, c.norm2, mlp.backward(p, c.mlp, dy));
  return dmid + norm1.backward(p, c.norm1, attn.backward(p, c.attn, dmid));
}

#define MRCL_INSTANTIATE(T)        \
  template class ParamStore<T>;    \
  template class Linear<T>;        \
  template class LayerNorm<T>;     \
  template class Attention<T>;     \
  template class Mlp<T>;           \
  template class Block<T>;         \
  template T gelu<T>(T);           \
  template T gelu_grad<T>(T);
MRCL_INSTANTIATE(float)
MRCL_INSTANTIATE(double)
#undef MRCL_INSTANTIATE

}  // namespace mrcl::vit
