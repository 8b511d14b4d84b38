#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "mrcl/checkpoint.hpp"
#include "mrcl/errors.hpp"
#include "mrcl/evaluation.hpp"

namespace mrcl::eval {

ProbeOptimizer parse_probe_optimizer(std::string_view name) {
  if (name == "sgd") return ProbeOptimizer::kSgd;
  throw ConfigError("unknown probe optimizer '" + std::string(name) + "' (expected sgd)");
}

std::string to_string(ProbeOptimizer) { return "sgd"; }

std::int64_t ProbeConfig::effective_batch(std::size_t train_size) const {
  return std::max<std::int64_t>(1, std::min<std::int64_t>(batch_size, static_cast<std::int64_t>(train_size)));
}

double ProbeConfig::effective_lr(std::size_t train_size) const {
  return lr * static_cast<double>(effective_batch(train_size)) / 1024.0;
}

void ProbeConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("probe.lr must be > 0");
  if (batch_size < 1) throw ConfigError("probe.batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("probe.epochs must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("probe.momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("probe.weight_decay must be >= 0");
  if (augment_views < 0) throw ConfigError("probe.augment_views must be >= 0");
}

Features extract_features(const vit::VisionTransformer<float>& model, const data::Dataset& dataset,
                          const FeatureOptions& opts) {
  if (opts.mask_ratio != 0.0) {
    throw ConfigError("feature extraction runs unmasked; mask_ratio must be 0 (got " +
                      std::to_string(opts.mask_ratio) + ")");
  }
  if (!dataset.labeled()) throw ConfigError("feature extraction needs a labeled dataset");
  const auto& mc = model.config();
  data::AugConfig aug;
  aug.output_size = {mc.image_height, mc.image_width};
  const auto plan = masking::identity_plan(mc.num_patches());

  Features f;
  f.x.resize(static_cast<Eigen::Index>(dataset.size()), mc.embed_dim);
  f.labels = dataset.labels();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto item = dataset.at(i);
    data::LabeledImage view;
    if (opts.augment) {
      data::SampleKey key = *opts.augment;
      key.index = i;
      view = data::probe_augment(item, aug, key);
    } else {
      view = data::eval_view(item, aug);
    }
    const auto patches = model.prepare(view.pixels);
    const auto rep = model.encode(model.embed_patches(patches, plan), plan);
    f.x.row(static_cast<Eigen::Index>(i)) = rep.pooled.cast<double>();
  }
  return f;
}

Features extract_features(const std::filesystem::path& checkpoint, const data::Dataset& dataset,
                          const FeatureOptions& opts) {
  const auto state = train::load_checkpoint<float>(checkpoint);
  return extract_features(state.model, dataset, opts);
}

std::vector<int> LinearClassifier::predict(const Mat<double>& x) const {
  const Mat<double> z = (x.rowwise() - mean).array().rowwise() * inv_std.array();
  const Mat<double> logits = (z * weight).rowwise() + bias;
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

double LinearClassifier::accuracy(const Features& f) const {
  if (f.size() == 0) return 0.0;
  const auto pred = predict(f.x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == f.labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

LinearClassifier train_linear(const Features& train, const ProbeConfig& cfg, int num_classes,
                              const std::vector<Features>& extra_views) {
  cfg.validate();
  const auto n = static_cast<Eigen::Index>(train.size());
  if (n == 0) throw ConfigError("linear probe: empty train set");
  if (num_classes < 2) throw ConfigError("linear probe: need at least 2 classes");
  std::set<int> distinct(train.labels.begin(), train.labels.end());
  if (distinct.size() < 2) throw ConfigError("linear probe: degenerate train set with a single class");
  for (int y : train.labels) {
    if (y < 0 || y >= num_classes) throw ConfigError("linear probe: label " + std::to_string(y) + " out of range");
  }
  for (const auto& v : extra_views) {
    if (v.x.rows() != n || v.x.cols() != train.x.cols()) throw ShapeError("linear probe: augmented view shape mismatch");
  }
  const Eigen::Index d = train.x.cols();

  LinearClassifier clf;
  clf.mean = train.x.colwise().mean();
  const Mat<double> centered = train.x.rowwise() - clf.mean;
  const RowVec<double> var = centered.array().square().colwise().mean();
  clf.inv_std = (var.array() + 1e-8).rsqrt();
  clf.weight = Mat<double>::Zero(d, num_classes);
  clf.bias = RowVec<double>::Zero(num_classes);

  const auto standardize = [&](const Mat<double>& x) -> Mat<double> {
    return (x.rowwise() - clf.mean).array().rowwise() * clf.inv_std.array();
  };
  std::vector<Mat<double>> views;
  if (extra_views.empty()) {
    views.push_back(standardize(train.x));
  } else {
    for (const auto& v : extra_views) views.push_back(standardize(v.x));
  }

  const std::int64_t bs = cfg.effective_batch(train.size());
  const double lr0 = cfg.effective_lr(train.size());
  const std::int64_t spe = (n + bs - 1) / bs;
  const double total = static_cast<double>(spe * cfg.epochs);
  Mat<double> mom_w = Mat<double>::Zero(d, num_classes);
  RowVec<double> mom_b = RowVec<double>::Zero(num_classes);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::int64_t t = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Mat<double>& x = views[static_cast<std::size_t>(epoch) % views.size()];
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Rng rng = make_rng({cfg.seed, static_cast<std::uint64_t>(epoch), tag(Stream::kProbe), 1});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::int64_t s = 0; s < spe; ++s, ++t) {
      const Eigen::Index lo = s * bs;
      const Eigen::Index m = std::min<Eigen::Index>(bs, n - lo);
      Mat<double> xb(m, d);
      Mat<double> g(m, num_classes);
      for (Eigen::Index k = 0; k < m; ++k) xb.row(k) = x.row(order[static_cast<std::size_t>(lo + k)]);
      Mat<double> logits = (xb * clf.weight).rowwise() + clf.bias;
      for (Eigen::Index k = 0; k < m; ++k) {
        const double mx = logits.row(k).maxCoeff();
        RowVec<double> e = (logits.row(k).array() - mx).exp();
        g.row(k) = e / e.sum();
        g(k, train.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(lo + k)])]) -= 1.0;
      }
      g /= static_cast<double>(m);
      const Mat<double> gw = xb.transpose() * g + cfg.weight_decay * clf.weight;
      const RowVec<double> gb = g.colwise().sum();
      const double lr = lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / total));
      mom_w = cfg.momentum * mom_w + gw;
      mom_b = cfg.momentum * mom_b + gb;
      clf.weight -= lr * mom_w;
      clf.bias -= lr * mom_b;
    }
  }
  return clf;
}

ProbeResult linear_probe(const vit::VisionTransformer<float>& model, const data::Dataset& train_set,
                         const data::Dataset& test_set, const ProbeConfig& cfg) {
  cfg.validate();
  if (!train_set.labeled()) throw ConfigError("linear probe: train set is unlabeled");
  if (!test_set.labeled()) throw ConfigError("linear probe: test set is unlabeled");
  ProbeResult result;
  result.params_hash_before = model.params().hash();
  const int classes = std::max(train_set.num_classes(), test_set.num_classes());
  const Features train = extract_features(model, train_set);
  std::vector<Features> views;
  for (int v = 0; v < cfg.augment_views; ++v) {
    FeatureOptions opts;
    opts.augment = data::SampleKey{cfg.seed, static_cast<std::uint64_t>(v), 0};
    views.push_back(extract_features(model, train_set, opts));
  }
  const LinearClassifier clf = train_linear(train, cfg, classes, views);
  result.train_top1 = clf.accuracy(train);
  result.top1 = clf.accuracy(extract_features(model, test_set));
  result.params_hash_after = model.params().hash();
  return result;
}

ProbeResult linear_probe(const std::filesystem::path& checkpoint, const data::Dataset& train_set,
                         const data::Dataset& test_set, const ProbeConfig& cfg) {
  const auto state = train::load_checkpoint<float>(checkpoint);
  return linear_probe(state.model, train_set, test_set, cfg);
}

}  // namespace mrcl::eval
