#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mrcl/checkpoint.hpp"
#include "mrcl/errors.hpp"
#include "mrcl/trainer.hpp"

namespace mrcl::train {

namespace fs = std::filesystem;
using masking::MaskPlan;
using masking::PatchSequence;

data::Dataset DatasetSpec::load() const { return data::load_dataset(root, split, name).head(limit); }

optim::AdamWConfig TrainConfig::adamw() const {
  return {adam_betas[0], adam_betas[1], adam_eps, weight_decay};
}

void TrainConfig::validate() const {
  if (!(base_lr >= 0.0)) throw ConfigError("train.base_lr must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  for (double b : adam_betas) {
    if (!(b >= 0.0 && b < 1.0)) throw ConfigError("train.adam_betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (warmup_epochs < 0 || (epochs > 0 && warmup_epochs >= epochs)) {
    throw ConfigError("train.warmup_epochs must be >= 0 and < train.epochs");
  }
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw ConfigError("train.mask_ratio must lie in [0, 1)");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be >= 0");
  loss.validate();
  if (head == loss::ContrastiveHead::kBarlow && batch_size < 2) {
    throw ConfigError("train.batch_size must be >= 2 for the barlow head");
  }
}

void PretrainConfig::validate() const {
  model.validate();
  aug.validate(model.patch_size);
  if (aug.output_size[0] != model.image_height || aug.output_size[1] != model.image_width) {
    throw ConfigError("aug.output_size must equal the model image size");
  }
  train.validate();
  if (run_dir.empty()) throw ConfigError("run.run_dir must be set");
}

std::int64_t steps_per_epoch(std::size_t dataset_size, std::int64_t batch_size) {
  const auto n = static_cast<std::int64_t>(dataset_size);
  return (n + batch_size - 1) / batch_size;
}

optim::LrSchedule make_schedule(const TrainConfig& cfg, std::int64_t spe) {
  return {cfg.peak_lr(), cfg.warmup_epochs * spe, std::max<std::int64_t>(1, cfg.epochs * spe)};
}

template <typename T>
TrainState<T>::TrainState(vit::ViTConfig model_config, optim::AdamWConfig adam)
    : model(std::move(model_config)), optimizer(model.params(), adam) {}

template <typename T>
TrainState<T> initial_state(const vit::ViTConfig& model, const TrainConfig& train) {
  TrainState<T> state(model, train.adamw());
  state.seed = train.seed;
  state.model.initialize(train.seed);
  return state;
}

template <typename T>
ViewBatch<T> prepare_batch(const vit::VisionTransformer<T>& model, std::span<const data::ViewPair> pairs,
                           double mask_ratio, masking::MaskStrategy strategy, std::uint64_t seed,
                           std::uint64_t epoch) {
  const auto& cfg = model.config();
  const std::pair<int, int> grid{cfg.grid_rows(), cfg.grid_cols()};
  ViewBatch<T> batch;
  for (const auto& pair : pairs) {
    const std::uint64_t index = pair.source_index;
    Rng rng1 = make_rng({seed, epoch, index, 1, tag(Stream::kMask)});
    Rng rng2 = make_rng({seed, epoch, index, 2, tag(Stream::kMask)});
    batch.patches1.push_back(model.prepare(pair.view1));
    batch.patches2.push_back(model.prepare(pair.view2));
    batch.plan1.push_back(masking::make_mask_plan(cfg.num_patches(), mask_ratio, strategy, rng1, grid));
    batch.plan2.push_back(masking::make_mask_plan(cfg.num_patches(), mask_ratio, strategy, rng2, grid));
  }
  return batch;
}

namespace {

template <typename T>
struct ViewCaches {
  vit::EmbedCache<T> embed;
  vit::EncodeCache<T> encode;
  vit::DecodeCache<T> decode;
};

// Rough activation footprint of one view's caches.
template <typename T>
double cache_bytes(const vit::ViTConfig& c, int visible) {
  const double enc_tokens = visible + 1;
  const double dec_tokens = c.num_patches() + 1;
  const auto block = [](double tokens, double dim, double heads, double ratio) {
    return tokens * dim * (6.0 + 2.0 * ratio) + heads * tokens * tokens;
  };
  return sizeof(T) * (c.depth * block(enc_tokens, c.embed_dim, c.num_heads, c.mlp_ratio) +
                      c.decoder_depth * block(dec_tokens, c.decoder_dim, c.decoder_heads, c.mlp_ratio));
}

template <typename T>
T contrastive_term(const Mat<T>& z1, const Mat<T>& z2, const loss::LossWeights& w, loss::ContrastiveHead head,
                   Mat<T>* g1, Mat<T>* g2) {
  if (head == loss::ContrastiveHead::kInfoNce) return loss::info_nce(z1, z2, static_cast<T>(w.tau), g1, g2);
  return loss::barlow_twins(z1, z2, static_cast<T>(w.bt_lambda), static_cast<T>(w.bt_eps), g1, g2);
}

}  // namespace

template <typename T>
loss::LossBreakdown compute_loss(vit::VisionTransformer<T>& model, const ViewBatch<T>& batch,
                                 const loss::LossWeights& weights, loss::ContrastiveHead head,
                                 bool accumulate_grads, double activation_budget_bytes) {
  const std::size_t b = batch.size();
  if (b == 0) throw ShapeError("compute_loss: empty batch");
  const int d = model.config().embed_dim;
  const bool keep = !accumulate_grads ||
                    2.0 * static_cast<double>(b) * cache_bytes<T>(model.config(), batch.plan1[0].num_visible) <=
                        activation_budget_bytes;
  const T wm = static_cast<T>(weights.alpha) / static_cast<T>(b);
  const T wu = static_cast<T>(weights.lam) / static_cast<T>(b);

  std::vector<ViewCaches<T>> caches(accumulate_grads && keep ? 2 * b : 0);
  std::vector<Mat<T>> drecon(accumulate_grads && keep ? 2 * b : 0);
  std::array<Mat<T>, 2> pooled{Mat<T>(b, d), Mat<T>(b, d)};
  std::array<T, 2> sum_masked{T(0), T(0)};
  std::array<T, 2> sum_unmasked{T(0), T(0)};

  const auto patches_of = [&](int view, std::size_t i) -> const PatchSequence<T>& {
    return view == 0 ? batch.patches1[i] : batch.patches2[i];
  };
  const auto plan_of = [&](int view, std::size_t i) -> const MaskPlan& {
    return view == 0 ? batch.plan1[i] : batch.plan2[i];
  };
  // Decoder half of one view: accumulates the reconstruction terms, returns their gradient.
  const auto reconstruct = [&](int view, std::size_t i, const vit::Representation<T>& rep,
                               vit::DecodeCache<T>* cache) {
    const auto recon = model.decode(rep, cache);
    const auto terms = loss::reconstruction_loss(recon, patches_of(view, i), plan_of(view, i));
    sum_masked[view] += terms.masked;
    sum_unmasked[view] += terms.unmasked;
    return accumulate_grads ? loss::reconstruction_grad(recon, patches_of(view, i), plan_of(view, i), wm, wu)
                            : Mat<T>();
  };

  for (std::size_t i = 0; i < b; ++i) {
    for (int view = 0; view < 2; ++view) {
      ViewCaches<T>* c = caches.empty() ? nullptr : &caches[2 * i + view];
      const Mat<T> tokens = model.embed_patches(patches_of(view, i), plan_of(view, i), c ? &c->embed : nullptr);
      const auto rep = model.encode(tokens, plan_of(view, i), c ? &c->encode : nullptr);
      pooled[view].row(static_cast<Eigen::Index>(i)) = rep.pooled;
      if (keep) {
        Mat<T> g = reconstruct(view, i, rep, c ? &c->decode : nullptr);
        if (c) drecon[2 * i + view] = std::move(g);
      }
    }
  }

  vit::ProjectCache<T> pc1, pc2;
  const Mat<T> z1 = model.project(pooled[0], accumulate_grads ? &pc1 : nullptr);
  const Mat<T> z2 = model.project(pooled[1], accumulate_grads ? &pc2 : nullptr);
  Mat<T> g1, g2;
  const T contrastive = contrastive_term(z1, z2, weights, head, accumulate_grads ? &g1 : nullptr,
                                         accumulate_grads ? &g2 : nullptr);

  if (accumulate_grads) {
    model.params().zero_grad();
    const T cw = static_cast<T>(weights.contrastive_weight);
    const std::array<Mat<T>, 2> dpooled{model.backward_project(pc1, g1 * cw), model.backward_project(pc2, g2 * cw)};
    for (std::size_t i = 0; i < b; ++i) {
      for (int view = 0; view < 2; ++view) {
        ViewCaches<T> local;
        ViewCaches<T>* c = &local;
        Mat<T> g;
        if (keep) {
          c = &caches[2 * i + view];
          g = std::move(drecon[2 * i + view]);
        } else {
          const Mat<T> tokens = model.embed_patches(patches_of(view, i), plan_of(view, i), &c->embed);
          const auto rep = model.encode(tokens, plan_of(view, i), &c->encode);
          g = reconstruct(view, i, rep, &c->decode);
        }
        const Mat<T> dtokens = model.backward_decode(c->decode, g);
        const Mat<T> dembedded =
            model.backward_encode(c->encode, dtokens, dpooled[view].row(static_cast<Eigen::Index>(i)));
        model.backward_embed(c->embed, dembedded);
      }
    }
  }

  const auto bt = static_cast<T>(b);
  const T rec_masked = sum_masked[0] / bt + sum_masked[1] / bt;
  const T rec_unmasked = sum_unmasked[0] / bt + sum_unmasked[1] / bt;
  loss::LossBreakdown out;
  out.weights = weights;
  out.contrastive = static_cast<double>(contrastive);
  out.rec_masked = static_cast<double>(rec_masked);
  out.rec_unmasked = static_cast<double>(rec_unmasked);
  out.total = loss::compose_total(weights, out.contrastive, out.rec_masked, out.rec_unmasked);
  return out;
}

template <typename T>
loss::PairOutputs<T> forward_outputs(const vit::VisionTransformer<T>& model, const ViewBatch<T>& batch) {
  const std::size_t b = batch.size();
  const int d = model.config().embed_dim;
  loss::PairOutputs<T> out;
  Mat<T> pooled1(b, d), pooled2(b, d);
  for (std::size_t i = 0; i < b; ++i) {
    for (int view = 0; view < 2; ++view) {
      const auto& patches = view == 0 ? batch.patches1[i] : batch.patches2[i];
      const auto& plan = view == 0 ? batch.plan1[i] : batch.plan2[i];
      const auto rep = model.encode(model.embed_patches(patches, plan), plan);
      (view == 0 ? pooled1 : pooled2).row(static_cast<Eigen::Index>(i)) = rep.pooled;
      (view == 0 ? out.recon1 : out.recon2).push_back(model.decode(rep));
      (view == 0 ? out.target1 : out.target2).push_back(patches);
      (view == 0 ? out.plan1 : out.plan2).push_back(plan);
    }
  }
  out.proj1 = model.project(pooled1);
  out.proj2 = model.project(pooled2);
  return out;
}

template <typename T>
StepResult train_step(std::span<const data::ViewPair> batch, TrainState<T>& state, const TrainConfig& cfg,
                      const optim::LrSchedule& schedule) {
  const ViewBatch<T> views = prepare_batch(state.model, batch, cfg.mask_ratio, cfg.mask_strategy, state.seed,
                                           static_cast<std::uint64_t>(state.epoch));
  StepResult result;
  result.loss = compute_loss(state.model, views, cfg.loss, cfg.head, true);
  const auto& l = result.loss;
  if (!std::isfinite(l.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << state.step << ": contrastive=" << l.contrastive
        << " rec_masked=" << l.rec_masked << " rec_unmasked=" << l.rec_unmasked << " total=" << l.total;
    throw NumericError(msg.str());
  }
  result.grad_norm = optim::clip_grad_norm(state.model.params(), cfg.grad_clip);
  result.lr = schedule.at(state.step);
  state.optimizer.step(state.model.params(), result.lr);
  ++state.step;
  return result;
}

std::string MetricRecord::to_json() const {
  nlohmann::json j;
  j["step"] = step;
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["contrastive"] = loss.contrastive;
  j["rec_masked"] = loss.rec_masked;
  j["rec_unmasked"] = loss.rec_unmasked;
  j["total"] = loss.total;
  j["wallclock"] = wallclock;
  return j.dump();
}

MetricRecord MetricRecord::from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  MetricRecord r;
  r.step = j.at("step").get<std::int64_t>();
  r.epoch = j.at("epoch").get<std::int64_t>();
  r.lr = j.at("lr").get<double>();
  r.loss.contrastive = j.at("contrastive").get<double>();
  r.loss.rec_masked = j.at("rec_masked").get<double>();
  r.loss.rec_unmasked = j.at("rec_unmasked").get<double>();
  r.loss.total = j.at("total").get<double>();
  r.wallclock = j.at("wallclock").get<double>();
  return r;
}

std::vector<MetricRecord> read_metrics(const fs::path& path) {
  std::vector<MetricRecord> out;
  std::ifstream in(path);
  if (!in) return out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(MetricRecord::from_json(line));
  }
  return out;
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng({seed, static_cast<std::uint64_t>(epoch), tag(Stream::kShuffle)});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Keeps only records strictly before `step`, so a resumed run appends a seamless trace.
void truncate_metrics(const fs::path& path, std::int64_t step) {
  std::vector<std::string> keep;
  {
    std::ifstream in(path);
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && MetricRecord::from_json(line).step < step) keep.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot rewrite metrics file: " + path.string());
  for (const auto& line : keep) out << line << '\n';
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace

fs::path pretrain(const PretrainConfig& cfg, const PretrainOptions& opts) {
  return pretrain(cfg, cfg.dataset.load(), opts);
}

fs::path pretrain(const PretrainConfig& cfg, const data::Dataset& dataset, const PretrainOptions& opts) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("pretraining dataset is empty");
  const fs::path ckpt_dir = cfg.run_dir / "checkpoints";
  make_dirs(ckpt_dir);
  const fs::path latest = ckpt_dir / "latest.ckpt";
  const fs::path metrics_path = cfg.run_dir / "metrics.jsonl";

  const std::int64_t spe = steps_per_epoch(dataset.size(), cfg.train.batch_size);
  const std::int64_t total = cfg.train.epochs * spe;
  const optim::LrSchedule schedule = make_schedule(cfg.train, spe);

  const bool resuming = opts.resume && fs::exists(latest);
  TrainState<float> state = resuming ? load_checkpoint<float>(latest) : initial_state<float>(cfg.model, cfg.train);
  if (resuming) {
    truncate_metrics(metrics_path, state.step);
    if (opts.log) *opts.log << "resumed from " << latest << " at step " << state.step << "\n";
  } else {
    std::ofstream(metrics_path, std::ios::trunc);
  }
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw IoError("cannot open metrics file: " + metrics_path.string());

  const auto save = [&](const fs::path& path) {
    save_checkpoint(state, path, opts.config_text);
    if (path != latest) save_checkpoint(state, latest, opts.config_text);
  };

  if (total == 0) {
    const fs::path final_path = ckpt_dir / "final.ckpt";
    save(final_path);
    return final_path;
  }

  const auto start = std::chrono::steady_clock::now();
  const std::size_t bs = static_cast<std::size_t>(cfg.train.batch_size);
  std::vector<std::size_t> order;
  std::int64_t order_epoch = -1;
  std::size_t seen_in_epoch = 0;
  while (state.step < total) {
    const std::int64_t epoch = state.step / spe;
    const std::int64_t position = state.step % spe;
    if (epoch != order_epoch) {
      order = epoch_order(dataset.size(), state.seed, epoch);
      order_epoch = epoch;
      seen_in_epoch = static_cast<std::size_t>(position) * bs;
    }
    state.epoch = epoch;
    const std::size_t lo = static_cast<std::size_t>(position) * bs;
    const std::size_t hi = std::min(dataset.size(), lo + bs);
    std::vector<data::ViewPair> pairs;
    pairs.reserve(hi - lo);
    for (std::size_t k = lo; k < hi; ++k) {
      const data::SampleKey key{state.seed, static_cast<std::uint64_t>(epoch), order[k]};
      pairs.push_back(data::augment_pair(dataset.at(order[k]), cfg.aug, key));
    }
    seen_in_epoch += pairs.size();

    const StepResult res = train_step<float>(pairs, state, cfg.train, schedule);
    MetricRecord rec;
    rec.step = state.step - 1;
    rec.epoch = epoch;
    rec.lr = res.lr;
    rec.loss = res.loss;
    rec.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    metrics << rec.to_json() << '\n';
    metrics.flush();

    if (position == spe - 1) {
      if (seen_in_epoch != dataset.size()) {
        throw Error("epoch " + std::to_string(epoch) + " consumed " + std::to_string(seen_in_epoch) + " of " +
                    std::to_string(dataset.size()) + " samples");
      }
      if (opts.log) {
        *opts.log << "epoch " << epoch + 1 << "/" << cfg.train.epochs << " step " << state.step
                  << " total=" << res.loss.total << " contrastive=" << res.loss.contrastive
                  << " rec_masked=" << res.loss.rec_masked << " rec_unmasked=" << res.loss.rec_unmasked
                  << " lr=" << res.lr << "\n";
      }
    }
    if (cfg.train.checkpoint_every > 0 && state.step % cfg.train.checkpoint_every == 0) {
      save(ckpt_dir / ("step_" + std::to_string(state.step) + ".ckpt"));
    }
    if (opts.stop_at_step >= 0 && state.step >= opts.stop_at_step && state.step < total) {
      state.epoch = state.step / spe;
      save(latest);
      return latest;
    }
  }
  state.epoch = cfg.train.epochs;
  const fs::path final_path = ckpt_dir / "final.ckpt";
  save(final_path);
  return final_path;
}

#define MRCL_INSTANTIATE(T)                                                                                        \
  template struct TrainState<T>;                                                                                   \
  template TrainState<T> initial_state<T>(const vit::ViTConfig&, const TrainConfig&);                              \
  template ViewBatch<T> prepare_batch<T>(const vit::VisionTransformer<T>&, std::span<const data::ViewPair>, double, \
                                         masking::MaskStrategy, std::uint64_t, std::uint64_t);                     \
  template loss::LossBreakdown compute_loss<T>(vit::VisionTransformer<T>&, const ViewBatch<T>&,                    \
                                               const loss::LossWeights&, loss::ContrastiveHead, bool, double);             \
  template loss::PairOutputs<T> forward_outputs<T>(const vit::VisionTransformer<T>&, const ViewBatch<T>&);         \
  template StepResult train_step<T>(std::span<const data::ViewPair>, TrainState<T>&, const TrainConfig&,           \
                                    const optim::LrSchedule&);
MRCL_INSTANTIATE(float)
MRCL_INSTANTIATE(double)
#undef MRCL_INSTANTIATE

}  // namespace mrcl::train
