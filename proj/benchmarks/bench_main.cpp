// Hot paths of pretraining at the default CIFAR-sized ViT (D=192, 3 heads, 8x8 patches of 4x4).

#include <benchmark/benchmark.h>

#include <vector>

#include "mrcl/mrcl.hpp"

namespace {

using namespace mrcl;

template <typename T>
void fill(vit::ParamStore<T>& store, std::uint64_t seed) {
  Rng rng = make_rng({seed});
  for (auto& p : store) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(uniform(rng, -0.05, 0.05));
  }
}

template <typename T>
Mat<T> tokens(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng = make_rng({seed, 1});
  Mat<T> x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<T>(uniform(rng, -1, 1));
  return x;
}

void BM_AttentionForward(benchmark::State& state) {
  vit::ParamStore<float> store;
  vit::Attention<float> attn(store, "attn", 192, 3);
  fill(store, 1);
  const auto x = tokens<float>(state.range(0), 192, 2);
  for (auto _ : state) benchmark::DoNotOptimize(attn.forward(store, x, nullptr));
}
BENCHMARK(BM_AttentionForward)->Arg(17)->Arg(33)->Arg(65);

void BM_BlockForwardBackward(benchmark::State& state) {
  vit::ParamStore<float> store;
  vit::Block<float> block(store, "block", 192, 3, 768, 1e-6f);
  fill(store, 3);
  const auto x = tokens<float>(state.range(0), 192, 4);
  const auto dy = tokens<float>(state.range(0), 192, 5);
  for (auto _ : state) {
    vit::Block<float>::Cache cache;
    benchmark::DoNotOptimize(block.forward(store, x, &cache));
    benchmark::DoNotOptimize(block.backward(store, cache, dy));
  }
}
BENCHMARK(BM_BlockForwardBackward)->Arg(17)->Arg(65);

// One optimizer step; items/s is images/s, the number that sizes a 100-epoch CIFAR run.
void BM_TrainStep(benchmark::State& state) {
  train::TrainConfig cfg;
  cfg.batch_size = state.range(0);
  cfg.mask_ratio = 0.2;
  vit::ViTConfig model;
  auto st = train::initial_state<float>(model, cfg);
  const auto sched = train::make_schedule(cfg, 100);
  data::AugConfig aug;
  Rng rng = make_rng({6});
  std::vector<data::ViewPair> batch;
  for (std::int64_t i = 0; i < cfg.batch_size; ++i) {
    data::LabeledImage img{Image(32, 32, 3), 0};
    for (auto& v : img.pixels.data) v = static_cast<float>(uniform01(rng));
    batch.push_back(data::augment_pair(img, aug, {0, 0, static_cast<std::uint64_t>(i)}));
  }
  for (auto _ : state) benchmark::DoNotOptimize(train::train_step<float>(batch, st, cfg, sched));
  state.SetItemsProcessed(state.iterations() * cfg.batch_size);
}
BENCHMARK(BM_TrainStep)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
