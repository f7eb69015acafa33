#include <benchmark/benchmark.h>

#include "dsd/random.hpp"
#include "dsd/rank.hpp"
#include "dsd/tensor.hpp"
#include "dsd/trainer.hpp"

using namespace dsd;

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto rng = keyed_rng({1});
  const Tensor a = Tensor::randn({n, n}, rng), b = Tensor::randn({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(256);

static void BM_MatmulBackward(benchmark::State& state) {
  auto rng = keyed_rng({2});
  const Tensor a0 = Tensor::randn({64, 16, 32}, rng), b0 = Tensor::randn({32, 32}, rng);
  for (auto _ : state) {
    Tape tape;
    const Tensor a = tape.watch(a0), b = tape.watch(b0);
    benchmark::DoNotOptimize(tape.backward(sum(matmul(a, b))));
  }
}
BENCHMARK(BM_MatmulBackward);

// Latent batch at the desk scale: 64 images x 16 tokens x 8 dims.
static void BM_EffectiveRank(benchmark::State& state) {
  auto rng = keyed_rng({3});
  const Tensor m = Tensor::randn({static_cast<std::size_t>(state.range(0)), 8}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(rank::effective_rank(m));
}
BENCHMARK(BM_EffectiveRank)->Arg(64)->Arg(1024)->Arg(4096);

static void BM_TrainStep(benchmark::State& state) {
  train::ExperimentConfig c;
  c.variant = static_cast<train::CaseVariant>(state.range(0));
  c.data.train_per_class = 10;
  train::Trainer trainer(c, train::load_training_data(c));
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step());
  state.SetLabel(std::string(train::variant_name(c.variant)));
}
BENCHMARK(BM_TrainStep)
    ->DenseRange(0, 5)
    ->Unit(benchmark::kMillisecond)
    ->Iterations(10);

BENCHMARK_MAIN();
