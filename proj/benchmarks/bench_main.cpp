#include <benchmark/benchmark.h>

#include "cmseg/cosa.hpp"
#include "cmseg/loss_metrics.hpp"
#include "cmseg/model.hpp"
#include "cmseg/ops.hpp"
#include "cmseg/rng.hpp"
#include "cmseg/weight_io.hpp"

using namespace cmseg;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform_float(-1.0F, 1.0F);
  return t;
}

ModelConfig micro(int64_t size) {
  ModelConfig cfg;
  cfg.encoder.height = size;
  cfg.encoder.width = size;
  cfg.encoder.width_multiplier = 0.25F;
  return cfg;
}

void BM_Conv2d3x3(benchmark::State& state) {
  const int64_t c = state.range(0);
  const int64_t s = state.range(1);
  Rng rng(1);
  const Tensor x = random_tensor({1, c, s, s}, rng);
  const ConvParams p{random_tensor({c, c, 3, 3}, rng), Tensor(), 1, 1};
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, p));
  state.SetItemsProcessed(state.iterations() * c * c * 9 * s * s);
}
BENCHMARK(BM_Conv2d3x3)->Args({8, 64})->Args({32, 32})->Args({64, 16});

void BM_DepthwiseConv(benchmark::State& state) {
  const int64_t c = state.range(0);
  const int64_t s = state.range(1);
  Rng rng(2);
  const Tensor x = random_tensor({1, c, s, s}, rng);
  ConvParams p{random_tensor({c, 1, 3, 3}, rng), Tensor(), 1, 1};
  p.groups = static_cast<int>(c);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, p));
}
BENCHMARK(BM_DepthwiseConv)->Args({48, 64})->Args({192, 16});

void BM_CorForward(benchmark::State& state) {
  const int64_t c = state.range(0);
  const int64_t s = state.range(1);
  Rng rng(3);
  const Tensor t = random_tensor({1, c, s, s}, rng);
  const CoRConfig cfg{4.0F, std::min(c, s * s)};
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(cor_forward(t, cfg));
}
BENCHMARK(BM_CorForward)->Args({8, 16})->Args({8, 32})->Args({24, 16});

void BM_SuppressionMatrix(benchmark::State& state) {
  const int64_t s = state.range(0);
  for (auto _ : state) benchmark::DoNotOptimize(suppression_matrix(s, s, 4.0F));
}
BENCHMARK(BM_SuppressionMatrix)->Arg(16)->Arg(32);

void BM_ModelForward(benchmark::State& state) {
  const int64_t size = state.range(0);
  CMSegNet net(micro(size));
  Rng rng(4);
  const Tensor x = random_tensor({1, 3, size, size}, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x));
}
BENCHMARK(BM_ModelForward)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_ModelTrainStep(benchmark::State& state) {
  const int64_t size = state.range(0);
  CMSegNet net(micro(size));
  Rng rng(5);
  const Tensor x = random_tensor({2, 3, size, size}, rng);
  Tensor gt({2, 1, size, size});
  for (auto& v : gt.mutable_data()) v = rng.uniform() < 0.2 ? 1.0F : 0.0F;
  ForwardContext ctx;
  ctx.mode = Mode::kTrain;
  for (auto _ : state) {
    net.params().zero_grad();
    backward(total_loss(sigmoid(net.logits(x, ctx)), gt));
  }
}
BENCHMARK(BM_ModelTrainStep)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_ArchiveRoundTrip(benchmark::State& state) {
  CMSegNet net(micro(64));
  const WeightArchive archive = net.save();
  for (auto _ : state) benchmark::DoNotOptimize(deserialize(serialize(archive)));
}
BENCHMARK(BM_ArchiveRoundTrip)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
