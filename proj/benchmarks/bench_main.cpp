#include "cgdetr/evalkit.hpp"
#include "cgdetr/heads.hpp"
#include "cgdetr/train.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace cgdetr;

namespace {

const data::DatasetSplit& dataset() {
  static const data::DatasetSplit ds = data::generate_synthetic(data::SynthSpec{});
  return ds;
}

void BM_Forward(benchmark::State& state) {
  RunConfig cfg = synthetic_preset();
  apply_ablation_row(cfg.model, static_cast<char>(state.range(0)));
  const Model model(cfg.model, 1);
  const auto& rec = dataset().train.front();
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(rec.features).scores.value());
}
BENCHMARK(BM_Forward)->Arg('a')->Arg('g')->Unit(benchmark::kMicrosecond);

void BM_BatchLossBackward(benchmark::State& state) {
  const RunConfig cfg = synthetic_preset();
  Model model(cfg.model, 1);
  std::vector<const data::DatasetRecord*> batch;
  for (int i = 0; i < cfg.train.batch_size; ++i) batch.push_back(&dataset().train[static_cast<std::size_t>(i)]);
  std::mt19937_64 dropout(1);
  std::mt19937_64 pairs(2);
  for (auto _ : state) {
    BatchLoss loss = batch_loss(model, batch, cfg.loss, StepOptions{&dropout, &pairs, nullptr});
    model.parameters().zero_grad();
    loss.total.backward();
  }
}
BENCHMARK(BM_BatchLossBackward)->Unit(benchmark::kMillisecond);

void BM_Hungarian(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ad::Matrix cost(n, 2 * n);
  for (Eigen::Index i = 0; i < cost.size(); ++i) cost.data()[i] = u(rng);
  for (auto _ : state) benchmark::DoNotOptimize(heads::hungarian(cost));
}
BENCHMARK(BM_Hungarian)->Arg(4)->Arg(16)->Arg(64);

void BM_Evaluate(benchmark::State& state) {
  RunConfig cfg = synthetic_preset();
  const Model model(cfg.model, 1);
  const auto& eval = dataset().eval;
  const auto preds = predict_all(model, eval);
  std::vector<GroundTruth> gts;
  for (const auto& r : eval) gts.push_back(r.gt);
  for (auto _ : state) benchmark::DoNotOptimize(evalkit::evaluate(preds, gts).map_avg);
}
BENCHMARK(BM_Evaluate)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
