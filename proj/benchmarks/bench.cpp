#include <benchmark/benchmark.h>

#include "id2face/idvae.hpp"
#include "id2face/metrics.hpp"
#include "id2face/pipeline.hpp"

using namespace id2face;

namespace {

pipeline::Models& default_models() {
  static auto models = pipeline::Models::create({}, {}, 0);
  return models;
}

const pipeline::Dataset& corpus() {
  static const pipeline::Dataset data(perception::generate_corpus({20, 8, 32, 7}));
  return data;
}

void BM_DenoiserForward(benchmark::State& state) {
  auto& m = default_models();
  auto gen = make_generator(1);
  const auto batch = pipeline::make_batch(corpus(), state.range(0), gen);
  m.eval();
  torch::NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(pipeline::compute_losses(batch, m, {}, 3).denoiser.eps_hat);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DenoiserForward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  auto models = pipeline::Models::create({}, {}, 1);
  pipeline::TrainConfig cfg;
  cfg.batch = state.range(0);
  pipeline::Trainer trainer(models, cfg);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step(corpus()).total);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TrainStep)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_OrthogonalProject(benchmark::State& state) {
  auto gen = make_generator(2);
  const auto r = torch::randn({state.range(0)}, gen, torch::kFloat64);
  const auto v = torch::randn({state.range(0)}, gen, torch::kFloat64);
  for (auto _ : state) benchmark::DoNotOptimize(idvae::orthogonal_project(r, v).u);
}
BENCHMARK(BM_OrthogonalProject)->Arg(32)->Arg(512);

void BM_Anonymize(benchmark::State& state) {
  auto& m = default_models();
  const auto x = corpus().images().slice(0, 0, 4);
  pipeline::GenerateOptions opts;
  opts.steps = state.range(0);
  for (auto _ : state) benchmark::DoNotOptimize(pipeline::anonymize(m, x, {1, 2, 3, 4}, opts).x_hat);
}
BENCHMARK(BM_Anonymize)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_Retrieval(benchmark::State& state) {
  auto gen = make_generator(3);
  const auto n = state.range(0);
  const auto q = torch::randn({n, 64}, gen);
  const auto g = torch::randn({n, 64}, gen);
  std::vector<int64_t> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = i % 20;
  for (auto _ : state) benchmark::DoNotOptimize(metrics::retrieval_eval(q, labels, g, labels).map);
}
BENCHMARK(BM_Retrieval)->Arg(40)->Arg(1000)->Unit(benchmark::kMillisecond);

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
