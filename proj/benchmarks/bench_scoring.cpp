#include <benchmark/benchmark.h>

#include "wardrisk/scoring.hpp"
#include "wardrisk/simulator.hpp"

using namespace wardrisk;

namespace {

void BM_ScoreTrajectory(benchmark::State& state) {
  SimConfig config;
  config.params = make_benchmark_model();
  config.seed = 23;
  config.asynchronous_streams = true;
  const auto [record, truth] = sample_patient(config, 0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(score_trajectory(config.params, record));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(record.events.size()));
}
BENCHMARK(BM_ScoreTrajectory);

void BM_StreamingObserve(benchmark::State& state) {
  SimConfig config;
  config.params = make_benchmark_model();
  config.seed = 29;
  config.asynchronous_streams = true;
  const auto [record, truth] = sample_patient(config, 1);
  for (auto _ : state) {
    ScoringSession session(config.params, record.profile);
    double last = 0.0;
    for (const MeasurementEvent& e : record.events) last = session.observe(e);
    benchmark::DoNotOptimize(last);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(record.events.size()));
}
BENCHMARK(BM_StreamingObserve);

}  // namespace
