#include <benchmark/benchmark.h>

#include "wardrisk/simulator.hpp"
#include "wardrisk/trajectory.hpp"

using namespace wardrisk;

namespace {

void BM_TrajectoryLogLikelihood(benchmark::State& state) {
  SimConfig config;
  config.params = make_recovery_model();
  config.seed = 11;
  config.asynchronous_streams = true;
  const auto [record, truth] = sample_patient(config, 0);
  const StandardizedEvents ev = standardize_events(record.events, config.params.standardization);
  const TrajectoryModel& model = config.params.model(truth.v, truth.z);
  for (auto _ : state) {
    benchmark::DoNotOptimize(trajectory_log_likelihood(ev, record.endpoint_time, model));
  }
}
BENCHMARK(BM_TrajectoryLogLikelihood);

void BM_SegmentPosteriors(benchmark::State& state) {
  SimConfig config;
  config.params = make_recovery_model();
  config.seed = 13;
  config.asynchronous_streams = true;
  const auto [record, truth] = sample_patient(config, 1);
  const StandardizedEvents ev = standardize_events(record.events, config.params.standardization);
  const TrajectoryModel& model = config.params.model(truth.v, truth.z);
  for (auto _ : state) {
    benchmark::DoNotOptimize(segment_posteriors(ev, record.endpoint_time, model));
  }
}
BENCHMARK(BM_SegmentPosteriors);

void BM_PaperScaleTrajectory(benchmark::State& state) {
  SimConfig config;
  config.params = make_paper_scale_model();
  config.seed = 17;
  const auto [record, truth] = sample_patient(config, 2);
  const StandardizedEvents ev = standardize_events(record.events, config.params.standardization);
  const TrajectoryModel& model = config.params.model(truth.v, truth.z);
  for (auto _ : state) {
    benchmark::DoNotOptimize(trajectory_log_likelihood(ev, record.endpoint_time, model));
  }
}
BENCHMARK(BM_PaperScaleTrajectory);

}  // namespace
