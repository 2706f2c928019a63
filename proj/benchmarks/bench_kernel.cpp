#include <benchmark/benchmark.h>

#include <random>

#include "wardrisk/kernel.hpp"
#include "wardrisk/likelihood.hpp"

using namespace wardrisk;

namespace {

EpochKernelParams bench_params(int streams, int rank, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  EpochKernelParams p;
  p.mean = Eigen::VectorXd::Zero(streams);
  p.task_factor.resize(streams, rank);
  for (int i = 0; i < streams; ++i)
    for (int c = 0; c < rank; ++c) p.task_factor(i, c) = 0.4 * normal(rng);
  p.task_diag = Eigen::VectorXd::Constant(streams, 0.5);
  p.length_scale = 5.0;
  p.noise = Eigen::VectorXd::Constant(streams, 0.3);
  return p;
}

StandardizedEvents bench_events(int streams, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> times(static_cast<std::size_t>(count));
  for (double& t : times) t = unit(rng) * 24.0;
  std::sort(times.begin(), times.end());
  StandardizedEvents ev;
  for (int i = 0; i < count; ++i)
    ev.append(static_cast<int>(unit(rng) * streams) % streams, times[static_cast<std::size_t>(i)],
              normal(rng));
  return ev;
}

void BM_AssembleCovariance(benchmark::State& state) {
  const int streams = 21;
  const auto n = static_cast<int>(state.range(0));
  const EpochKernelParams p = bench_params(streams, 3, 1);
  const StandardizedEvents ev = bench_events(streams, n, 2);
  std::vector<ObsPoint> obs;
  for (std::size_t i = 0; i < ev.size(); ++i) obs.push_back({ev.stream_ids[i], ev.times[i]});
  const std::vector<int> labels(static_cast<std::size_t>(n), 0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(assemble_covariance(obs, labels, std::span(&p, 1)));
  }
}
BENCHMARK(BM_AssembleCovariance)->Arg(32)->Arg(128)->Arg(512);

void BM_SegmentLogMarginal(benchmark::State& state) {
  const int streams = 21;
  const auto n = static_cast<int>(state.range(0));
  const EpochKernelParams p = bench_params(streams, 3, 3);
  const StandardizedEvents ev = bench_events(streams, n, 4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(segment_log_marginal(segment_view(ev, 0, ev.size()), p));
  }
}
BENCHMARK(BM_SegmentLogMarginal)->Arg(16)->Arg(64)->Arg(256);

void BM_SegmentLogMarginalGrad(benchmark::State& state) {
  const int streams = 21;
  const auto n = static_cast<int>(state.range(0));
  const EpochKernelParams p = bench_params(streams, 3, 5);
  const StandardizedEvents ev = bench_events(streams, n, 6);
  for (auto _ : state) {
    benchmark::DoNotOptimize(segment_log_marginal_grad(segment_view(ev, 0, ev.size()), p));
  }
}
BENCHMARK(BM_SegmentLogMarginalGrad)->Arg(16)->Arg(64)->Arg(128);

}  // namespace
