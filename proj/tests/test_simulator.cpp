#include <doctest.h>

#include <chrono>
#include <cmath>

#include "wardrisk/cohort.hpp"
#include "wardrisk/simulator.hpp"
#include "oracles.hpp"

using namespace wardrisk;

TEST_CASE("identical seeds give byte-identical cohorts under any thread count") {
  SimConfig config;
  config.params = make_recovery_model();
  config.n = 50;
  config.seed = 7;
  config.asynchronous_streams = true;
  config.threads = 1;
  const SimResult a = sample_cohort(config);
  config.threads = 8;
  const SimResult b = sample_cohort(config);
  CHECK(serialize_cohort_string(a.cohort) == serialize_cohort_string(b.cohort));
  REQUIRE(a.truth.size() == b.truth.size());
  for (std::size_t i = 0; i < a.truth.size(); ++i) {
    CHECK(a.truth[i].z == b.truth[i].z);
    CHECK(a.truth[i].boundaries == b.truth[i].boundaries);
  }
  config.seed = 8;
  const SimResult c = sample_cohort(config);
  CHECK(serialize_cohort_string(a.cohort) != serialize_cohort_string(c.cohort));
}

TEST_CASE("initial distribution concentrated on the last epoch yields one epoch") {
  ModelParams params = make_recovery_model();
  for (auto& pair : params.models)
    for (auto& m : pair) m.initial.pi = Eigen::Vector3d(0.0, 0.0, 1.0);
  SimConfig config;
  config.params = params;
  config.n = 40;
  config.seed = 3;
  const SimResult result = sample_cohort(config);
  for (const PatientTruth& t : result.truth) {
    CHECK(t.start_epoch == 2);
    CHECK(t.boundaries.size() == 1);
  }
}

TEST_CASE("prior one labels every record ICU") {
  ModelParams params = make_recovery_model();
  params.prior_icu = 1.0;  // sample_patient does not re-validate
  SimConfig config;
  config.params = params;
  config.seed = 5;
  for (std::uint64_t i = 0; i < 25; ++i) {
    const auto [record, truth] = sample_patient(config, i);
    CHECK(truth.v == 1);
    CHECK(record.outcome == Outcome::Icu);
  }
}

TEST_CASE("empirical ICU fraction concentrates at the prior") {
  SimConfig config;
  config.params = make_benchmark_model();  // prior 0.09
  config.seed = 11;
  int icu = 0;
  const int n = 10000;
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto [record, truth] = sample_patient(config, i);
    icu += truth.v;
  }
  const double fraction = static_cast<double>(icu) / n;
  CHECK(std::abs(fraction - 0.09) <= 0.01);
}

TEST_CASE("per-epoch sample means match the model within Monte Carlo error") {
  SimConfig config;
  config.params = make_recovery_model();
  config.n = 2000;
  config.seed = 13;
  config.asynchronous_streams = true;
  const SimResult result = sample_cohort(config);
  const ModelParams& truth_params = config.params;

  // Accumulate standardized values per (v, z, epoch) for stream 0 using the
  // truth segmentation.
  double sum[2][2][3] = {};
  double count[2][2][3] = {};
  for (std::size_t i = 0; i < result.truth.size(); ++i) {
    const PatientTruth& t = result.truth[i];
    const PatientRecord& r = result.cohort.patients[i];
    for (const MeasurementEvent& e : r.events) {
      if (e.stream_id != 0) continue;
      int epoch = t.start_epoch;
      for (int b : t.boundaries) {
        if (e.time < b) break;
        ++epoch;
      }
      if (epoch >= 3) continue;  // event exactly at the endpoint hour
      const double z = truth_params.standardization.standardize(0, e.value);
      sum[t.v][t.z][epoch] += z;
      count[t.v][t.z][epoch] += 1.0;
    }
  }
  for (int v = 0; v < 2; ++v) {
    for (int z = 0; z < 2; ++z) {
      for (int k = 0; k < 3; ++k) {
        if (count[v][z][k] < 50) continue;
        const EpochKernelParams& e = truth_params.model(v, z).epochs[static_cast<std::size_t>(k)];
        const double marginal_sd = std::sqrt(e.task_cov()(0, 0) + e.noise[0]);
        const double se = marginal_sd / std::sqrt(count[v][z][k]);
        const double mean = sum[v][z][k] / count[v][z][k];
        CHECK(std::abs(mean - e.mean[0]) <= 3.5 * se);
      }
    }
  }
}

TEST_CASE("sampled covariance matches the assembled kernel") {
  // Deterministic panel times and a single forced epoch: the empirical
  // covariance across replicates must match assemble_covariance entrywise.
  ModelParams params = make_recovery_model();
  params.prior_icu = 1e-12;  // v=0 almost surely
  for (auto& pair : params.models)
    for (auto& m : pair) {
      m.initial.pi = Eigen::Vector3d(1.0, 0.0, 0.0);
      m.durations.r = Eigen::VectorXd::Constant(3, 50.0);  // long first epoch
      m.durations.p = Eigen::VectorXd::Constant(3, 0.7);
    }
  params.gating.w.row(1).array() = -100.0;  // phenotype 0 almost surely
  SimConfig config;
  config.params = params;
  config.seed = 17;
  config.gap_min = 2.0;
  config.gap_max = 2.0;  // times exactly 2, 4, 6, ...

  const int replicates = 10000;
  std::vector<Eigen::VectorXd> draws;
  std::vector<ObsPoint> obs_pattern;
  for (std::uint64_t i = 0; i < replicates; ++i) {
    const auto [record, truth] = sample_patient(config, i);
    if (truth.boundaries[0] < 9 || truth.v != 0 || truth.z != 0) continue;
    // First four panel draws live in epoch 0 at times 2,4,6,8.
    Eigen::VectorXd v(12);
    std::vector<ObsPoint> obs;
    for (int j = 0; j < 12; ++j) {
      const MeasurementEvent& e = record.events[static_cast<std::size_t>(j)];
      v[j] = params.standardization.standardize(e.stream_id, e.value);
      obs.push_back({e.stream_id, e.time});
    }
    draws.push_back(v);
    obs_pattern = obs;
  }
  REQUIRE(draws.size() > 5000);
  const auto n = static_cast<double>(draws.size());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(12);
  for (const auto& v : draws) mean += v;
  mean /= n;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(12, 12);
  for (const auto& v : draws) cov += (v - mean) * (v - mean).transpose();
  cov /= (n - 1.0);

  const std::vector<int> labels(12, 0);
  const Eigen::MatrixXd expected =
      assemble_covariance(obs_pattern, labels, std::span(&params.model(0, 0).epochs[0], 1));
  for (int a = 0; a < 12; ++a) {
    for (int b = 0; b < 12; ++b) {
      const double se = std::sqrt((expected(a, a) * expected(b, b) + expected(a, b) * expected(a, b)) / n);
      CHECK(std::abs(cov(a, b) - expected(a, b)) <= 4.0 * se);
    }
  }
}

TEST_CASE("duration histogram passes a chi-square fit test") {
  DurationParams d;
  d.r = Eigen::VectorXd::Constant(1, 3.5);
  d.p = Eigen::VectorXd::Constant(1, 0.35);
  d.t_max = 80;
  const DurationTable table = DurationTable::build(d);
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int draws = 100000;
  std::vector<double> observed(static_cast<std::size_t>(d.t_max) + 1, 0.0);
  for (int i = 0; i < draws; ++i) observed[static_cast<std::size_t>(sample_duration(unit(rng), 0, table))] += 1.0;

  // Collapse the tail so every bin expects at least five draws.
  double statistic = 0.0;
  double obs_tail = 0.0, exp_tail = 0.0;
  int dof = -1;
  for (int t = 1; t <= d.t_max; ++t) {
    const double expected = draws * std::exp(table.log_pmf(0, t));
    if (expected < 5.0) {
      obs_tail += observed[static_cast<std::size_t>(t)];
      exp_tail += expected;
      continue;
    }
    statistic += (observed[static_cast<std::size_t>(t)] - expected) *
                 (observed[static_cast<std::size_t>(t)] - expected) / expected;
    ++dof;
  }
  if (exp_tail > 0.0) {
    statistic += (obs_tail - exp_tail) * (obs_tail - exp_tail) / exp_tail;
    ++dof;
  }
  CHECK(oracles::chi_square_p_value(statistic, dof) > 0.01);
}

TEST_CASE("cross-epoch residual correlation is statistically zero") {
  SimConfig config;
  config.params = make_recovery_model();
  config.n = 4000;
  config.seed = 23;
  const SimResult result = sample_cohort(config);
  const ModelParams& params = config.params;
  // Residual of the last stream-0 value in epoch k vs the first in epoch k+1.
  std::vector<double> left, right;
  for (std::size_t i = 0; i < result.truth.size(); ++i) {
    const PatientTruth& t = result.truth[i];
    if (t.boundaries.size() < 2) continue;
    const PatientRecord& r = result.cohort.patients[i];
    const double boundary = t.boundaries[0];
    const MeasurementEvent* before = nullptr;
    const MeasurementEvent* after = nullptr;
    for (const MeasurementEvent& e : r.events) {
      if (e.stream_id != 0) continue;
      if (e.time < boundary) before = &e;
      if (e.time >= boundary && e.time < t.boundaries[1] && !after) after = &e;
    }
    if (!before || !after) continue;
    const auto& m = params.model(t.v, t.z);
    left.push_back(params.standardization.standardize(0, before->value) -
                   m.epochs[static_cast<std::size_t>(t.start_epoch)].mean[0]);
    right.push_back(params.standardization.standardize(0, after->value) -
                    m.epochs[static_cast<std::size_t>(t.start_epoch + 1)].mean[0]);
  }
  REQUIRE(left.size() > 400);
  const auto n = static_cast<double>(left.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < left.size(); ++i) {
    mx += left[i];
    my += right[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < left.size(); ++i) {
    sxy += (left[i] - mx) * (right[i] - my);
    sxx += (left[i] - mx) * (left[i] - mx);
    syy += (right[i] - my) * (right[i] - my);
  }
  const double r = sxy / std::sqrt(sxx * syy);
  CHECK(std::abs(r) < 4.0 / std::sqrt(n));
}

TEST_CASE("truth sidecar roundtrips") {
  SimConfig config;
  config.params = make_recovery_model();
  config.n = 25;
  config.seed = 29;
  const SimResult result = sample_cohort(config);
  const std::string path = "/tmp/wardrisk_test_truth.csv";
  write_truth_csv(result.truth, path);
  const std::vector<PatientTruth> loaded = read_truth_csv(path);
  REQUIRE(loaded.size() == result.truth.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].id == result.truth[i].id);
    CHECK(loaded[i].z == result.truth[i].z);
    CHECK(loaded[i].v == result.truth[i].v);
    CHECK(loaded[i].start_epoch == result.truth[i].start_epoch);
    CHECK(loaded[i].boundaries == result.truth[i].boundaries);
  }
}

TEST_CASE("paper-scale simulation of the full cohort finishes promptly") {
  SimConfig config;
  config.params = make_paper_scale_model();
  config.n = 6094;
  config.seed = 31;
  const auto start = std::chrono::steady_clock::now();
  const SimResult result = sample_cohort(config);
  const auto elapsed =
      std::chrono::duration_cast<std::chrono::seconds>(std::chrono::steady_clock::now() - start);
  CHECK(result.cohort.patients.size() == 6094);
  validate_cohort(result.cohort);
  CHECK(elapsed.count() < 300);
  std::size_t events = 0;
  for (const auto& p : result.cohort.patients) events += p.events.size();
  CHECK(events > 100000);  // 21 streams at 1-4 h intervals over multi-day stays
}
