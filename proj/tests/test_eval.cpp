#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "wardrisk/errors.hpp"
#include "wardrisk/eval.hpp"
#include "wardrisk/simulator.hpp"
#include "oracles.hpp"

using namespace wardrisk;

namespace {

ScoreTrace trace_of(const std::string& id, int label, double endpoint,
                    std::vector<std::pair<double, double>> pts) {
  ScoreTrace t{id, label, endpoint, {}};
  for (const auto& [time, risk] : pts) t.points.push_back({time, risk});
  return t;
}

// Six crafted patients with hand-checked confusion counts at threshold 0.5:
// alarms fire for a(0.9), b(0.6), d(0.8) -> TP=2, FP=1, FN=1.
std::vector<ScoreTrace> crafted_six() {
  return {
      trace_of("a", 1, 10.0, {{0.0, 0.09}, {2.0, 0.9}}),
      trace_of("b", 1, 12.0, {{0.0, 0.09}, {3.0, 0.2}, {5.0, 0.6}}),
      trace_of("c", 1, 14.0, {{0.0, 0.09}, {4.0, 0.2}}),
      trace_of("d", 0, 9.0, {{0.0, 0.09}, {1.0, 0.8}}),
      trace_of("e", 0, 11.0, {{0.0, 0.09}, {2.0, 0.3}}),
      trace_of("f", 0, 13.0, {{0.0, 0.09}, {3.0, 0.1}}),
  };
}

}  // namespace

TEST_CASE("apply_threshold confusion counts") {
  const auto traces = crafted_six();
  SUBCASE("threshold zero alarms everyone at admission") {
    const ThresholdMetrics m = apply_threshold(traces, 0.0);
    CHECK(m.tpr == 1.0);
    REQUIRE(m.ppv.has_value());
    CHECK(*m.ppv == doctest::Approx(0.5));  // prevalence of the crafted set
    for (const AlarmOutcome& o : m.outcomes) {
      CHECK(o.alarmed);
      CHECK(*o.first_alarm_time == 0.0);
    }
  }
  SUBCASE("threshold above one never alarms") {
    const ThresholdMetrics m = apply_threshold(traces, 1.000001);
    CHECK(m.tpr == 0.0);
    CHECK(!m.ppv.has_value());
  }
  SUBCASE("hand-checked counts at 0.5") {
    const ThresholdMetrics m = apply_threshold(traces, 0.5);
    CHECK(m.tpr == doctest::Approx(2.0 / 3.0));
    REQUIRE(m.ppv.has_value());
    CHECK(*m.ppv == doctest::Approx(2.0 / 3.0));
  }
  SUBCASE("first alarm is the first upcrossing") {
    const ThresholdMetrics m = apply_threshold(traces, 0.55);
    for (const AlarmOutcome& o : m.outcomes) {
      if (o.patient_id == "b") {
        REQUIRE(o.alarmed);
        CHECK(*o.first_alarm_time == 5.0);
        CHECK(*o.first_alarm_time <= o.endpoint_time);
      }
    }
  }
}

TEST_CASE("roc curve") {
  SUBCASE("perfect separation gives AUC 1") {
    std::vector<ScoreTrace> traces;
    for (int i = 0; i < 10; ++i) {
      const int label = i < 3 ? 1 : 0;
      const double risk = label == 1 ? 0.8 + 0.01 * i : 0.2 + 0.01 * i;
      traces.push_back(trace_of("p" + std::to_string(i), label, 10.0, {{0.0, 0.05}, {1.0, risk}}));
    }
    const MetricCurve c = roc_curve(traces, default_threshold_grid());
    CHECK(c.auc == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("label-independent scores concentrate near prevalence") {
    std::mt19937_64 rng(61);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<ScoreTrace> traces;
    const double prevalence = 0.2;
    for (int i = 0; i < 4000; ++i) {
      const int label = unit(rng) < prevalence ? 1 : 0;
      traces.push_back(trace_of("p" + std::to_string(i), label, 5.0, {{0.0, 0.05}, {1.0, unit(rng)}}));
    }
    const MetricCurve c = roc_curve(traces, default_threshold_grid());
    CHECK(std::abs(c.auc - prevalence) < 0.05);
  }
  SUBCASE("grid must cover the unit interval") {
    const std::vector<double> bad = {0.2, 0.5};
    CHECK_THROWS_AS(roc_curve(crafted_six(), bad), ConfigError);
  }
}

TEST_CASE("timeliness curve") {
  SUBCASE("alarm at admission leads by the median endpoint") {
    // Two positives alarming at t=0; the +-1-patient band around TPR 0.5
    // includes the TPR=1 threshold, whose lead is the median endpoint.
    std::vector<ScoreTrace> traces = {
        trace_of("v1_a", 1, 10.0, {{0.0, 0.9}}),
        trace_of("v1_b", 1, 13.0, {{0.0, 0.85}}),
    };
    for (int i = 0; i < 6; ++i)
      traces.push_back(trace_of("v0_" + std::to_string(i), 0, 8.0, {{0.0, 0.1}}));
    const MetricCurve c = timeliness_curve(traces, 0.5, adaptive_threshold_grid(traces));
    REQUIRE(!c.points.empty());
    bool found_full_tpr = false;
    for (const CurvePoint& p : c.points) {
      if (p.tpr == 1.0) {
        found_full_tpr = true;
        CHECK(*p.lead_hours == doctest::Approx(11.5));  // median of 10, 13
      }
    }
    CHECK(found_full_tpr);
  }
  SUBCASE("alarm exactly at the endpoint has zero lead") {
    std::vector<ScoreTrace> traces = {
        trace_of("v1", 1, 10.0, {{0.0, 0.05}, {10.0, 0.95}}),
        trace_of("v1b", 1, 12.0, {{0.0, 0.05}, {12.0, 0.94}}),
        trace_of("v0", 0, 10.0, {{0.0, 0.05}}),
    };
    const MetricCurve c = timeliness_curve(traces, 0.5, adaptive_threshold_grid(traces));
    bool checked = false;
    for (const CurvePoint& p : c.points) {
      if (p.threshold > 0.1 && p.lead_hours) {  // only the endpoint spikes alarm here
        CHECK(*p.lead_hours == doctest::Approx(0.0));
        checked = true;
      }
    }
    CHECK(checked);
  }
  SUBCASE("unreachable target errors") {
    std::vector<ScoreTrace> traces = {trace_of("v0", 0, 10.0, {{0.0, 0.05}})};
    CHECK_THROWS_AS(timeliness_curve(traces, 0.5, default_threshold_grid()), DataError);
  }
}

TEST_CASE("dual-threshold policy") {
  SUBCASE("lower = 0 reproduces the roc curve point-for-point") {
    std::mt19937_64 rng(67);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<ScoreTrace> traces;
    for (int i = 0; i < 300; ++i) {
      std::vector<std::pair<double, double>> pts = {{0.0, 0.09}};
      for (int j = 1; j <= 5; ++j) pts.push_back({static_cast<double>(j), unit(rng)});
      traces.push_back(trace_of("p" + std::to_string(i), unit(rng) < 0.2 ? 1 : 0, 6.0, pts));
    }
    const std::vector<double> grid = default_threshold_grid();
    const MetricCurve roc = roc_curve(traces, grid);
    const MetricCurve dual = dual_threshold_eval(traces, 0.0, grid);
    REQUIRE(roc.points.size() == dual.points.size());
    for (std::size_t i = 0; i < roc.points.size(); ++i) {
      CHECK(roc.points[i].threshold == dual.points[i].threshold);
      CHECK(roc.points[i].tpr == dual.points[i].tpr);
      CHECK(roc.points[i].ppv == dual.points[i].ppv);
    }
    CHECK(roc.auc == dual.auc);
  }
  SUBCASE("lower at or above the upper grid is a precondition violation") {
    const std::vector<double> uppers = {0.3, 0.5};
    CHECK_THROWS_AS(dual_threshold_eval(crafted_six(), 0.3, uppers), ConfigError);
    CHECK_THROWS_AS(dual_threshold_eval(crafted_six(), 0.4, uppers), ConfigError);
  }
  SUBCASE("early discharge forfeits a later alarm") {
    const std::vector<ScoreTrace> traces = {
        trace_of("x", 1, 10.0, {{0.0, 0.09}, {1.0, 0.04}, {2.0, 0.7}}),
        trace_of("y", 1, 10.0, {{0.0, 0.09}, {1.0, 0.2}, {2.0, 0.8}}),
    };
    const std::vector<double> uppers = {0.6};
    const MetricCurve with_discharge = dual_threshold_eval(traces, 0.05, uppers);
    CHECK(with_discharge.points[0].tpr == doctest::Approx(0.5));  // x discharged at t=1
    const MetricCurve no_discharge = dual_threshold_eval(traces, 0.0, uppers);
    CHECK(no_discharge.points[0].tpr == doctest::Approx(1.0));
  }
  SUBCASE("the admission prior never discharges") {
    // prior 0.09 < lower 0.2, but the first event's score exceeds the upper.
    const std::vector<ScoreTrace> traces = {
        trace_of("x", 1, 10.0, {{0.0, 0.09}, {1.0, 0.75}}),
        trace_of("y", 0, 10.0, {{0.0, 0.09}, {1.0, 0.1}}),
    };
    const std::vector<double> uppers = {0.5};
    const MetricCurve c = dual_threshold_eval(traces, 0.2, uppers);
    CHECK(c.points[0].tpr == doctest::Approx(1.0));
  }
}

TEST_CASE("snapshot baseline") {
  ModelParams params = make_recovery_model();
  params.phenotype_count = 1;
  params.models.resize(1);
  params.epoch_count = 1;
  params.gating.w = Eigen::MatrixXd::Zero(1, params.encoding.encoder().dim());
  for (int v = 0; v < 2; ++v) {
    TrajectoryModel& m = params.models[0][static_cast<std::size_t>(v)];
    m.epochs.resize(1);
    m.epochs[0].mean = Eigen::Vector3d(v * 1.2, 0.0, 0.0);
    m.durations.r = Eigen::VectorXd::Constant(1, 3.0);
    m.durations.p = Eigen::VectorXd::Constant(1, 0.2);
    m.durations.t_max = 100;
    m.initial.pi = Eigen::VectorXd::Ones(1);
  }
  params.validate();

  PatientRecord r;
  r.id = "snap";
  r.profile = {60.0, "female", "medical", false, "infectious", "direct_admission"};
  r.outcome = Outcome::Icu;
  r.endpoint_time = 20.0;
  r.events = {{0, 2.0, 92.0}};

  SUBCASE("single event equals the closed-form two-Gaussian posterior") {
    const ScoreTrace trace = snapshot_baseline(params, r);
    REQUIRE(trace.points.size() == 2);
    CHECK(trace.points[0].risk == doctest::Approx(params.prior_icu));
    const EpochKernelParams& e0 = params.model(0, 0).epochs[0];
    const EpochKernelParams& e1 = params.model(1, 0).epochs[0];
    const double x = params.standardization.standardize(0, 92.0);
    auto gauss = [&](const EpochKernelParams& e) {
      const double var = e.task_cov()(0, 0) + e.noise[0];
      return std::exp(-0.5 * (x - e.mean[0]) * (x - e.mean[0]) / var) / std::sqrt(2.0 * M_PI * var);
    };
    const double p1 = params.prior_icu;
    const double want = p1 * gauss(e1) / (p1 * gauss(e1) + (1.0 - p1) * gauss(e0));
    CHECK(trace.points[1].risk == doctest::Approx(want).epsilon(1e-9));
  }
  SUBCASE("single event matches the full K=1 model when duration laws agree") {
    // Same durations under both hypotheses cancel in the posterior, so the
    // full sequential score and the memoryless one coincide on one event.
    const ScoreTrace snap = snapshot_baseline(params, r);
    const std::vector<ScorePoint> full = score_trajectory(params, r);
    CHECK(snap.points[1].risk == doctest::Approx(full[1].risk).epsilon(1e-9));
  }
}

TEST_CASE("stationary baseline demands a degenerate model") {
  const ModelParams params = make_recovery_model();  // G=2, K=3
  PatientRecord r;
  r.id = "x";
  r.profile = {60.0, "female", "medical", false, "infectious", "direct_admission"};
  r.endpoint_time = 5.0;
  CHECK_THROWS_AS(stationary_baseline(params, r), DataError);
}

TEST_CASE("curve files") {
  const auto traces = crafted_six();
  const MetricCurve c = roc_curve(traces, default_threshold_grid());
  write_curve_csv(c, "/tmp/wardrisk_test_curve.csv");
  std::ifstream csv("/tmp/wardrisk_test_curve.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "threshold,tpr,ppv");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == static_cast<int>(c.points.size()));

  write_curve_svg(c, "demo", "/tmp/wardrisk_test_curve.svg");
  std::ifstream svg("/tmp/wardrisk_test_curve.svg");
  std::string all((std::istreambuf_iterator<char>(svg)), std::istreambuf_iterator<char>());
  CHECK(all.find("<svg") != std::string::npos);
  CHECK(all.find("polyline") != std::string::npos);
}

TEST_CASE("benchmark report assembles rows for every scorer") {
  std::mt19937_64 rng(71);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<ScoreTrace>> sets(2);
  for (int s = 0; s < 2; ++s) {
    for (int i = 0; i < 200; ++i) {
      const int label = i % 10 == 0 ? 1 : 0;
      std::vector<std::pair<double, double>> pts = {{0.0, 0.09}};
      const double lift = label == 1 ? (s == 0 ? 0.5 : 0.08) : 0.0;
      for (int j = 1; j <= 4; ++j) pts.push_back({static_cast<double>(j), unit(rng) * 0.4 + lift});
      sets[s].push_back(trace_of("p" + std::to_string(i), label, 5.0, pts));
    }
  }
  const BenchmarkReport report = benchmark_from_traces(sets, {"one", "two"}, 0.5);
  CHECK(report.scorers.size() == 2);
  CHECK(report.auc_icu.size() == 2);
  CHECK(report.auc_discharge_001.size() == 2);
  CHECK(report.auc_discharge_005.size() == 2);
  CHECK(report.auc_discharge_02.size() == 2);
  CHECK(report.lead_hours_at_target_tpr.size() == 2);
  CHECK(report.auc_icu[0] > report.auc_icu[1]);
  const std::string json_text = benchmark_report_json(report);
  CHECK(json_text.find("auc_discharge_0.05") != std::string::npos);
  CHECK(json_text.find("median_lead_hours") != std::string::npos);
}
