#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wardrisk/cohort.hpp"
#include "wardrisk/mixture.hpp"
#include "wardrisk/scoring.hpp"

namespace wardrisk {

struct ScoreTrace {
  std::string patient_id;
  int label = 0;  // 1 = ICU
  double endpoint_time = 0.0;
  std::vector<ScorePoint> points;  // starts with the (0, prior) admission point
};

struct AlarmOutcome {
  std::string patient_id;
  int label = 0;
  bool alarmed = false;
  std::optional<double> first_alarm_time;
  double endpoint_time = 0.0;
};

struct ThresholdMetrics {
  double tpr = 0.0;
  std::optional<double> ppv;  // absent when no alarms fire
  std::vector<AlarmOutcome> outcomes;
};

// Alarm = first time the score reaches the threshold (alarms latch; TPR/PPV
// are per patient, not per reading).
ThresholdMetrics apply_threshold(std::span<const ScoreTrace> traces, double threshold);

struct CurvePoint {
  double threshold = 0.0;
  double tpr = 0.0;
  std::optional<double> ppv;
  std::optional<double> lead_hours;  // timeliness curves only
};

struct MetricCurve {
  std::vector<CurvePoint> points;  // thresholds strictly increasing
  double auc = 0.0;                // area under (TPR, PPV), trapezoid
};

std::vector<double> default_threshold_grid();
// Default grid augmented with every patient's max score, so every achievable
// confusion count is hit exactly.
std::vector<double> adaptive_threshold_grid(std::span<const ScoreTrace> traces);

// TPR-vs-PPV sweep (precision-recall axes, mirroring the headline ROC).
MetricCurve roc_curve(std::span<const ScoreTrace> traces, std::span<const double> grid);

// Thresholds holding TPR within +-1 patient of the target; lead time is the
// median over true positives of endpoint_time - first alarm time.
MetricCurve timeliness_curve(std::span<const ScoreTrace> traces, double target_tpr,
                             std::span<const double> grid);

// Dual-threshold discharge/ICU policy: a patient is discharged at the first
// event-driven score below `lower` and ICU-alarmed at the first score at or
// above the upper threshold; the first crossing wins. The admission prior
// point can trigger alarms but never discharges, so lower = 0 reproduces
// roc_curve exactly.
MetricCurve dual_threshold_eval(std::span<const ScoreTrace> traces, double lower,
                                std::span<const double> upper_grid);

std::vector<ScoreTrace> score_cohort(const ModelParams& params, const Cohort& cohort,
                                     unsigned threads = 0);

// Memoryless ablation: at each event, a Bayes posterior from only the latest
// value per stream, every reading scored independently under the first
// epoch's marginals. Expects stationary (K=1) params.
ScoreTrace snapshot_baseline(const ModelParams& params, const PatientRecord& record);
std::vector<ScoreTrace> snapshot_cohort(const ModelParams& params, const Cohort& cohort,
                                        unsigned threads = 0);

// One-size-fits-all ablation: full sequential scoring under G=1, K=1 params.
ScoreTrace stationary_baseline(const ModelParams& g1k1_params, const PatientRecord& record);

void write_scores_csv(std::span<const ScoreTrace> traces, const std::string& path);
std::vector<ScoreTrace> read_scores_csv(const std::string& path);
void write_curve_csv(const MetricCurve& curve, const std::string& path);
void write_curve_svg(const MetricCurve& curve, const std::string& title, const std::string& path);

struct BenchmarkConfig {
  int phenotypes = 2;
  int epochs = 3;
  EMConfig em;
  double target_tpr = 0.5;
  unsigned threads = 0;
};

// Table-2-shaped comparison: rows are the AUC metrics, columns the scorers.
struct BenchmarkReport {
  std::vector<std::string> scorers;  // full, stationary, snapshot
  std::vector<double> auc_icu;
  std::vector<double> auc_discharge_001;
  std::vector<double> auc_discharge_005;
  std::vector<double> auc_discharge_02;
  std::vector<double> lead_hours_at_target_tpr;  // at matched PPV
  double matched_ppv = 0.0;
};

BenchmarkReport run_benchmark(const Cohort& train, const Cohort& test, const BenchmarkConfig& config);

// Assembles the report from already-computed trace sets (one per scorer).
BenchmarkReport benchmark_from_traces(const std::vector<std::vector<ScoreTrace>>& traces,
                                      std::vector<std::string> scorers, double target_tpr);

std::string benchmark_report_json(const BenchmarkReport& report);

}  // namespace wardrisk
