#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "wardrisk/kernel.hpp"
#include "wardrisk/likelihood.hpp"

namespace wardrisk {

// Truncated negative-binomial epoch durations on {1, ..., t_max} hours,
// renormalized; one (dispersion r, success p) pair per epoch.
struct DurationParams {
  Eigen::VectorXd r;  // K, > 0
  Eigen::VectorXd p;  // K, in (0,1)
  int t_max = 168;

  int epoch_count() const { return static_cast<int>(r.size()); }
  void validate() const;
};

// Precomputed log pmf / log survival tables over the truncated support.
struct DurationTable {
  Eigen::MatrixXd log_pmf;   // K x (t_max+1); column 0 unused
  Eigen::MatrixXd log_surv;  // log P(T >= t)
  int t_max = 0;

  static DurationTable build(const DurationParams& params);
};

double duration_log_pmf(int duration, int epoch, const DurationParams& params);
double duration_log_survival(int elapsed, int epoch, const DurationParams& params);

// Inverse-CDF sample from the truncated pmf given a uniform draw in [0,1).
int sample_duration(double uniform, int epoch, const DurationTable& table);

struct InitialEpochDist {
  Eigen::VectorXd pi;  // K, simplex

  void validate() const;
};

// One clinical-status/phenotype trajectory law: K epochs of GP
// hyper-parameters, duration law per epoch, initial-epoch distribution.
// Epochs progress monotonically from the start epoch to the last.
struct TrajectoryModel {
  std::vector<EpochKernelParams> epochs;
  DurationParams durations;
  InitialEpochDist initial;

  int epoch_count() const { return static_cast<int>(epochs.size()); }
  void validate() const;
};

// Epoch-boundary hypothesis: the start epoch plus the integer end hours of
// each completed epoch; the following epoch is in progress at the horizon.
struct Segmentation {
  int start_epoch = 0;              // 0-based
  std::vector<int> boundaries;      // strictly increasing, >= 1

  int in_progress_epoch() const { return start_epoch + static_cast<int>(boundaries.size()); }
};

// Exhaustive list of segmentations for a horizon; an oracle for the DP.
// Throws DataError if the count would exceed max_count.
std::vector<Segmentation> enumerate_segmentations(int epoch_count, double horizon, int t_max,
                                                  std::size_t max_count = 1'000'000);

// log P(events in [0, horizon] | model), marginalizing the start epoch and
// all boundary placements on the integer-hour grid. The epoch in progress at
// the horizon contributes a duration survival term (right censoring).
double trajectory_log_likelihood(const StandardizedEvents& events, double horizon,
                                 const TrajectoryModel& model);
double trajectory_log_likelihood(const StandardizedEvents& events, double horizon,
                                 const TrajectoryModel& model, const DurationTable& table);

struct SegmentHypothesis {
  int epoch = 0;
  int start_hour = 0;
  int end_hour = -1;  // -1: in progress at the horizon
  std::size_t first_event = 0;
  std::size_t event_count = 0;
  double weight = 0.0;  // posterior probability
};

struct SegmentPosteriors {
  double log_likelihood = 0.0;
  std::vector<SegmentHypothesis> segments;
  Eigen::VectorXd initial_posterior;  // K
};

// Forward-backward analogue of the DP; zero-weight hypotheses are omitted.
SegmentPosteriors segment_posteriors(const StandardizedEvents& events, double horizon,
                                     const TrajectoryModel& model);
SegmentPosteriors segment_posteriors(const StandardizedEvents& events, double horizon,
                                     const TrajectoryModel& model, const DurationTable& table);

// Incremental forward DP for streaming scoring. Events are appended in
// non-decreasing time order; completed-prefix columns and per-range segment
// likelihoods stay valid as the horizon grows, so each new observation only
// pays for the new columns and the in-progress segments. The model must
// outlive the DP; the duration table is copied.
class TrajectoryDp {
 public:
  TrajectoryDp(const TrajectoryModel& model, DurationTable table);

  void append(int stream_id, double time, double standardized_value);
  double log_likelihood(double horizon);  // horizon >= last appended time

  const StandardizedEvents& events() const { return events_; }

 private:
  double forward_cell(int epoch, int start_hour);
  void extend_columns(int hour);
  double segment_loglik(int epoch, std::size_t first, std::size_t count);

  const TrajectoryModel& model_;
  DurationTable table_;
  std::vector<PreparedEpoch> prepared_;
  StandardizedEvents events_;
  std::vector<Eigen::VectorXd> forward_;  // per start hour: K log probs
  std::unordered_map<std::uint64_t, double> segment_memo_;
};

}  // namespace wardrisk
