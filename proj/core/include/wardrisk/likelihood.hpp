#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

#include "wardrisk/cohort.hpp"
#include "wardrisk/kernel.hpp"

namespace wardrisk {

// Per-stream training statistics. Values are standardized before any
// likelihood evaluation so one nugget floor and one length-scale prior work
// across streams of very different units.
struct StreamStats {
  Eigen::VectorXd mean;  // D
  Eigen::VectorXd sd;    // D, > 0

  double standardize(int stream, double raw) const { return (raw - mean[stream]) / sd[stream]; }
  double destandardize(int stream, double z) const { return z * sd[stream] + mean[stream]; }
};

StreamStats fit_stream_stats(const Cohort& cohort);

// Time-sorted standardized observations in structure-of-arrays form; segment
// evaluations reference contiguous [first, first+count) ranges of it.
struct StandardizedEvents {
  std::vector<int> stream_ids;
  std::vector<double> times;
  std::vector<double> values;

  std::size_t size() const { return times.size(); }
  void append(int stream, double time, double value);
  // First index with time >= hour.
  std::size_t index_at_or_after(double hour) const;
};

StandardizedEvents standardize_events(std::span<const MeasurementEvent> events, const StreamStats& stats);

struct SegmentView {
  std::span<const int> stream_ids;
  std::span<const double> times;
  std::span<const double> values;

  std::size_t size() const { return times.size(); }
};

SegmentView segment_view(const StandardizedEvents& ev, std::size_t first, std::size_t count);

// Observations restricted to one epoch. Owning counterpart of SegmentView.
struct SegmentObservations {
  std::vector<int> stream_ids;
  std::vector<double> times;
  std::vector<double> values;

  SegmentView view() const { return {stream_ids, times, values}; }
};

// Exact Gaussian log marginal likelihood of one epoch segment. Empty
// segments evaluate to 0. Cholesky failures escalate the nugget through
// 1e-6 -> 1e-4 -> 1e-2 before raising NumericError with a conditioning note.
double segment_log_marginal(SegmentView obs, const EpochKernelParams& params);

// Per-epoch quantities reused across many segment evaluations (the DP and
// the M-step evaluate thousands of small segments per parameter set).
struct PreparedEpoch {
  const EpochKernelParams* params = nullptr;
  Eigen::MatrixXd task_cov;

  static PreparedEpoch make(const EpochKernelParams& p) { return {&p, p.task_cov()}; }
};

double segment_log_marginal(SegmentView obs, const PreparedEpoch& prepared);

// Gradient in the unconstrained parameterization: mean and factor are free,
// task_diag and (noise - floor) are softplus-transformed, the length scale is
// log-transformed.
struct EpochParamGrad {
  Eigen::VectorXd mean;
  Eigen::MatrixXd factor;
  Eigen::VectorXd diag_raw;
  double log_length_scale = 0.0;
  Eigen::VectorXd noise_raw;

  void set_zero(int streams, int rank);
  void accumulate(const EpochParamGrad& other, double weight);
};

EpochParamGrad segment_log_marginal_grad(SegmentView obs, const EpochKernelParams& params,
                                         double* log_marginal = nullptr);
EpochParamGrad segment_log_marginal_grad(SegmentView obs, const PreparedEpoch& prepared,
                                         double* log_marginal = nullptr);

}  // namespace wardrisk
