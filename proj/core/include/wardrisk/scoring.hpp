#pragma once

#include <memory>
#include <vector>

#include <Eigen/Core>

#include "wardrisk/cohort.hpp"
#include "wardrisk/mixture.hpp"
#include "wardrisk/trajectory.hpp"

namespace wardrisk {

struct ScorePoint {
  double time = 0.0;
  double risk = 0.0;
};

// Streaming per-patient state for the real-time risk score. The gating vector
// is fixed at admission; every observation updates the per-(v,z) forward DP
// caches and re-evaluates the Bayes posterior in log space. One session owns
// one patient; params are shared read-only and must outlive the session.
class ScoringSession {
 public:
  ScoringSession(const ModelParams& params, const StaticProfile& profile);

  // Feeds one measurement (times must be non-decreasing) and returns R(t).
  double observe(const MeasurementEvent& event);

  // Re-evaluates the score at a later horizon without new evidence; only the
  // duration survival terms move. Used by the optional clock-tick mode.
  double score_at(double horizon);

  double risk() const { return risk_; }
  double last_time() const { return last_time_; }
  const Eigen::VectorXd& gating() const { return gating_; }

 private:
  double bayes_posterior(double horizon);

  const ModelParams& params_;
  Eigen::VectorXd gating_;      // fixed at admission
  Eigen::VectorXd log_gating_;
  std::vector<std::unique_ptr<TrajectoryDp>> dp_;  // [z*2 + v]
  double last_time_ = 0.0;
  double risk_ = 0.0;
};

ScoringSession open_session(const ModelParams& params, const StaticProfile& profile);

// Batch replay of observe() over a record's events, point-for-point identical
// to streaming. Always starts with the admission point (0, prior).
std::vector<ScorePoint> score_trajectory(const ModelParams& params, const PatientRecord& record);

}  // namespace wardrisk
