#include "wardrisk/scoring.hpp"

#include <cmath>

#include "wardrisk/errors.hpp"
#include "wardrisk/numeric.hpp"

namespace wardrisk {

ScoringSession::ScoringSession(const ModelParams& params, const StaticProfile& profile)
    : params_(params) {
  const StaticEncoder encoder = params.encoding.encoder();
  const Eigen::VectorXd y = encoder.encode(profile);
  log_gating_ = gating_log_probabilities(y, params.gating);
  gating_ = log_gating_.array().exp();
  dp_.reserve(static_cast<std::size_t>(params.phenotype_count) * 2);
  for (int z = 0; z < params.phenotype_count; ++z) {
    for (int v = 0; v < 2; ++v) {
      const TrajectoryModel& model = params.model(v, z);
      dp_.push_back(std::make_unique<TrajectoryDp>(model, DurationTable::build(model.durations)));
    }
  }
  risk_ = params.prior_icu;  // no evidence yet
}

double ScoringSession::bayes_posterior(double horizon) {
  // R(t) = p1 * sum_z gamma_z L_{1,z} / sum_v p_v sum_z gamma_z L_{v,z},
  // all in log space.
  LogSumExpAccumulator class_ll[2];
  for (int z = 0; z < params_.phenotype_count; ++z) {
    if (log_gating_[z] == kNegInf) continue;
    for (int v = 0; v < 2; ++v) {
      const double ll = dp_[static_cast<std::size_t>(z) * 2 + static_cast<std::size_t>(v)]
                            ->log_likelihood(horizon);
      class_ll[v].add(log_gating_[z] + ll);
    }
  }
  const double p1 = params_.prior_icu;
  const double log_num = (p1 > 0.0 ? std::log(p1) : kNegInf) + class_ll[1].value();
  const double log_alt = (p1 < 1.0 ? std::log1p(-p1) : kNegInf) + class_ll[0].value();
  const double log_den = log_sum_exp(log_num, log_alt);
  if (log_den == kNegInf || std::isnan(log_den))
    throw NumericError("risk score likelihood vanished under both hypotheses");
  if (log_num == kNegInf) return 0.0;
  return std::exp(log_num - log_den);
}

double ScoringSession::observe(const MeasurementEvent& event) {
  if (event.time < last_time_) throw DataError("out-of-order event in scoring session");
  if (!std::isfinite(event.value) || !std::isfinite(event.time))
    throw DataError("non-finite measurement event");
  if (event.stream_id < 0 || event.stream_id >= params_.stream_count())
    throw DataError("event stream_id outside the model's stream catalog");
  const double z = params_.standardization.standardize(event.stream_id, event.value);
  for (auto& dp : dp_) dp->append(event.stream_id, event.time, z);
  last_time_ = event.time;
  risk_ = bayes_posterior(event.time);
  return risk_;
}

double ScoringSession::score_at(double horizon) {
  if (horizon < last_time_) throw DataError("score_at horizon precedes the last observation");
  return bayes_posterior(horizon);
}

ScoringSession open_session(const ModelParams& params, const StaticProfile& profile) {
  return ScoringSession(params, profile);
}

std::vector<ScorePoint> score_trajectory(const ModelParams& params, const PatientRecord& record) {
  ScoringSession session(params, record.profile);
  std::vector<ScorePoint> trace;
  trace.reserve(record.events.size() + 1);
  trace.push_back({0.0, session.risk()});
  for (const MeasurementEvent& e : record.events) trace.push_back({e.time, session.observe(e)});
  return trace;
}

}  // namespace wardrisk
