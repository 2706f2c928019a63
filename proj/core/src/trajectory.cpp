#include "wardrisk/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "wardrisk/errors.hpp"
#include "wardrisk/numeric.hpp"

namespace wardrisk {

namespace {

int horizon_hours(double horizon) {
  if (!(horizon >= 0.0) || !std::isfinite(horizon)) throw DataError("horizon must be finite and >= 0");
  return static_cast<int>(std::floor(horizon));
}

// Whole hours the epoch in progress at `horizon` has at least begun, for an
// epoch that started at integer hour `start`. An epoch ending exactly at the
// horizon hour counts as completed, never as surviving, so completed and
// in-progress hypotheses stay disjoint.
int elapsed_hours(double horizon, int start) {
  return static_cast<int>(std::floor(horizon - start)) + 1;
}

std::uint64_t memo_key(int epoch, std::size_t first, std::size_t count) {
  return (static_cast<std::uint64_t>(epoch) << 52) | (static_cast<std::uint64_t>(first) << 26) |
         static_cast<std::uint64_t>(count);
}

}  // namespace

void DurationParams::validate() const {
  if (r.size() != p.size()) throw DataError("duration parameter shapes disagree");
  if (t_max < 1) throw DataError("t_max must be >= 1");
  for (int k = 0; k < epoch_count(); ++k) {
    if (!(r[k] > 0.0) || !std::isfinite(r[k])) throw DataError("duration dispersion must be positive");
    if (!(p[k] > 0.0 && p[k] < 1.0)) throw DataError("duration success probability must lie in (0,1)");
  }
}

DurationTable DurationTable::build(const DurationParams& params) {
  params.validate();
  const int k_count = params.epoch_count();
  DurationTable table;
  table.t_max = params.t_max;
  table.log_pmf = Eigen::MatrixXd::Constant(k_count, params.t_max + 1, kNegInf);
  table.log_surv = Eigen::MatrixXd::Constant(k_count, params.t_max + 1, kNegInf);
  for (int k = 0; k < k_count; ++k) {
    const double r = params.r[k];
    const double log_p = std::log(params.p[k]);
    const double log_q = std::log1p(-params.p[k]);
    // Unnormalized NB on T >= 1 (T-1 failures before the r-th success).
    std::vector<double> raw(static_cast<std::size_t>(params.t_max) + 1, kNegInf);
    for (int t = 1; t <= params.t_max; ++t) {
      raw[static_cast<std::size_t>(t)] = std::lgamma(t - 1 + r) - std::lgamma(r) - std::lgamma(t) +
                                         r * log_p + (t - 1) * log_q;
    }
    const double log_z = log_sum_exp(std::span<const double>(raw.data() + 1, params.t_max));
    for (int t = 1; t <= params.t_max; ++t) table.log_pmf(k, t) = raw[static_cast<std::size_t>(t)] - log_z;
    double tail = kNegInf;
    for (int t = params.t_max; t >= 1; --t) {
      tail = log_sum_exp(tail, table.log_pmf(k, t));
      table.log_surv(k, t) = std::min(tail, 0.0);
    }
    table.log_surv(k, 1) = 0.0;  // the full truncated support has probability 1
  }
  return table;
}

double duration_log_pmf(int duration, int epoch, const DurationParams& params) {
  if (epoch < 0 || epoch >= params.epoch_count()) throw DataError("epoch index out of range");
  if (duration < 1 || duration > params.t_max)
    throw DataError("duration " + std::to_string(duration) + " outside truncated support [1, " +
                    std::to_string(params.t_max) + "]");
  return DurationTable::build(params).log_pmf(epoch, duration);
}

double duration_log_survival(int elapsed, int epoch, const DurationParams& params) {
  if (epoch < 0 || epoch >= params.epoch_count()) throw DataError("epoch index out of range");
  if (elapsed < 1 || elapsed > params.t_max)
    throw DataError("elapsed time " + std::to_string(elapsed) + " outside truncated support [1, " +
                    std::to_string(params.t_max) + "]");
  return DurationTable::build(params).log_surv(epoch, elapsed);
}

int sample_duration(double uniform, int epoch, const DurationTable& table) {
  double cum = 0.0;
  for (int t = 1; t <= table.t_max; ++t) {
    cum += std::exp(table.log_pmf(epoch, t));
    if (uniform < cum) return t;
  }
  return table.t_max;
}

void InitialEpochDist::validate() const {
  if (pi.size() == 0) throw DataError("initial epoch distribution is empty");
  if ((pi.array() < 0.0).any()) throw DataError("initial epoch probabilities must be >= 0");
  if (std::abs(pi.sum() - 1.0) > 1e-12)
    throw DataError("initial epoch probabilities must sum to 1");
}

void TrajectoryModel::validate() const {
  if (epochs.empty()) throw DataError("trajectory model needs at least one epoch");
  const auto k_count = static_cast<int>(epochs.size());
  if (durations.epoch_count() != k_count || initial.pi.size() != k_count)
    throw DataError("trajectory model component sizes disagree");
  for (const EpochKernelParams& e : epochs) e.validate();
  durations.validate();
  initial.validate();
}

std::vector<Segmentation> enumerate_segmentations(int epoch_count, double horizon, int t_max,
                                                  std::size_t max_count) {
  const int h = horizon_hours(horizon);
  std::vector<Segmentation> out;
  Segmentation current;
  // Depth-first over (start epoch, boundary set); completed durations respect
  // the truncated support, the in-progress tail is always structurally valid.
  auto extend = [&](auto&& self, int epoch, int start_hour) -> void {
    if (out.size() >= max_count)
      throw DataError("segmentation enumeration exceeds " + std::to_string(max_count) + " entries");
    out.push_back(current);
    if (epoch + 1 >= epoch_count) return;
    for (int end = start_hour + 1; end <= h && end - start_hour <= t_max; ++end) {
      current.boundaries.push_back(end);
      self(self, epoch + 1, end);
      current.boundaries.pop_back();
    }
  };
  for (int start = 0; start < epoch_count; ++start) {
    current.start_epoch = start;
    current.boundaries.clear();
    extend(extend, start, 0);
  }
  return out;
}

TrajectoryDp::TrajectoryDp(const TrajectoryModel& model, DurationTable table)
    : model_(model), table_(std::move(table)) {
  const int k_count = model_.epoch_count();
  prepared_.reserve(static_cast<std::size_t>(k_count));
  for (const EpochKernelParams& e : model_.epochs) prepared_.push_back(PreparedEpoch::make(e));
  Eigen::VectorXd base(k_count);
  for (int k = 0; k < k_count; ++k)
    base[k] = model_.initial.pi[k] > 0.0 ? std::log(model_.initial.pi[k]) : kNegInf;
  forward_.push_back(std::move(base));
}

void TrajectoryDp::append(int stream_id, double time, double standardized_value) {
  if (!events_.times.empty() && time < events_.times.back())
    throw DataError("events must be appended in non-decreasing time order");
  events_.append(stream_id, time, standardized_value);
}

double TrajectoryDp::segment_loglik(int epoch, std::size_t first, std::size_t count) {
  if (count == 0) return 0.0;
  const std::uint64_t key = memo_key(epoch, first, count);
  auto it = segment_memo_.find(key);
  if (it != segment_memo_.end()) return it->second;
  const double value = segment_log_marginal(segment_view(events_, first, count),
                                            prepared_[static_cast<std::size_t>(epoch)]);
  segment_memo_.emplace(key, value);
  return value;
}

double TrajectoryDp::forward_cell(int epoch, int start_hour) {
  return forward_[static_cast<std::size_t>(start_hour)][epoch];
}

void TrajectoryDp::extend_columns(int hour) {
  const int k_count = model_.epoch_count();
  const int t_max = table_.t_max;
  for (int s = static_cast<int>(forward_.size()); s <= hour; ++s) {
    Eigen::VectorXd column = Eigen::VectorXd::Constant(k_count, kNegInf);
    const std::size_t seg_end = events_.index_at_or_after(s);
    for (int k = 1; k < k_count; ++k) {
      LogSumExpAccumulator acc;
      const int s0_min = std::max(0, s - t_max);
      for (int s0 = s0_min; s0 < s; ++s0) {
        const double from = forward_cell(k - 1, s0);
        if (from == kNegInf) continue;
        const std::size_t seg_begin = events_.index_at_or_after(s0);
        acc.add(from + table_.log_pmf(k - 1, s - s0) +
                segment_loglik(k - 1, seg_begin, seg_end - seg_begin));
      }
      column[k] = acc.value();
    }
    forward_.push_back(std::move(column));
  }
}

double TrajectoryDp::log_likelihood(double horizon) {
  if (!events_.times.empty() && horizon < events_.times.back())
    throw DataError("horizon precedes the last observation");
  const int h = horizon_hours(horizon);
  extend_columns(h);
  const int k_count = model_.epoch_count();
  LogSumExpAccumulator acc;
  for (int s = 0; s <= h; ++s) {
    const int elapsed = elapsed_hours(horizon, s);
    if (elapsed > table_.t_max) continue;  // epoch cannot have lasted this long
    const std::size_t first = events_.index_at_or_after(s);
    const std::size_t count = events_.size() - first;
    for (int k = 0; k < k_count; ++k) {
      const double from = forward_cell(k, s);
      if (from == kNegInf) continue;
      acc.add(from + table_.log_surv(k, elapsed) + segment_loglik(k, first, count));
    }
  }
  return acc.value();
}

double trajectory_log_likelihood(const StandardizedEvents& events, double horizon,
                                 const TrajectoryModel& model) {
  return trajectory_log_likelihood(events, horizon, model, DurationTable::build(model.durations));
}

double trajectory_log_likelihood(const StandardizedEvents& events, double horizon,
                                 const TrajectoryModel& model, const DurationTable& table) {
  TrajectoryDp dp(model, table);
  for (std::size_t i = 0; i < events.size(); ++i)
    dp.append(events.stream_ids[i], events.times[i], events.values[i]);
  return dp.log_likelihood(horizon);
}

SegmentPosteriors segment_posteriors(const StandardizedEvents& events, double horizon,
                                     const TrajectoryModel& model) {
  return segment_posteriors(events, horizon, model, DurationTable::build(model.durations));
}

SegmentPosteriors segment_posteriors(const StandardizedEvents& events, double horizon,
                                     const TrajectoryModel& model, const DurationTable& table) {
  const int h = horizon_hours(horizon);
  const int k_count = model.epoch_count();
  const int t_max = table.t_max;
  const std::size_t n = events.size();
  if (n > 0 && horizon < events.times.back()) throw DataError("horizon precedes the last observation");

  std::vector<std::size_t> idx(static_cast<std::size_t>(h) + 2);
  for (int s = 0; s <= h + 1; ++s) idx[static_cast<std::size_t>(s)] = events.index_at_or_after(s);

  std::vector<PreparedEpoch> prepared;
  prepared.reserve(model.epochs.size());
  for (const EpochKernelParams& e : model.epochs) prepared.push_back(PreparedEpoch::make(e));
  std::unordered_map<std::uint64_t, double> memo;
  auto seg = [&](int epoch, std::size_t first, std::size_t count) {
    if (count == 0) return 0.0;
    const std::uint64_t key = memo_key(epoch, first, count);
    auto it = memo.find(key);
    if (it != memo.end()) return it->second;
    const double v = segment_log_marginal(segment_view(events, first, count),
                                          prepared[static_cast<std::size_t>(epoch)]);
    memo.emplace(key, v);
    return v;
  };
  auto tail_seg = [&](int epoch, int s) {
    const std::size_t first = idx[static_cast<std::size_t>(s)];
    return seg(epoch, first, n - first);
  };
  auto span_seg = [&](int epoch, int s, int e) {
    const std::size_t first = idx[static_cast<std::size_t>(s)];
    return seg(epoch, first, idx[static_cast<std::size_t>(e)] - first);
  };

  // Forward: log prob of completing everything before epoch k starting at s.
  Eigen::MatrixXd fwd = Eigen::MatrixXd::Constant(k_count, h + 1, kNegInf);
  for (int k = 0; k < k_count; ++k)
    fwd(k, 0) = model.initial.pi[k] > 0.0 ? std::log(model.initial.pi[k]) : kNegInf;
  for (int s = 1; s <= h; ++s) {
    for (int k = 1; k < k_count; ++k) {
      LogSumExpAccumulator acc;
      for (int s0 = std::max(0, s - t_max); s0 < s; ++s0) {
        if (fwd(k - 1, s0) == kNegInf) continue;
        acc.add(fwd(k - 1, s0) + table.log_pmf(k - 1, s - s0) + span_seg(k - 1, s0, s));
      }
      fwd(k, s) = acc.value();
    }
  }

  // Backward: log prob of everything from epoch k starting at s to horizon.
  Eigen::MatrixXd bwd = Eigen::MatrixXd::Constant(k_count, h + 1, kNegInf);
  auto survival_branch = [&](int k, int s) {
    const int elapsed = elapsed_hours(horizon, s);
    if (elapsed > t_max) return kNegInf;
    return table.log_surv(k, elapsed) + tail_seg(k, s);
  };
  for (int k = k_count - 1; k >= 0; --k) {
    for (int s = h; s >= 0; --s) {
      LogSumExpAccumulator acc;
      acc.add(survival_branch(k, s));
      if (k + 1 < k_count) {
        for (int e = s + 1; e <= std::min(h, s + t_max); ++e) {
          if (bwd(k + 1, e) == kNegInf) continue;
          acc.add(table.log_pmf(k, e - s) + span_seg(k, s, e) + bwd(k + 1, e));
        }
      }
      bwd(k, s) = acc.value();
    }
  }

  LogSumExpAccumulator total;
  for (int k = 0; k < k_count; ++k) {
    if (fwd(k, 0) == kNegInf) continue;
    total.add(fwd(k, 0) + bwd(k, 0));
  }
  const double log_lik = total.value();
  if (log_lik == kNegInf) throw NumericError("trajectory likelihood is zero for every segmentation");

  SegmentPosteriors post;
  post.log_likelihood = log_lik;
  post.initial_posterior = Eigen::VectorXd::Zero(k_count);
  for (int k = 0; k < k_count; ++k) {
    if (fwd(k, 0) == kNegInf || bwd(k, 0) == kNegInf) continue;
    post.initial_posterior[k] = std::exp(fwd(k, 0) + bwd(k, 0) - log_lik);
  }

  for (int k = 0; k < k_count; ++k) {
    for (int s = 0; s <= h; ++s) {
      if (fwd(k, s) == kNegInf) continue;
      const double sv = survival_branch(k, s);
      if (sv != kNegInf) {
        const double w = std::exp(fwd(k, s) + sv - log_lik);
        if (w > 0.0) {
          const std::size_t first = idx[static_cast<std::size_t>(s)];
          post.segments.push_back({k, s, -1, first, n - first, w});
        }
      }
      if (k + 1 < k_count) {
        for (int e = s + 1; e <= std::min(h, s + t_max); ++e) {
          if (bwd(k + 1, e) == kNegInf) continue;
          const double w =
              std::exp(fwd(k, s) + table.log_pmf(k, e - s) + span_seg(k, s, e) + bwd(k + 1, e) - log_lik);
          if (w > 0.0) {
            const std::size_t first = idx[static_cast<std::size_t>(s)];
            post.segments.push_back(
                {k, s, e, first, idx[static_cast<std::size_t>(e)] - first, w});
          }
        }
      }
    }
  }
  return post;
}

}  // namespace wardrisk
