#include "wardrisk/likelihood.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Cholesky>

#include "wardrisk/errors.hpp"
#include "wardrisk/numeric.hpp"

namespace wardrisk {

namespace {

constexpr double kLogTwoPi = 1.8378770664093453;

// Nugget escalation ladder; EM explores poor parameter regions early.
constexpr double kNuggetLadder[] = {0.0, 1e-6, 1e-4, 1e-2};

// Grow-only per-thread buffers: segment evaluations run millions of times on
// small matrices, so steady-state evaluation must not allocate.
struct SegmentWorkspace {
  Eigen::MatrixXd task, d2, se, cov, inv, w;
  Eigen::VectorXd resid, alpha;
  Eigen::Index cap = 0;

  void ensure(Eigen::Index n) {
    if (n <= cap) return;
    cap = std::max<Eigen::Index>(n, std::max<Eigen::Index>(2 * cap, 32));
    task.resize(cap, cap);
    d2.resize(cap, cap);
    se.resize(cap, cap);
    cov.resize(cap, cap);
    inv.resize(cap, cap);
    w.resize(cap, cap);
    resid.resize(cap);
    alpha.resize(cap);
  }
};

thread_local SegmentWorkspace tls_ws;

// Fills task/d2/se blocks and the noise-augmented covariance, then factorizes
// in place (ws.cov is destroyed by the Cholesky). Returns the applied nugget.
double factorize_in_workspace(SegmentView obs, const PreparedEpoch& prep, SegmentWorkspace& ws) {
  const EpochKernelParams& p = *prep.params;
  const auto n = static_cast<Eigen::Index>(obs.size());
  ws.ensure(n);
  const double inv_two_ell_sq = 1.0 / (2.0 * p.length_scale * p.length_scale);

  auto task = ws.task.topLeftCorner(n, n);
  auto d2 = ws.d2.topLeftCorner(n, n);
  auto se = ws.se.topLeftCorner(n, n);
  for (Eigen::Index b = 0; b < n; ++b) {
    const int sb = obs.stream_ids[b];
    const double tb = obs.times[b];
    for (Eigen::Index a = 0; a < n; ++a) {
      task(a, b) = prep.task_cov(obs.stream_ids[a], sb);
      const double dt = obs.times[a] - tb;
      d2(a, b) = dt * dt;
    }
  }
  se = (-inv_two_ell_sq * d2.array()).exp();
  for (Eigen::Index a = 0; a < n; ++a) ws.resid[a] = obs.values[a] - p.mean[obs.stream_ids[a]];

  for (double nugget : kNuggetLadder) {
    auto cov = ws.cov.topLeftCorner(n, n);
    cov = task.cwiseProduct(se);
    for (Eigen::Index a = 0; a < n; ++a) cov(a, a) += p.noise[obs.stream_ids[a]] + nugget;
    Eigen::Ref<Eigen::MatrixXd> cov_ref = cov;
    const Eigen::LLT<Eigen::Ref<Eigen::MatrixXd>> llt(cov_ref);
    if (llt.info() == Eigen::Success) return nugget;
  }
  std::ostringstream msg;
  msg << "segment covariance Cholesky failed after nugget escalation to 1e-2"
      << " (n=" << n << ", length_scale=" << p.length_scale << ")";
  throw NumericError(msg.str());
}

// After factorize_in_workspace, ws.cov holds the packed Cholesky factor.
double log_marginal_in_workspace(SegmentView obs, SegmentWorkspace& ws) {
  const auto n = static_cast<Eigen::Index>(obs.size());
  auto lower = ws.cov.topLeftCorner(n, n).triangularView<Eigen::Lower>();
  ws.alpha.head(n) = ws.resid.head(n);
  lower.solveInPlace(ws.alpha.head(n));
  const double quad = ws.alpha.head(n).squaredNorm();  // ||L^-1 r||^2 = r^T K^-1 r
  const double log_det = 2.0 * ws.cov.topLeftCorner(n, n).diagonal().array().log().sum();
  return -0.5 * (quad + log_det + static_cast<double>(n) * kLogTwoPi);
}

// Scalar closed form for one observation: N(x; m_d, task_cov(d,d) + noise_d).
double single_obs_log_marginal(int stream, double value, const PreparedEpoch& prep) {
  const EpochKernelParams& p = *prep.params;
  const double var = prep.task_cov(stream, stream) + p.noise[stream];
  const double resid = value - p.mean[stream];
  return -0.5 * (std::log(var) + resid * resid / var + kLogTwoPi);
}

}  // namespace

StreamStats fit_stream_stats(const Cohort& cohort) {
  const int d = cohort.stream_count();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd sum_sq = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd count = Eigen::VectorXd::Zero(d);
  for (const PatientRecord& r : cohort.patients) {
    for (const MeasurementEvent& e : r.events) {
      sum[e.stream_id] += e.value;
      sum_sq[e.stream_id] += e.value * e.value;
      count[e.stream_id] += 1.0;
    }
  }
  StreamStats stats;
  stats.mean = Eigen::VectorXd::Zero(d);
  stats.sd = Eigen::VectorXd::Ones(d);
  for (int i = 0; i < d; ++i) {
    if (count[i] < 2.0) continue;
    stats.mean[i] = sum[i] / count[i];
    const double var = (sum_sq[i] - sum[i] * sum[i] / count[i]) / (count[i] - 1.0);
    stats.sd[i] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return stats;
}

void StandardizedEvents::append(int stream, double time, double value) {
  stream_ids.push_back(stream);
  times.push_back(time);
  values.push_back(value);
}

std::size_t StandardizedEvents::index_at_or_after(double hour) const {
  return static_cast<std::size_t>(
      std::lower_bound(times.begin(), times.end(), hour) - times.begin());
}

StandardizedEvents standardize_events(std::span<const MeasurementEvent> events, const StreamStats& stats) {
  std::vector<std::size_t> order(events.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Stable by time: the likelihood is exchangeable over same-timestamp events,
  // so preserving the input tie order keeps streaming and batch paths
  // bit-identical.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return events[a].time < events[b].time; });
  StandardizedEvents out;
  out.stream_ids.reserve(events.size());
  out.times.reserve(events.size());
  out.values.reserve(events.size());
  for (std::size_t i : order) {
    const MeasurementEvent& e = events[i];
    out.append(e.stream_id, e.time, stats.standardize(e.stream_id, e.value));
  }
  return out;
}

SegmentView segment_view(const StandardizedEvents& ev, std::size_t first, std::size_t count) {
  return {std::span<const int>(ev.stream_ids).subspan(first, count),
          std::span<const double>(ev.times).subspan(first, count),
          std::span<const double>(ev.values).subspan(first, count)};
}

double segment_log_marginal(SegmentView obs, const EpochKernelParams& params) {
  return segment_log_marginal(obs, PreparedEpoch::make(params));
}

double segment_log_marginal(SegmentView obs, const PreparedEpoch& prepared) {
  if (obs.size() == 0) return 0.0;
  if (obs.size() == 1) return single_obs_log_marginal(obs.stream_ids[0], obs.values[0], prepared);
  SegmentWorkspace& ws = tls_ws;
  factorize_in_workspace(obs, prepared, ws);
  return log_marginal_in_workspace(obs, ws);
}

void EpochParamGrad::set_zero(int streams, int rank) {
  mean = Eigen::VectorXd::Zero(streams);
  factor = Eigen::MatrixXd::Zero(streams, rank);
  diag_raw = Eigen::VectorXd::Zero(streams);
  log_length_scale = 0.0;
  noise_raw = Eigen::VectorXd::Zero(streams);
}

void EpochParamGrad::accumulate(const EpochParamGrad& other, double weight) {
  mean += weight * other.mean;
  factor += weight * other.factor;
  diag_raw += weight * other.diag_raw;
  log_length_scale += weight * other.log_length_scale;
  noise_raw += weight * other.noise_raw;
}

EpochParamGrad segment_log_marginal_grad(SegmentView obs, const EpochKernelParams& params,
                                         double* log_marginal) {
  return segment_log_marginal_grad(obs, PreparedEpoch::make(params), log_marginal);
}

EpochParamGrad segment_log_marginal_grad(SegmentView obs, const PreparedEpoch& prepared,
                                         double* log_marginal) {
  const EpochKernelParams& p = *prepared.params;
  EpochParamGrad grad;
  grad.set_zero(p.streams(), p.rank());
  if (obs.size() == 0) {
    if (log_marginal) *log_marginal = 0.0;
    return grad;
  }
  const int d = p.streams();
  if (obs.size() == 1) {
    // Scalar path: L = log N(x; m_d, Sigma_dd + noise_d).
    const int u = obs.stream_ids[0];
    const double var = prepared.task_cov(u, u) + p.noise[u];
    const double resid = obs.values[0] - p.mean[u];
    const double alpha = resid / var;
    if (log_marginal) *log_marginal = -0.5 * (std::log(var) + resid * alpha + kLogTwoPi);
    const double dl_dk = 0.5 * (alpha * alpha - 1.0 / var);
    grad.mean[u] = alpha;
    grad.factor.row(u) = 2.0 * dl_dk * p.task_factor.row(u);
    grad.diag_raw[u] = dl_dk * (1.0 - std::exp(-p.task_diag[u]));
    grad.noise_raw[u] = dl_dk * (1.0 - std::exp(-(p.noise[u] - kNoiseFloor)));
    return grad;
  }

  const auto n = static_cast<Eigen::Index>(obs.size());
  SegmentWorkspace& ws = tls_ws;
  factorize_in_workspace(obs, prepared, ws);
  if (log_marginal) *log_marginal = log_marginal_in_workspace(obs, ws);

  auto lower = ws.cov.topLeftCorner(n, n).triangularView<Eigen::Lower>();
  // alpha = K^-1 r (continue the half-solved vector from log_marginal /
  // recompute when the value was not requested).
  if (!log_marginal) {
    ws.alpha.head(n) = ws.resid.head(n);
    lower.solveInPlace(ws.alpha.head(n));
  }
  lower.transpose().solveInPlace(ws.alpha.head(n));
  // K^-1 via the factor; inv is overwritten wholesale.
  ws.inv.topLeftCorner(n, n).setIdentity();
  lower.solveInPlace(ws.inv.topLeftCorner(n, n));
  lower.transpose().solveInPlace(ws.inv.topLeftCorner(n, n));
  // dL/dK = 0.5 (alpha alpha^T - K^-1)
  auto w = ws.w.topLeftCorner(n, n);
  w.noalias() = 0.5 * ws.alpha.head(n) * ws.alpha.head(n).transpose();
  w -= 0.5 * ws.inv.topLeftCorner(n, n);

  for (Eigen::Index a = 0; a < n; ++a) grad.mean[obs.stream_ids[a]] += ws.alpha[a];

  // Aggregate dL/dSigma(u,w) over same-stream-pair entries, weighting each by
  // the stored time-kernel values; symmetry halves the pass.
  Eigen::MatrixXd g_sigma = Eigen::MatrixXd::Zero(d, d);
  const auto se = ws.se.topLeftCorner(n, n);
  for (Eigen::Index a = 0; a < n; ++a) {
    const int ua = obs.stream_ids[a];
    g_sigma(ua, ua) += w(a, a);  // se(a,a) = 1
    for (Eigen::Index b = a + 1; b < n; ++b) {
      const double m = w(a, b) * se(a, b);
      const int ub = obs.stream_ids[b];
      g_sigma(ua, ub) += m;
      g_sigma(ub, ua) += m;
    }
  }
  grad.factor = (g_sigma + g_sigma.transpose()) * p.task_factor;
  // Chain softplus: d softplus(raw)/d raw = sigmoid(raw) = 1 - exp(-softplus(raw)).
  for (int u = 0; u < d; ++u)
    grad.diag_raw[u] = g_sigma(u, u) * (1.0 - std::exp(-p.task_diag[u]));
  const double ell_sq = p.length_scale * p.length_scale;
  // cov_no_noise = task (.) se, so dK/dlog l contracts w with task*se*d2/l^2.
  grad.log_length_scale = (w.cwiseProduct(ws.task.topLeftCorner(n, n))
                               .cwiseProduct(se)
                               .cwiseProduct(ws.d2.topLeftCorner(n, n)))
                              .sum() /
                          ell_sq;
  for (Eigen::Index a = 0; a < n; ++a) {
    const int u = obs.stream_ids[a];
    grad.noise_raw[u] += w(a, a) * (1.0 - std::exp(-(p.noise[u] - kNoiseFloor)));
  }
  return grad;
}

}  // namespace wardrisk
