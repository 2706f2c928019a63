#include "wardrisk/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "wardrisk/errors.hpp"
#include "wardrisk/numeric.hpp"
#include "wardrisk/parallel.hpp"
#include "wardrisk/rng.hpp"

namespace wardrisk {

using json = nlohmann::ordered_json;

namespace {

Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return logits.array() - lse;
}

}  // namespace

Eigen::VectorXd gating_log_probabilities(const Eigen::VectorXd& y_encoded, const GatingParams& gating) {
  if (gating.w.cols() != y_encoded.size()) throw DataError("gating weight / feature dimension mismatch");
  return log_softmax(gating.w * y_encoded);
}

Eigen::VectorXd gating_probabilities(const Eigen::VectorXd& y_encoded, const GatingParams& gating) {
  return gating_log_probabilities(y_encoded, gating).array().exp();
}

void ModelParams::validate() const {
  if (phenotype_count < 1) throw DataError("phenotype count must be >= 1");
  if (epoch_count < 1) throw DataError("epoch count must be >= 1");
  if (!(prior_icu > 0.0 && prior_icu < 1.0)) throw DataError("prior_icu must lie in (0,1)");
  if (static_cast<int>(models.size()) != phenotype_count)
    throw DataError("model count does not match phenotype count");
  const int d = stream_count();
  for (const auto& pair : models) {
    for (const TrajectoryModel& m : pair) {
      m.validate();
      if (m.epoch_count() != epoch_count) throw DataError("epoch count mismatch in trajectory model");
      for (const EpochKernelParams& e : m.epochs)
        if (e.streams() != d) throw DataError("stream count mismatch in epoch kernel");
    }
  }
  if (gating.phenotype_count() != phenotype_count) throw DataError("gating row count mismatch");
  if (!gating.w.row(0).isZero(0.0)) throw DataError("gating reference row must be zero");
  if (standardization.mean.size() != d || standardization.sd.size() != d)
    throw DataError("standardization statistics do not match the stream catalog");
}

double class_conditional_log_likelihood(std::span<const MeasurementEvent> events, double horizon,
                                        const Eigen::VectorXd& y_encoded, int v,
                                        const ModelParams& params) {
  const StandardizedEvents ev = standardize_events(events, params.standardization);
  const Eigen::VectorXd log_gamma = gating_log_probabilities(y_encoded, params.gating);
  LogSumExpAccumulator acc;
  for (int z = 0; z < params.phenotype_count; ++z) {
    if (log_gamma[z] == kNegInf) continue;
    acc.add(log_gamma[z] + trajectory_log_likelihood(ev, horizon, params.model(v, z)));
  }
  return acc.value();
}

long count_parameters(int phenotypes, int epochs, int streams, int features, int rank) {
  if (phenotypes < 1 || epochs < 1 || streams < 1 || features < 0 || rank < 0)
    throw ConfigError("count_parameters arguments must be positive");
  const long per_epoch_kernel = static_cast<long>(streams) + static_cast<long>(streams) * rank +
                                streams + 1 + streams;  // mean, factor, diag, log l, noise
  const long per_model = static_cast<long>(epochs) * per_epoch_kernel + static_cast<long>(epochs) * 2 +
                         (epochs - 1);  // kernels, NB (r,p), pi free dims
  return static_cast<long>(phenotypes) * 2 * per_model +
         static_cast<long>(phenotypes - 1) * features + 1;  // gating + prior
}

double total_log_likelihood(const ModelParams& params, const Cohort& cohort, unsigned threads) {
  const StaticEncoder encoder = params.encoding.encoder();
  const std::size_t n = cohort.patients.size();
  std::vector<std::array<DurationTable, 2>> tables(static_cast<std::size_t>(params.phenotype_count));
  for (int z = 0; z < params.phenotype_count; ++z)
    for (int v = 0; v < 2; ++v)
      tables[static_cast<std::size_t>(z)][static_cast<std::size_t>(v)] =
          DurationTable::build(params.model(v, z).durations);
  std::vector<double> contrib(n, 0.0);
  parallel_for(n, threads, [&](std::size_t i) {
    const PatientRecord& r = cohort.patients[i];
    const int v = static_cast<int>(r.outcome);
    const Eigen::VectorXd y = encoder.encode(r.profile);
    const StandardizedEvents ev = standardize_events(r.events, params.standardization);
    const Eigen::VectorXd log_gamma = gating_log_probabilities(y, params.gating);
    LogSumExpAccumulator acc;
    for (int z = 0; z < params.phenotype_count; ++z) {
      if (log_gamma[z] == kNegInf) continue;
      acc.add(log_gamma[z] +
              trajectory_log_likelihood(ev, r.endpoint_time, params.model(v, z),
                                        tables[static_cast<std::size_t>(z)][static_cast<std::size_t>(v)]));
    }
    contrib[i] = acc.value() +
                 (v == 1 ? std::log(params.prior_icu) : std::log1p(-params.prior_icu));
  });
  double total = 0.0;
  for (double c : contrib) total += c;
  return total;
}

double bic(const ModelParams& params, const Cohort& cohort, unsigned threads) {
  const long p = count_parameters(params.phenotype_count, params.epoch_count, params.stream_count(),
                                  params.encoding.encoder().dim(), params.rank);
  const double ll = total_log_likelihood(params, cohort, threads);
  return -2.0 * ll + static_cast<double>(p) * std::log(static_cast<double>(cohort.patients.size()));
}

// ---------------------------------------------------------------------------
// EM internals
// ---------------------------------------------------------------------------

namespace {

// --- unconstrained packing of EpochKernelParams ---

int packed_size(int streams, int rank) { return streams * (3 + rank) + 1; }

Eigen::VectorXd pack_epoch(const EpochKernelParams& p) {
  const int d = p.streams();
  const int r = p.rank();
  Eigen::VectorXd u(packed_size(d, r));
  int at = 0;
  u.segment(at, d) = p.mean;
  at += d;
  for (int c = 0; c < r; ++c) {
    u.segment(at, d) = p.task_factor.col(c);
    at += d;
  }
  for (int i = 0; i < d; ++i) u[at + i] = softplus_inverse(std::max(p.task_diag[i], 1e-10));
  at += d;
  u[at++] = std::log(p.length_scale);
  for (int i = 0; i < d; ++i) u[at + i] = softplus_inverse(std::max(p.noise[i] - kNoiseFloor, 1e-10));
  return u;
}

EpochKernelParams unpack_epoch(const Eigen::VectorXd& u, int streams, int rank, double log_ell_min,
                               double log_ell_max) {
  EpochKernelParams p;
  int at = 0;
  p.mean = u.segment(at, streams);
  at += streams;
  p.task_factor.resize(streams, rank);
  for (int c = 0; c < rank; ++c) {
    p.task_factor.col(c) = u.segment(at, streams);
    at += streams;
  }
  p.task_diag.resize(streams);
  for (int i = 0; i < streams; ++i) p.task_diag[i] = softplus(u[at + i]);
  at += streams;
  p.length_scale = std::exp(std::clamp(u[at++], log_ell_min, log_ell_max));
  p.noise.resize(streams);
  for (int i = 0; i < streams; ++i) p.noise[i] = kNoiseFloor + softplus(u[at + i]);
  return p;
}

Eigen::VectorXd pack_grad(const EpochParamGrad& g) {
  const int d = static_cast<int>(g.mean.size());
  const int r = static_cast<int>(g.factor.cols());
  Eigen::VectorXd u(packed_size(d, r));
  int at = 0;
  u.segment(at, d) = g.mean;
  at += d;
  for (int c = 0; c < r; ++c) {
    u.segment(at, d) = g.factor.col(c);
    at += d;
  }
  u.segment(at, d) = g.diag_raw;
  at += d;
  u[at++] = g.log_length_scale;
  u.segment(at, d) = g.noise_raw;
  return u;
}

// --- weighted data views feeding the M-step ---

struct WeightedRange {
  const StandardizedEvents* events;
  std::uint32_t first;
  std::uint32_t count;
  double weight;
};

struct KernelObjective {
  double value = 0.0;
  Eigen::VectorXd grad;
};

KernelObjective kernel_objective(const std::vector<WeightedRange>& ranges, const EpochKernelParams& p) {
  KernelObjective out;
  EpochParamGrad total;
  total.set_zero(p.streams(), p.rank());
  const PreparedEpoch prepared = PreparedEpoch::make(p);
  for (const WeightedRange& r : ranges) {
    double ll = 0.0;
    const EpochParamGrad g =
        segment_log_marginal_grad(segment_view(*r.events, r.first, r.count), prepared, &ll);
    out.value += r.weight * ll;
    total.accumulate(g, r.weight);
  }
  out.grad = pack_grad(total);
  return out;
}

EpochKernelParams optimize_kernel_block(const std::vector<WeightedRange>& ranges,
                                        const EpochKernelParams& start, const EMConfig& cfg) {
  if (ranges.empty()) return start;
  const int d = start.streams();
  const int r = start.rank();
  const double log_ell_min = std::log(cfg.length_scale_min);
  const double log_ell_max = std::log(cfg.length_scale_max);
  auto unpack = [&](const Eigen::VectorXd& u) {
    return unpack_epoch(u, d, r, log_ell_min, log_ell_max);
  };

  Eigen::VectorXd u = pack_epoch(start);
  u[d * (2 + r)] = std::clamp(u[d * (2 + r)], log_ell_min, log_ell_max);
  Eigen::VectorXd best_u = u;
  KernelObjective cur = kernel_objective(ranges, unpack(u));
  double best_f = cur.value;

  Eigen::VectorXd m = Eigen::VectorXd::Zero(u.size());
  Eigen::VectorXd v = Eigen::VectorXd::Zero(u.size());
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int step = 1; step <= cfg.m_step_grad_steps; ++step) {
    m = b1 * m + (1.0 - b1) * cur.grad;
    v = b2 * v + (1.0 - b2) * cur.grad.cwiseProduct(cur.grad);
    const double bc1 = 1.0 - std::pow(b1, step);
    const double bc2 = 1.0 - std::pow(b2, step);
    u += (cfg.adam_learning_rate / bc1) *
         (m.array() / ((v.array() / bc2).sqrt() + eps)).matrix();
    u[d * (2 + r)] = std::clamp(u[d * (2 + r)], log_ell_min, log_ell_max);
    cur = kernel_objective(ranges, unpack(u));
    if (cur.value > best_f) {
      best_f = cur.value;
      best_u = u;
    }
  }
  // The generalized M-step keeps the best iterate (including the starting
  // point) so the EM objective cannot decrease.
  return unpack(best_u);
}

// --- duration (truncated NB) block ---

struct DurationStats {
  Eigen::VectorXd completed;  // weight per duration 1..t_max
  Eigen::VectorXd censored;   // weight per elapsed 1..t_max
};

double duration_objective(double r, double p, int t_max, const DurationStats& stats) {
  std::vector<double> lp(static_cast<std::size_t>(t_max) + 1, kNegInf);
  const double log_p = std::log(p);
  const double log_q = std::log1p(-p);
  for (int t = 1; t <= t_max; ++t)
    lp[static_cast<std::size_t>(t)] =
        std::lgamma(t - 1 + r) - std::lgamma(r) - std::lgamma(t) + r * log_p + (t - 1) * log_q;
  const double log_z = log_sum_exp(std::span<const double>(lp.data() + 1, static_cast<std::size_t>(t_max)));
  double tail = kNegInf;
  std::vector<double> ls(static_cast<std::size_t>(t_max) + 1, kNegInf);
  for (int t = t_max; t >= 1; --t) {
    tail = log_sum_exp(tail, lp[static_cast<std::size_t>(t)] - log_z);
    ls[static_cast<std::size_t>(t)] = std::min(tail, 0.0);
  }
  double obj = 0.0;
  for (int t = 1; t <= t_max; ++t) {
    if (stats.completed[t] > 0.0) obj += stats.completed[t] * (lp[static_cast<std::size_t>(t)] - log_z);
    if (stats.censored[t] > 0.0) obj += stats.censored[t] * ls[static_cast<std::size_t>(t)];
  }
  return obj;
}

std::pair<double, double> moment_match_nb(double mean_duration, double var_duration) {
  // T - 1 is NB-distributed with mean r(1-p)/p and variance r(1-p)/p^2.
  const double m = std::max(mean_duration - 1.0, 0.05);
  const double v = std::max(var_duration, m * 1.05);
  double p = std::clamp(m / v, 1e-3, 0.995);
  double r = std::clamp(p * m / (1.0 - p), 1e-2, 1e4);
  return {r, p};
}

std::pair<double, double> optimize_duration_block(double r0, double p0, int t_max,
                                                  const DurationStats& stats, int max_steps) {
  const double total_mass = stats.completed.sum() + stats.censored.sum();
  if (total_mass <= 0.0) return {r0, p0};

  auto unpack = [](const Eigen::Vector2d& x) {
    return std::pair<double, double>{std::clamp(std::exp(x[0]), 1e-2, 1e4),
                                     std::clamp(sigmoid(x[1]), 1e-3, 0.995)};
  };
  auto eval = [&](const Eigen::Vector2d& x) {
    const auto [r, p] = unpack(x);
    return duration_objective(r, p, t_max, stats);
  };

  Eigen::Vector2d x(std::log(r0), std::log(p0 / (1.0 - p0)));
  double best_f = eval(x);
  Eigen::Vector2d best_x = x;

  // Moment-matched candidate from the completed durations (censored elapsed
  // times stand in when every duration is censored).
  double wsum = 0.0, mean = 0.0;
  for (int t = 1; t <= t_max; ++t) {
    const double w = stats.completed[t] > 0.0 ? stats.completed[t] : 0.0;
    wsum += w;
    mean += w * t;
  }
  const Eigen::VectorXd& fallback = stats.censored;
  if (wsum <= 1e-12) {
    for (int t = 1; t <= t_max; ++t) {
      wsum += fallback[t];
      mean += fallback[t] * t;
    }
  }
  if (wsum > 1e-12) {
    mean /= wsum;
    double var = 0.0;
    double vsum = 0.0;
    const Eigen::VectorXd& source = stats.completed.sum() > 1e-12 ? stats.completed : fallback;
    for (int t = 1; t <= t_max; ++t) {
      var += source[t] * (t - mean) * (t - mean);
      vsum += source[t];
    }
    var = vsum > 1e-12 ? var / vsum : mean;
    const auto [rm, pm] = moment_match_nb(mean, var);
    Eigen::Vector2d xm(std::log(rm), std::log(pm / (1.0 - pm)));
    const double fm = eval(xm);
    if (fm > best_f) {
      best_f = fm;
      best_x = xm;
    }
  }

  x = best_x;
  double fx = best_f;
  const double h = 1e-5;
  for (int step = 0; step < max_steps; ++step) {
    Eigen::Vector2d g;
    for (int j = 0; j < 2; ++j) {
      Eigen::Vector2d xp = x, xm2 = x;
      xp[j] += h;
      xm2[j] -= h;
      g[j] = (eval(xp) - eval(xm2)) / (2.0 * h);
    }
    const double gnorm = g.norm();
    if (gnorm < 1e-10 * (1.0 + std::abs(fx))) break;
    double lr = 1.0;
    bool accepted = false;
    for (int halving = 0; halving < 12; ++halving) {
      Eigen::Vector2d xt = x + lr * g / (gnorm + 1.0);
      const double ft = eval(xt);
      if (ft > fx) {
        x = xt;
        fx = ft;
        accepted = true;
        break;
      }
      lr *= 0.5;
    }
    if (!accepted) break;
    if (fx > best_f) {
      best_f = fx;
      best_x = x;
    }
  }
  return unpack(best_x);
}

// --- gating block (weighted multinomial logistic, row 0 pinned) ---

double gating_objective(const Eigen::MatrixXd& w, const Eigen::MatrixXd& y,
                        const Eigen::MatrixXd& resp) {
  double obj = 0.0;
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const Eigen::VectorXd ls = log_softmax(w * y.row(i).transpose());
    obj += resp.row(i).dot(ls);
  }
  return obj;
}

Eigen::MatrixXd optimize_gating(const Eigen::MatrixXd& start, const Eigen::MatrixXd& y,
                                const Eigen::MatrixXd& resp, int max_steps) {
  const auto g_count = start.rows();
  if (g_count <= 1) return start;
  Eigen::MatrixXd w = start;
  double fw = gating_objective(w, y, resp);
  Eigen::MatrixXd best_w = w;
  double best_f = fw;
  for (int step = 0; step < max_steps; ++step) {
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const Eigen::VectorXd probs = log_softmax(w * y.row(i).transpose()).array().exp();
      grad += (resp.row(i).transpose() - probs) * y.row(i);
    }
    grad.row(0).setZero();  // reference class stays pinned
    const double gnorm = grad.norm();
    if (gnorm < 1e-10 * (1.0 + std::abs(fw))) break;
    double lr = 1.0 / (1.0 + static_cast<double>(y.rows()));
    bool accepted = false;
    for (int halving = 0; halving < 15; ++halving) {
      Eigen::MatrixXd wt = w + lr * grad;
      const double ft = gating_objective(wt, y, resp);
      if (ft > fw) {
        w = wt;
        fw = ft;
        accepted = true;
        break;
      }
      lr *= 0.5;
    }
    if (!accepted) break;
    if (fw > best_f) {
      best_f = fw;
      best_w = w;
    }
  }
  return best_w;
}

// --- k-means initialization over encoded static features ---

std::vector<int> kmeans_labels(const Eigen::MatrixXd& y, int clusters, int restarts,
                               std::uint64_t seed) {
  const auto n = y.rows();
  std::vector<int> best_labels(static_cast<std::size_t>(n), 0);
  if (clusters <= 1) return best_labels;
  double best_inertia = std::numeric_limits<double>::infinity();
  for (int rep = 0; rep < restarts; ++rep) {
    std::mt19937_64 rng = substream(seed, 0xbeef0000ULL + static_cast<std::uint64_t>(rep));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Eigen::MatrixXd centers(clusters, y.cols());
    for (int c = 0; c < clusters; ++c) centers.row(c) = y.row(order[static_cast<std::size_t>(c)]);
    std::vector<int> labels(static_cast<std::size_t>(n), 0);
    for (int iter = 0; iter < 50; ++iter) {
      bool changed = false;
      for (Eigen::Index i = 0; i < n; ++i) {
        int arg = 0;
        double best = (y.row(i) - centers.row(0)).squaredNorm();
        for (int c = 1; c < clusters; ++c) {
          const double d = (y.row(i) - centers.row(c)).squaredNorm();
          if (d < best) {
            best = d;
            arg = c;
          }
        }
        if (labels[static_cast<std::size_t>(i)] != arg) {
          labels[static_cast<std::size_t>(i)] = arg;
          changed = true;
        }
      }
      for (int c = 0; c < clusters; ++c) {
        Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(y.cols());
        int count = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
          if (labels[static_cast<std::size_t>(i)] == c) {
            sum += y.row(i);
            ++count;
          }
        }
        if (count > 0) {
          centers.row(c) = sum / count;
        } else {
          // Reseed an empty cluster on the point farthest from its center.
          Eigen::Index far = 0;
          double far_d = -1.0;
          for (Eigen::Index i = 0; i < n; ++i) {
            const double d =
                (y.row(i) - centers.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
            if (d > far_d) {
              far_d = d;
              far = i;
            }
          }
          centers.row(c) = y.row(far);
          labels[static_cast<std::size_t>(far)] = c;
          changed = true;
        }
      }
      if (!changed) break;
    }
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      inertia += (y.row(i) - centers.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
    if (inertia < best_inertia) {
      best_inertia = inertia;
      best_labels = labels;
    }
  }
  return best_labels;
}

// --- per-patient E-step output ---

struct PatientEStep {
  // log P(events | v_i, z) per phenotype
  Eigen::VectorXd loglik;
  // per z: (epoch, first, count) -> weight, sorted for deterministic reduction
  std::vector<std::vector<std::tuple<int, std::uint32_t, std::uint32_t, double>>> ranges;
  // per z: (epoch, duration or elapsed, weight)
  std::vector<std::vector<std::tuple<int, int, double>>> completed;
  std::vector<std::vector<std::tuple<int, int, double>>> censored;
  std::vector<Eigen::VectorXd> initial;  // per z: K posterior
  Eigen::VectorXd resp;                  // responsibilities over z
  double loglik_total = 0.0;             // log p(v_i) + lse_z
};

}  // namespace

std::pair<ModelParams, FitReport> em_fit(const Cohort& train, int phenotypes, int epochs,
                                         const EMConfig& config) {
  if (phenotypes < 1 || epochs < 1) throw ConfigError("phenotype and epoch counts must be >= 1");
  const std::size_t n = train.patients.size();
  if (n == 0) throw DataError("training cohort is empty");
  if (static_cast<std::size_t>(phenotypes) > n)
    throw DataError("more phenotypes than training patients");
  std::size_t icu_count = 0;
  for (const PatientRecord& r : train.patients) icu_count += r.outcome == Outcome::Icu ? 1 : 0;
  if (icu_count == 0 || icu_count == n)
    throw DataError("training cohort must contain both discharged and ICU outcomes");
  const int d = train.stream_count();
  if (d == 0) throw DataError("training cohort declares no streams");
  // The in-progress epoch needs floor(t) - s + 1 <= t_max with the last
  // possible start at (epochs-1) * t_max, so coverable horizons satisfy
  // floor(t) < epochs * t_max.
  for (const PatientRecord& r : train.patients)
    if (std::floor(r.endpoint_time) >= static_cast<double>(epochs) * config.t_max)
      throw DataError("patient '" + r.id + "' stay cannot be covered by epochs * t_max; raise t_max");

  const unsigned threads = resolve_threads(config.threads);

  ModelParams params;
  params.phenotype_count = phenotypes;
  params.epoch_count = epochs;
  params.rank = config.rank;
  params.stream_catalog = train.stream_catalog;
  params.standardization = fit_stream_stats(train);
  const StaticEncoder encoder = fit_static_encoder(train);
  params.encoding = EncodingMetadata{train.vocabulary, encoder.age_mean(), encoder.age_sd()};
  params.prior_icu = static_cast<double>(icu_count) / static_cast<double>(n);

  // Precompute per-patient standardized events, encodings, labels.
  std::vector<StandardizedEvents> events(n);
  std::vector<double> horizons(n);
  std::vector<int> labels(n);
  Eigen::MatrixXd y_all(static_cast<Eigen::Index>(n), encoder.dim());
  for (std::size_t i = 0; i < n; ++i) {
    const PatientRecord& r = train.patients[i];
    events[i] = standardize_events(r.events, params.standardization);
    horizons[i] = r.endpoint_time;
    labels[i] = static_cast<int>(r.outcome);
    y_all.row(static_cast<Eigen::Index>(i)) = encoder.encode(r.profile).transpose();
  }

  // --- initialization ---
  const std::vector<int> clusters = kmeans_labels(y_all, phenotypes, config.kmeans_restarts, config.seed);
  params.gating.w = Eigen::MatrixXd::Zero(phenotypes, encoder.dim());
  if (phenotypes > 1) {
    Eigen::MatrixXd hard = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), phenotypes);
    for (std::size_t i = 0; i < n; ++i) hard(static_cast<Eigen::Index>(i), clusters[i]) = 1.0;
    params.gating.w = optimize_gating(params.gating.w, y_all, hard, config.m_step_grad_steps);
  }

  // Per-(v, cluster) stream means of standardized values; global per-v fallback.
  Eigen::MatrixXd cell_mean[2] = {Eigen::MatrixXd::Zero(phenotypes, d),
                                  Eigen::MatrixXd::Zero(phenotypes, d)};
  Eigen::MatrixXd cell_count[2] = {Eigen::MatrixXd::Zero(phenotypes, d),
                                   Eigen::MatrixXd::Zero(phenotypes, d)};
  Eigen::VectorXd global_mean[2] = {Eigen::VectorXd::Zero(d), Eigen::VectorXd::Zero(d)};
  Eigen::VectorXd global_count[2] = {Eigen::VectorXd::Zero(d), Eigen::VectorXd::Zero(d)};
  double endpoint_mean[2] = {0.0, 0.0};
  double endpoint_count[2] = {0.0, 0.0};
  for (std::size_t i = 0; i < n; ++i) {
    const int v = labels[i];
    endpoint_mean[v] += horizons[i];
    endpoint_count[v] += 1.0;
    for (std::size_t j = 0; j < events[i].size(); ++j) {
      const int s = events[i].stream_ids[j];
      cell_mean[v](clusters[i], s) += events[i].values[j];
      cell_count[v](clusters[i], s) += 1.0;
      global_mean[v][s] += events[i].values[j];
      global_count[v][s] += 1.0;
    }
  }
  for (int v = 0; v < 2; ++v) {
    endpoint_mean[v] = endpoint_count[v] > 0 ? endpoint_mean[v] / endpoint_count[v] : 12.0;
    for (int s = 0; s < d; ++s)
      global_mean[v][s] = global_count[v][s] > 0 ? global_mean[v][s] / global_count[v][s] : 0.0;
  }

  std::mt19937_64 init_rng = substream(config.seed, 0xa11ce);
  std::normal_distribution<double> jitter(0.0, 1.0);
  params.models.resize(static_cast<std::size_t>(phenotypes));
  for (int z = 0; z < phenotypes; ++z) {
    for (int v = 0; v < 2; ++v) {
      TrajectoryModel m;
      m.initial.pi = Eigen::VectorXd::Constant(epochs, 1.0 / epochs);
      const double mean_duration = std::max(endpoint_mean[v] / epochs, 1.5);
      m.durations.t_max = config.t_max;
      m.durations.r = Eigen::VectorXd::Constant(epochs, 2.0);
      m.durations.p =
          Eigen::VectorXd::Constant(epochs, std::clamp(2.0 / (2.0 + mean_duration - 1.0), 0.01, 0.99));
      m.epochs.resize(static_cast<std::size_t>(epochs));
      for (int k = 0; k < epochs; ++k) {
        EpochKernelParams& e = m.epochs[static_cast<std::size_t>(k)];
        e.mean.resize(d);
        for (int s = 0; s < d; ++s) {
          const double base = cell_count[v](z, s) > 0 ? cell_mean[v](z, s) / cell_count[v](z, s)
                                                      : global_mean[v][s];
          e.mean[s] = base + 0.1 * jitter(init_rng);
        }
        e.task_factor.resize(d, config.rank);
        for (int s = 0; s < d; ++s)
          for (int c = 0; c < config.rank; ++c) e.task_factor(s, c) = 0.05 * jitter(init_rng);
        e.task_diag = Eigen::VectorXd::Constant(d, 0.5);
        e.noise = Eigen::VectorXd::Constant(d, 0.4);
        e.length_scale = std::clamp(6.0, config.length_scale_min, config.length_scale_max);
      }
      params.models[static_cast<std::size_t>(z)][static_cast<std::size_t>(v)] = std::move(m);
    }
  }

  // --- EM iterations ---
  FitReport report;
  report.seed = config.seed;
  const double log_prior[2] = {std::log1p(-params.prior_icu), std::log(params.prior_icu)};
  double previous_ll = kNegInf;

  for (int iter = 0; iter < config.max_iter; ++iter) {
    // E-step: exact segment posteriors per (patient, phenotype).
    std::vector<std::array<DurationTable, 2>> tables(static_cast<std::size_t>(phenotypes));
    for (int z = 0; z < phenotypes; ++z)
      for (int v = 0; v < 2; ++v)
        tables[static_cast<std::size_t>(z)][static_cast<std::size_t>(v)] =
            DurationTable::build(params.model(v, z).durations);
    std::vector<PatientEStep> estep(n);
    parallel_for(n, threads, [&](std::size_t i) {
      PatientEStep& out = estep[i];
      out.loglik.resize(phenotypes);
      out.ranges.resize(static_cast<std::size_t>(phenotypes));
      out.completed.resize(static_cast<std::size_t>(phenotypes));
      out.censored.resize(static_cast<std::size_t>(phenotypes));
      out.initial.resize(static_cast<std::size_t>(phenotypes));
      const int v = labels[i];
      for (int z = 0; z < phenotypes; ++z) {
        const SegmentPosteriors post =
            segment_posteriors(events[i], horizons[i], params.model(v, z),
                               tables[static_cast<std::size_t>(z)][static_cast<std::size_t>(v)]);
        out.loglik[z] = post.log_likelihood;
        out.initial[static_cast<std::size_t>(z)] = post.initial_posterior;
        std::map<std::tuple<int, std::uint32_t, std::uint32_t>, double> merged;
        auto& completed = out.completed[static_cast<std::size_t>(z)];
        auto& censored = out.censored[static_cast<std::size_t>(z)];
        for (const SegmentHypothesis& h : post.segments) {
          if (h.event_count > 0) {
            merged[{h.epoch, static_cast<std::uint32_t>(h.first_event),
                    static_cast<std::uint32_t>(h.event_count)}] += h.weight;
          }
          if (h.end_hour >= 0) {
            completed.emplace_back(h.epoch, h.end_hour - h.start_hour, h.weight);
          } else {
            const int elapsed = static_cast<int>(std::floor(horizons[i] - h.start_hour)) + 1;
            censored.emplace_back(h.epoch, elapsed, h.weight);
          }
        }
        auto& ranges = out.ranges[static_cast<std::size_t>(z)];
        ranges.reserve(merged.size());
        for (const auto& [key, w] : merged)
          ranges.emplace_back(std::get<0>(key), std::get<1>(key), std::get<2>(key), w);
      }
      const Eigen::VectorXd log_gamma =
          gating_log_probabilities(y_all.row(static_cast<Eigen::Index>(i)).transpose(), params.gating);
      Eigen::VectorXd joint = log_gamma + out.loglik;
      double lse = kNegInf;
      for (int z = 0; z < phenotypes; ++z) lse = log_sum_exp(lse, joint[z]);
      if (!std::isfinite(lse))
        throw NumericError("non-finite likelihood for patient '" + train.patients[i].id + "'");
      out.resp = (joint.array() - lse).exp();
      out.loglik_total = log_prior[v] + lse;
    });

    double observed_ll = 0.0;
    for (const PatientEStep& e : estep) observed_ll += e.loglik_total;
    if (!std::isfinite(observed_ll))
      throw NumericError("observed log-likelihood non-finite at EM iteration " + std::to_string(iter));
    report.loglik_trace.push_back(observed_ll);
    report.iterations = iter + 1;

    const double gain = observed_ll - previous_ll;
    if (iter > 0 && gain < config.tol * std::max(1.0, std::abs(previous_ll))) {
      report.converged = true;
      break;
    }
    previous_ll = observed_ll;
    if (iter + 1 == config.max_iter) break;  // keep params matching the last trace entry

    // Reduction in patient order (deterministic for any thread count).
    std::vector<std::vector<std::vector<WeightedRange>>> range_stats(2);
    std::vector<std::vector<DurationStats>> duration_stats(2);
    std::vector<std::vector<Eigen::VectorXd>> initial_stats(2);
    for (int v = 0; v < 2; ++v) {
      range_stats[v].resize(static_cast<std::size_t>(phenotypes) * epochs);
      duration_stats[v].resize(static_cast<std::size_t>(phenotypes) * epochs);
      for (auto& ds : duration_stats[v]) {
        ds.completed = Eigen::VectorXd::Zero(config.t_max + 1);
        ds.censored = Eigen::VectorXd::Zero(config.t_max + 1);
      }
      initial_stats[v].assign(static_cast<std::size_t>(phenotypes), Eigen::VectorXd::Zero(epochs));
    }
    Eigen::MatrixXd resp(static_cast<Eigen::Index>(n), phenotypes);
    for (std::size_t i = 0; i < n; ++i) {
      const int v = labels[i];
      const PatientEStep& e = estep[i];
      resp.row(static_cast<Eigen::Index>(i)) = e.resp.transpose();
      for (int z = 0; z < phenotypes; ++z) {
        const double rho = e.resp[z];
        if (rho <= 0.0) continue;
        const std::size_t base = static_cast<std::size_t>(z) * epochs;
        for (const auto& [k, first, count, w] : e.ranges[static_cast<std::size_t>(z)])
          range_stats[v][base + static_cast<std::size_t>(k)].push_back(
              {&events[i], first, count, rho * w});
        for (const auto& [k, t, w] : e.completed[static_cast<std::size_t>(z)])
          duration_stats[v][base + static_cast<std::size_t>(k)].completed[t] += rho * w;
        for (const auto& [k, t, w] : e.censored[static_cast<std::size_t>(z)])
          duration_stats[v][base + static_cast<std::size_t>(k)].censored[std::min(t, config.t_max)] +=
              rho * w;
        initial_stats[v][static_cast<std::size_t>(z)] += rho * e.initial[static_cast<std::size_t>(z)];
      }
    }

    // M-step: independent blocks, each kept at or above its current value.
    std::vector<std::pair<int, int>> vz_pairs;
    for (int v = 0; v < 2; ++v)
      for (int z = 0; z < phenotypes; ++z) vz_pairs.emplace_back(v, z);

    parallel_for(vz_pairs.size() * static_cast<std::size_t>(epochs), threads, [&](std::size_t job) {
      const auto [v, z] = vz_pairs[job / static_cast<std::size_t>(epochs)];
      const int k = static_cast<int>(job % static_cast<std::size_t>(epochs));
      const std::size_t slot = static_cast<std::size_t>(z) * epochs + static_cast<std::size_t>(k);
      TrajectoryModel& m = params.models[static_cast<std::size_t>(z)][static_cast<std::size_t>(v)];
      m.epochs[static_cast<std::size_t>(k)] =
          optimize_kernel_block(range_stats[v][slot], m.epochs[static_cast<std::size_t>(k)], config);
      const auto [r_new, p_new] = optimize_duration_block(
          m.durations.r[k], m.durations.p[k], config.t_max, duration_stats[v][slot],
          config.m_step_grad_steps);
      m.durations.r[k] = r_new;
      m.durations.p[k] = p_new;
    });

    for (int v = 0; v < 2; ++v) {
      for (int z = 0; z < phenotypes; ++z) {
        const Eigen::VectorXd& counts = initial_stats[v][static_cast<std::size_t>(z)];
        const double total = counts.sum();
        if (total > 1e-12)
          params.models[static_cast<std::size_t>(z)][static_cast<std::size_t>(v)].initial.pi =
              counts / total;
      }
    }
    if (phenotypes > 1)
      params.gating.w = optimize_gating(params.gating.w, y_all, resp, config.m_step_grad_steps);
  }

  params.validate();
  return {params, report};
}

SelectionResult select_model(const Cohort& train, std::span<const int> phenotype_range,
                             std::span<const int> epoch_range, const EMConfig& config) {
  if (phenotype_range.empty() || epoch_range.empty())
    throw ConfigError("model selection ranges must be non-empty");
  SelectionResult result;
  double best_bic = std::numeric_limits<double>::infinity();
  for (int g : phenotype_range) {
    for (int k : epoch_range) {
      auto [params, report] = em_fit(train, g, k, config);
      const double ll = total_log_likelihood(params, train, config.threads);
      const long p = count_parameters(g, k, params.stream_count(),
                                      params.encoding.encoder().dim(), params.rank);
      const double score =
          -2.0 * ll + static_cast<double>(p) * std::log(static_cast<double>(train.patients.size()));
      result.table.push_back({g, k, score, ll, report.iterations, report.converged});
      if (score < best_bic) {
        best_bic = score;
        result.best_phenotypes = g;
        result.best_epochs = k;
        result.params = std::move(params);
        result.report = std::move(report);
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

namespace {

json vec_to_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

json mat_to_json(const Eigen::MatrixXd& m) {
  json out = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    out.push_back(std::move(row));
  }
  return out;
}

Eigen::VectorXd vec_from_json(const json& j) {
  Eigen::VectorXd v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  return v;
}

Eigen::MatrixXd mat_from_json(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(i, c) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)].get<double>();
  return m;
}

json trajectory_to_json(const TrajectoryModel& m) {
  json j;
  j["initial"] = vec_to_json(m.initial.pi);
  j["durations"] = {{"r", vec_to_json(m.durations.r)},
                    {"p", vec_to_json(m.durations.p)},
                    {"t_max", m.durations.t_max}};
  json epochs = json::array();
  for (const EpochKernelParams& e : m.epochs) {
    epochs.push_back({{"mean", vec_to_json(e.mean)},
                      {"factor", mat_to_json(e.task_factor)},
                      {"diag", vec_to_json(e.task_diag)},
                      {"length_scale", e.length_scale},
                      {"noise", vec_to_json(e.noise)}});
  }
  j["epochs"] = std::move(epochs);
  return j;
}

TrajectoryModel trajectory_from_json(const json& j) {
  TrajectoryModel m;
  m.initial.pi = vec_from_json(j.at("initial"));
  m.durations.r = vec_from_json(j.at("durations").at("r"));
  m.durations.p = vec_from_json(j.at("durations").at("p"));
  m.durations.t_max = j.at("durations").at("t_max").get<int>();
  for (const auto& e : j.at("epochs")) {
    EpochKernelParams p;
    p.mean = vec_from_json(e.at("mean"));
    p.task_factor = mat_from_json(e.at("factor"));
    p.task_diag = vec_from_json(e.at("diag"));
    p.length_scale = e.at("length_scale").get<double>();
    p.noise = vec_from_json(e.at("noise"));
    m.epochs.push_back(std::move(p));
  }
  return m;
}

}  // namespace

std::string model_to_json(const ModelParams& params, const FitReport& report) {
  json j;
  j["schema_version"] = kModelSchemaVersion;
  j["phenotypes"] = params.phenotype_count;
  j["epochs"] = params.epoch_count;
  j["rank"] = params.rank;
  j["prior_icu"] = params.prior_icu;
  json catalog = json::array();
  for (const StreamInfo& s : params.stream_catalog)
    catalog.push_back({{"name", s.name}, {"unit", s.unit}});
  j["stream_catalog"] = std::move(catalog);
  j["vocabulary"] = {{"gender", params.encoding.vocabulary.gender},
                     {"admission_floor", params.encoding.vocabulary.admission_floor},
                     {"icd9_group", params.encoding.vocabulary.icd9_group},
                     {"transfer_status", params.encoding.vocabulary.transfer_status}};
  j["age_mean"] = params.encoding.age_mean;
  j["age_sd"] = params.encoding.age_sd;
  j["standardization"] = {{"mean", vec_to_json(params.standardization.mean)},
                          {"sd", vec_to_json(params.standardization.sd)}};
  j["gating"] = mat_to_json(params.gating.w);
  json models = json::array();
  for (const auto& pair : params.models)
    models.push_back({{"stable", trajectory_to_json(pair[0])},
                      {"deteriorating", trajectory_to_json(pair[1])}});
  j["models"] = std::move(models);
  json trace = json::array();
  for (double v : report.loglik_trace) trace.push_back(v);
  j["fit_report"] = {{"loglik_trace", std::move(trace)},
                     {"iterations", report.iterations},
                     {"converged", report.converged},
                     {"seed", report.seed}};
  return j.dump(2) + "\n";
}

void save_model(const ModelParams& params, const FitReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << model_to_json(params, report);
  if (!out) throw DataError("write failed for '" + path + "'");
}

std::pair<ModelParams, FitReport> model_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("invalid model JSON: ") + e.what());
  }
  try {
    if (!j.contains("schema_version") || j["schema_version"].get<int>() != kModelSchemaVersion)
      throw DataError("unsupported or missing model schema_version");
    ModelParams params;
    params.phenotype_count = j.at("phenotypes").get<int>();
    params.epoch_count = j.at("epochs").get<int>();
    params.rank = j.at("rank").get<int>();
    params.prior_icu = j.at("prior_icu").get<double>();
    for (const auto& s : j.at("stream_catalog"))
      params.stream_catalog.push_back({s.at("name").get<std::string>(),
                                       s.value("unit", std::string())});
    const json& vocab = j.at("vocabulary");
    params.encoding.vocabulary.gender = vocab.at("gender").get<std::vector<std::string>>();
    params.encoding.vocabulary.admission_floor =
        vocab.at("admission_floor").get<std::vector<std::string>>();
    params.encoding.vocabulary.icd9_group = vocab.at("icd9_group").get<std::vector<std::string>>();
    params.encoding.vocabulary.transfer_status =
        vocab.at("transfer_status").get<std::vector<std::string>>();
    params.encoding.age_mean = j.at("age_mean").get<double>();
    params.encoding.age_sd = j.at("age_sd").get<double>();
    params.standardization.mean = vec_from_json(j.at("standardization").at("mean"));
    params.standardization.sd = vec_from_json(j.at("standardization").at("sd"));
    params.gating.w = mat_from_json(j.at("gating"));
    for (const auto& m : j.at("models"))
      params.models.push_back({trajectory_from_json(m.at("stable")),
                               trajectory_from_json(m.at("deteriorating"))});
    FitReport report;
    const json& fr = j.at("fit_report");
    report.loglik_trace = fr.at("loglik_trace").get<std::vector<double>>();
    report.iterations = fr.at("iterations").get<int>();
    report.converged = fr.at("converged").get<bool>();
    report.seed = fr.at("seed").get<std::uint64_t>();
    params.validate();
    return {std::move(params), std::move(report)};
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed model document: ") + e.what());
  }
}

std::pair<ModelParams, FitReport> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return model_from_json(buffer.str());
}

}  // namespace wardrisk
