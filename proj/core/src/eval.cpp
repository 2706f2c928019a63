#include "wardrisk/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "wardrisk/errors.hpp"
#include "wardrisk/numeric.hpp"
#include "wardrisk/parallel.hpp"

namespace wardrisk {

using json = nlohmann::ordered_json;

namespace {

int positive_count(std::span<const ScoreTrace> traces) {
  int n = 0;
  for (const ScoreTrace& t : traces) n += t.label == 1 ? 1 : 0;
  return n;
}

// Area under (TPR, PPV) by trapezoid: dedupe by TPR keeping the max PPV,
// sort ascending, extend the smallest-TPR PPV down to TPR 0.
double curve_auc(const std::vector<CurvePoint>& points) {
  std::map<double, double> by_tpr;
  for (const CurvePoint& p : points) {
    if (!p.ppv) continue;
    auto [it, inserted] = by_tpr.try_emplace(p.tpr, *p.ppv);
    if (!inserted) it->second = std::max(it->second, *p.ppv);
  }
  if (by_tpr.empty()) return 0.0;
  std::vector<std::pair<double, double>> pts(by_tpr.begin(), by_tpr.end());
  if (pts.front().first > 0.0) pts.insert(pts.begin(), {0.0, pts.front().second});
  double auc = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    auc += 0.5 * (pts[i].second + pts[i - 1].second) * (pts[i].first - pts[i - 1].first);
  return auc;
}

void check_tpr_monotone(const MetricCurve& curve) {
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    if (curve.points[i].threshold <= curve.points[i - 1].threshold)
      throw NumericError("metric curve thresholds are not strictly increasing");
    if (curve.points[i].tpr > curve.points[i - 1].tpr + 1e-12)
      throw NumericError("TPR failed to be non-increasing in the threshold");
  }
}

std::vector<double> sorted_unique(std::vector<double> grid) {
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  if (n == 0) return 0.0;
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

ThresholdMetrics apply_threshold(std::span<const ScoreTrace> traces, double threshold) {
  if (traces.empty()) throw DataError("no score traces to threshold");
  ThresholdMetrics out;
  int tp = 0, fp = 0, fn = 0;
  out.outcomes.reserve(traces.size());
  for (const ScoreTrace& t : traces) {
    AlarmOutcome o;
    o.patient_id = t.patient_id;
    o.label = t.label;
    o.endpoint_time = t.endpoint_time;
    for (const ScorePoint& p : t.points) {
      if (p.risk >= threshold) {
        o.alarmed = true;
        o.first_alarm_time = p.time;
        break;
      }
    }
    if (t.label == 1) {
      o.alarmed ? ++tp : ++fn;
    } else if (o.alarmed) {
      ++fp;
    }
    out.outcomes.push_back(std::move(o));
  }
  out.tpr = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  if (tp + fp > 0) out.ppv = static_cast<double>(tp) / (tp + fp);
  return out;
}

std::vector<double> default_threshold_grid() {
  std::vector<double> grid;
  grid.reserve(502);
  for (int i = 0; i <= 500; ++i) grid.push_back(static_cast<double>(i) / 500.0);
  grid.push_back(1.0 + 1e-9);  // no-alarm endpoint
  return grid;
}

std::vector<double> adaptive_threshold_grid(std::span<const ScoreTrace> traces) {
  std::vector<double> grid = default_threshold_grid();
  for (const ScoreTrace& t : traces) {
    double max_risk = 0.0;
    for (const ScorePoint& p : t.points) max_risk = std::max(max_risk, p.risk);
    grid.push_back(max_risk);
  }
  return sorted_unique(std::move(grid));
}

MetricCurve roc_curve(std::span<const ScoreTrace> traces, std::span<const double> grid) {
  if (grid.empty()) throw ConfigError("threshold grid is empty");
  const std::vector<double> thresholds = sorted_unique({grid.begin(), grid.end()});
  if (thresholds.front() > 0.0 || thresholds.back() < 1.0)
    throw ConfigError("threshold grid must cover [0, 1]");
  MetricCurve curve;
  curve.points.reserve(thresholds.size());
  for (double thr : thresholds) {
    const ThresholdMetrics m = apply_threshold(traces, thr);
    curve.points.push_back({thr, m.tpr, m.ppv, std::nullopt});
  }
  check_tpr_monotone(curve);
  curve.auc = curve_auc(curve.points);
  return curve;
}

MetricCurve timeliness_curve(std::span<const ScoreTrace> traces, double target_tpr,
                             std::span<const double> grid) {
  const int n_pos = positive_count(traces);
  if (n_pos == 0) throw DataError("timeliness target is unreachable: no positive patients");
  if (!(target_tpr > 0.0 && target_tpr <= 1.0)) throw ConfigError("target TPR must lie in (0, 1]");
  const double target_tp = target_tpr * n_pos;
  const std::vector<double> thresholds = sorted_unique({grid.begin(), grid.end()});
  MetricCurve curve;
  for (double thr : thresholds) {
    const ThresholdMetrics m = apply_threshold(traces, thr);
    const double tp = m.tpr * n_pos;
    if (std::abs(tp - target_tp) > 1.0 + 1e-9) continue;
    std::vector<double> leads;
    for (const AlarmOutcome& o : m.outcomes)
      if (o.label == 1 && o.alarmed) leads.push_back(o.endpoint_time - *o.first_alarm_time);
    curve.points.push_back({thr, m.tpr, m.ppv, median(std::move(leads))});
  }
  if (curve.points.empty())
    throw DataError("no threshold holds TPR within one patient of the target");
  check_tpr_monotone(curve);
  curve.auc = curve_auc(curve.points);
  return curve;
}

MetricCurve dual_threshold_eval(std::span<const ScoreTrace> traces, double lower,
                                std::span<const double> upper_grid) {
  if (upper_grid.empty()) throw ConfigError("upper threshold grid is empty");
  const std::vector<double> uppers = sorted_unique({upper_grid.begin(), upper_grid.end()});
  // lower = 0 never discharges anyone, so any upper grid is unambiguous.
  if (lower > 0.0 && lower >= uppers.front())
    throw ConfigError("lower threshold must be below the upper grid");
  const int n_pos = positive_count(traces);
  MetricCurve curve;
  curve.points.reserve(uppers.size());
  for (double upper : uppers) {
    int tp = 0, fp = 0;
    for (const ScoreTrace& t : traces) {
      bool alarmed = false;
      for (std::size_t j = 0; j < t.points.size(); ++j) {
        const double r = t.points[j].risk;
        // The admission prior point (j = 0) carries no evidence, so it can
        // alarm but never discharge.
        if (j > 0 && r < lower) break;
        if (r >= upper) {
          alarmed = true;
          break;
        }
      }
      if (alarmed) t.label == 1 ? ++tp : ++fp;
    }
    CurvePoint p;
    p.threshold = upper;
    p.tpr = n_pos > 0 ? static_cast<double>(tp) / n_pos : 0.0;
    if (tp + fp > 0) p.ppv = static_cast<double>(tp) / (tp + fp);
    curve.points.push_back(p);
  }
  check_tpr_monotone(curve);
  curve.auc = curve_auc(curve.points);
  return curve;
}

std::vector<ScoreTrace> score_cohort(const ModelParams& params, const Cohort& cohort,
                                     unsigned threads) {
  std::vector<ScoreTrace> traces(cohort.patients.size());
  parallel_for(cohort.patients.size(), threads, [&](std::size_t i) {
    const PatientRecord& r = cohort.patients[i];
    traces[i] = {r.id, static_cast<int>(r.outcome), r.endpoint_time, score_trajectory(params, r)};
  });
  return traces;
}

ScoreTrace snapshot_baseline(const ModelParams& params, const PatientRecord& record) {
  const StaticEncoder encoder = params.encoding.encoder();
  const Eigen::VectorXd log_gamma =
      gating_log_probabilities(encoder.encode(record.profile), params.gating);
  const int d = params.stream_count();
  const double log_prior[2] = {params.prior_icu < 1.0 ? std::log1p(-params.prior_icu) : kNegInf,
                               params.prior_icu > 0.0 ? std::log(params.prior_icu) : kNegInf};

  ScoreTrace trace{record.id, static_cast<int>(record.outcome), record.endpoint_time, {}};
  trace.points.reserve(record.events.size() + 1);
  trace.points.push_back({0.0, params.prior_icu});

  std::vector<double> latest(static_cast<std::size_t>(d));
  std::vector<bool> seen(static_cast<std::size_t>(d), false);
  double last_time = 0.0;
  for (const MeasurementEvent& e : record.events) {
    if (e.time < last_time) throw DataError("out-of-order event in record '" + record.id + "'");
    last_time = e.time;
    latest[static_cast<std::size_t>(e.stream_id)] =
        params.standardization.standardize(e.stream_id, e.value);
    seen[static_cast<std::size_t>(e.stream_id)] = true;
    double class_ll[2];
    for (int v = 0; v < 2; ++v) {
      LogSumExpAccumulator acc;
      for (int z = 0; z < params.phenotype_count; ++z) {
        if (log_gamma[z] == kNegInf) continue;
        const EpochKernelParams& kernel = params.model(v, z).epochs.front();
        const Eigen::MatrixXd task_cov = kernel.task_cov();
        double ll = 0.0;
        for (int s = 0; s < d; ++s) {
          if (!seen[static_cast<std::size_t>(s)]) continue;
          const double var = task_cov(s, s) + kernel.noise[s];
          const double resid = latest[static_cast<std::size_t>(s)] - kernel.mean[s];
          ll += -0.5 * (std::log(2.0 * M_PI * var) + resid * resid / var);
        }
        acc.add(log_gamma[z] + ll);
      }
      class_ll[v] = acc.value();
    }
    const double log_num = log_prior[1] + class_ll[1];
    const double log_den = log_sum_exp(log_num, log_prior[0] + class_ll[0]);
    if (log_den == kNegInf || std::isnan(log_den))
      throw NumericError("snapshot likelihood vanished under both hypotheses");
    trace.points.push_back({e.time, log_num == kNegInf ? 0.0 : std::exp(log_num - log_den)});
  }
  return trace;
}

std::vector<ScoreTrace> snapshot_cohort(const ModelParams& params, const Cohort& cohort,
                                        unsigned threads) {
  std::vector<ScoreTrace> traces(cohort.patients.size());
  parallel_for(cohort.patients.size(), threads,
               [&](std::size_t i) { traces[i] = snapshot_baseline(params, cohort.patients[i]); });
  return traces;
}

ScoreTrace stationary_baseline(const ModelParams& g1k1_params, const PatientRecord& record) {
  if (g1k1_params.phenotype_count != 1 || g1k1_params.epoch_count != 1)
    throw DataError("stationary baseline expects a G=1, K=1 model");
  return {record.id, static_cast<int>(record.outcome), record.endpoint_time,
          score_trajectory(g1k1_params, record)};
}

void write_scores_csv(std::span<const ScoreTrace> traces, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "patient_id,time,risk\n";
  char buf[64];
  for (const ScoreTrace& t : traces) {
    for (const ScorePoint& p : t.points) {
      out << t.patient_id << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", p.time);
      out << buf << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", p.risk);
      out << buf << '\n';
    }
  }
}

void write_curve_csv(const MetricCurve& curve, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  const bool has_lead =
      std::any_of(curve.points.begin(), curve.points.end(), [](const CurvePoint& p) {
        return p.lead_hours.has_value();
      });
  out << (has_lead ? "threshold,tpr,ppv,lead_hours\n" : "threshold,tpr,ppv\n");
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf;
  };
  for (const CurvePoint& p : curve.points) {
    put(p.threshold);
    out << ',';
    put(p.tpr);
    out << ',';
    if (p.ppv) put(*p.ppv);
    if (has_lead) {
      out << ',';
      if (p.lead_hours) put(*p.lead_hours);
    }
    out << '\n';
  }
}

void write_curve_svg(const MetricCurve& curve, const std::string& title, const std::string& path) {
  const bool timeliness =
      std::any_of(curve.points.begin(), curve.points.end(), [](const CurvePoint& p) {
        return p.lead_hours.has_value();
      });
  // Plot (TPR, PPV) for threshold curves, (PPV, lead) for timeliness curves.
  std::vector<std::pair<double, double>> xy;
  for (const CurvePoint& p : curve.points) {
    if (!p.ppv) continue;
    if (timeliness) {
      if (p.lead_hours) xy.emplace_back(*p.ppv, *p.lead_hours);
    } else {
      xy.emplace_back(p.tpr, *p.ppv);
    }
  }
  std::sort(xy.begin(), xy.end());
  double y_max = 1.0;
  for (const auto& [x, y] : xy) y_max = std::max(y_max, y);

  const double w = 640.0, h = 480.0, margin = 56.0;
  auto px = [&](double x) { return margin + x * (w - 2 * margin); };
  auto py = [&](double y) { return h - margin - (y / y_max) * (h - 2 * margin); };

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" "
         "viewBox=\"0 0 640 480\">\n";
  out << "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" "
                "stroke=\"black\"/>\n",
                margin, margin, w - 2 * margin, h - 2 * margin);
  out << buf;
  out << "<text x=\"320\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"16\">"
      << title << "</text>\n";
  const char* x_label = timeliness ? "PPV" : "TPR";
  const char* y_label = timeliness ? "median lead (h)" : "PPV";
  out << "<text x=\"320\" y=\"466\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"13\">"
      << x_label << "</text>\n";
  out << "<text x=\"16\" y=\"240\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"13\" transform=\"rotate(-90 16 240)\">"
      << y_label << "</text>\n";
  if (!xy.empty()) {
    out << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : xy) {
      std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", px(x), py(y));
      out << buf;
    }
    out << "\"/>\n";
  }
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"12\">auc=%.4f"
                "</text>\n",
                margin + 8.0, margin + 18.0, curve.auc);
  out << buf;
  out << "</svg>\n";
}

BenchmarkReport run_benchmark(const Cohort& train, const Cohort& test, const BenchmarkConfig& config) {
  auto [full_params, full_report] = em_fit(train, config.phenotypes, config.epochs, config.em);
  // The single-epoch ablation must cover whole stays with one duration law.
  EMConfig stationary_em = config.em;
  double max_endpoint = 0.0;
  for (const PatientRecord& r : train.patients) max_endpoint = std::max(max_endpoint, r.endpoint_time);
  for (const PatientRecord& r : test.patients) max_endpoint = std::max(max_endpoint, r.endpoint_time);
  stationary_em.t_max = std::max(config.em.t_max, static_cast<int>(std::floor(max_endpoint)) + 1);
  auto [stationary_params, stationary_report] = em_fit(train, 1, 1, stationary_em);

  const std::vector<std::vector<ScoreTrace>> traces = {
      score_cohort(full_params, test, config.threads),
      score_cohort(stationary_params, test, config.threads),
      snapshot_cohort(stationary_params, test, config.threads)};
  return benchmark_from_traces(traces, {"full", "stationary", "snapshot"}, config.target_tpr);
}

BenchmarkReport benchmark_from_traces(const std::vector<std::vector<ScoreTrace>>& traces,
                                      std::vector<std::string> scorers, double target_tpr) {
  if (traces.size() != scorers.size()) throw ConfigError("one trace set per scorer is required");
  BenchmarkReport report;
  report.scorers = std::move(scorers);
  std::vector<MetricCurve> timeliness;
  for (const auto& tr : traces) {
    const std::vector<double> grid = adaptive_threshold_grid(tr);
    auto above = [&](double lower) {
      std::vector<double> g;
      for (double t : grid)
        if (t > lower) g.push_back(t);
      return g;
    };
    report.auc_icu.push_back(roc_curve(tr, grid).auc);
    report.auc_discharge_001.push_back(dual_threshold_eval(tr, 0.01, above(0.01)).auc);
    report.auc_discharge_005.push_back(dual_threshold_eval(tr, 0.05, above(0.05)).auc);
    report.auc_discharge_02.push_back(dual_threshold_eval(tr, 0.2, above(0.2)).auc);
    timeliness.push_back(timeliness_curve(tr, target_tpr, grid));
  }

  // Compare lead times at a PPV every scorer can reach: the smallest of the
  // per-scorer best PPVs over the TPR band.
  double matched = std::numeric_limits<double>::infinity();
  for (const MetricCurve& c : timeliness) {
    double best = 0.0;
    for (const CurvePoint& p : c.points)
      if (p.ppv) best = std::max(best, *p.ppv);
    matched = std::min(matched, best);
  }
  report.matched_ppv = matched;
  for (const MetricCurve& c : timeliness) {
    double lead = 0.0;
    double closest_ppv = std::numeric_limits<double>::infinity();
    for (const CurvePoint& p : c.points) {
      if (!p.ppv || *p.ppv < matched - 1e-12) continue;
      if (*p.ppv < closest_ppv) {
        closest_ppv = *p.ppv;
        lead = p.lead_hours.value_or(0.0);
      }
    }
    report.lead_hours_at_target_tpr.push_back(lead);
  }
  return report;
}

std::string benchmark_report_json(const BenchmarkReport& report) {
  json j;
  j["scorers"] = report.scorers;
  auto row = [&](const std::vector<double>& values) {
    json r;
    for (std::size_t i = 0; i < report.scorers.size(); ++i) r[report.scorers[i]] = values[i];
    return r;
  };
  j["rows"] = {{"auc_icu", row(report.auc_icu)},
               {"auc_discharge_0.01", row(report.auc_discharge_001)},
               {"auc_discharge_0.05", row(report.auc_discharge_005)},
               {"auc_discharge_0.2", row(report.auc_discharge_02)},
               {"median_lead_hours", row(report.lead_hours_at_target_tpr)}};
  j["matched_ppv"] = report.matched_ppv;
  return j.dump(2) + "\n";
}

}  // namespace wardrisk
