#include "wardrisk/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "wardrisk/errors.hpp"

namespace wardrisk {

using json = nlohmann::ordered_json;

namespace {

[[noreturn]] void fail(const std::string& context, const std::string& message) {
  throw DataError(context + ": " + message);
}

const json& require(const json& obj, const char* key, const std::string& context) {
  auto it = obj.find(key);
  if (it == obj.end()) fail(context, std::string("missing field '") + key + "'");
  return *it;
}

double require_finite_number(const json& v, const char* key, const std::string& context) {
  if (!v.is_number()) fail(context, std::string("field '") + key + "' is not a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) fail(context, std::string("field '") + key + "' is not finite");
  return x;
}

std::string require_string(const json& v, const char* key, const std::string& context) {
  if (!v.is_string()) fail(context, std::string("field '") + key + "' is not a string");
  return v.get<std::string>();
}

std::vector<std::string> require_string_array(const json& v, const char* key, const std::string& context) {
  if (!v.is_array()) fail(context, std::string("field '") + key + "' is not an array");
  std::vector<std::string> out;
  out.reserve(v.size());
  for (const auto& e : v) out.push_back(require_string(e, key, context));
  return out;
}

bool contains(const std::vector<std::string>& values, const std::string& v) {
  return std::find(values.begin(), values.end(), v) != values.end();
}

void check_vocab_unique(const std::vector<std::string>& values, const char* field) {
  for (std::size_t i = 0; i < values.size(); ++i)
    for (std::size_t j = i + 1; j < values.size(); ++j)
      if (values[i] == values[j])
        fail("header", std::string("vocabulary for '") + field + "' repeats value '" + values[i] + "'");
}

json profile_to_json(const StaticProfile& p) {
  json j;
  j["age"] = p.age;
  j["gender"] = p.gender;
  j["admission_floor"] = p.admission_floor;
  j["stem_cell_transplant"] = p.stem_cell_transplant;
  j["icd9_group"] = p.icd9_group;
  j["transfer_status"] = p.transfer_status;
  return j;
}

StaticProfile profile_from_json(const json& j, const std::string& context) {
  StaticProfile p;
  p.age = require_finite_number(require(j, "age", context), "age", context);
  p.gender = require_string(require(j, "gender", context), "gender", context);
  p.admission_floor = require_string(require(j, "admission_floor", context), "admission_floor", context);
  const json& sct = require(j, "stem_cell_transplant", context);
  if (!sct.is_boolean()) fail(context, "field 'stem_cell_transplant' is not a boolean");
  p.stem_cell_transplant = sct.get<bool>();
  p.icd9_group = require_string(require(j, "icd9_group", context), "icd9_group", context);
  p.transfer_status = require_string(require(j, "transfer_status", context), "transfer_status", context);
  return p;
}

void validate_patient(const PatientRecord& r, const Cohort& cohort, const ParseOptions& opts) {
  const std::string ctx = "patient '" + r.id + "'";
  if (!(r.profile.age >= 0.0 && r.profile.age <= 130.0)) fail(ctx, "age outside [0, 130]");
  if (!contains(cohort.vocabulary.gender, r.profile.gender))
    fail(ctx, "gender '" + r.profile.gender + "' not in vocabulary");
  if (!contains(cohort.vocabulary.admission_floor, r.profile.admission_floor))
    fail(ctx, "admission_floor '" + r.profile.admission_floor + "' not in vocabulary");
  if (!contains(cohort.vocabulary.icd9_group, r.profile.icd9_group))
    fail(ctx, "icd9_group '" + r.profile.icd9_group + "' not in vocabulary");
  if (!contains(cohort.vocabulary.transfer_status, r.profile.transfer_status))
    fail(ctx, "transfer_status '" + r.profile.transfer_status + "' not in vocabulary");
  if (!std::isfinite(r.endpoint_time)) fail(ctx, "endpoint_time is not finite");
  if (r.endpoint_time < opts.endpoint_min || r.endpoint_time > opts.endpoint_max)
    fail(ctx, "endpoint_time outside configured bounds");
  const int d = cohort.stream_count();
  for (std::size_t i = 0; i < r.events.size(); ++i) {
    const MeasurementEvent& e = r.events[i];
    if (e.stream_id < 0 || e.stream_id >= d) fail(ctx, "event stream_id outside stream catalog");
    if (!std::isfinite(e.time) || e.time < 0.0) fail(ctx, "event time must be finite and >= 0");
    if (!std::isfinite(e.value)) fail(ctx, "event value is not finite");
    if (e.time > r.endpoint_time) fail(ctx, "event time exceeds endpoint_time");
    if (i > 0) {
      const MeasurementEvent& prev = r.events[i - 1];
      if (e.time < prev.time || (e.time == prev.time && e.stream_id < prev.stream_id))
        fail(ctx, "events out of (time, stream_id) order");
    }
  }
  if (r.admission_time && !std::isfinite(*r.admission_time)) fail(ctx, "admission_time is not finite");
}

Cohort subset(const Cohort& cohort, const std::vector<std::size_t>& idx) {
  Cohort out;
  out.stream_catalog = cohort.stream_catalog;
  out.vocabulary = cohort.vocabulary;
  out.patients.reserve(idx.size());
  for (std::size_t i : idx) out.patients.push_back(cohort.patients[i]);
  return out;
}

}  // namespace

void validate_cohort(const Cohort& cohort, const ParseOptions& opts) {
  check_vocab_unique(cohort.vocabulary.gender, "gender");
  check_vocab_unique(cohort.vocabulary.admission_floor, "admission_floor");
  check_vocab_unique(cohort.vocabulary.icd9_group, "icd9_group");
  check_vocab_unique(cohort.vocabulary.transfer_status, "transfer_status");
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    for (std::size_t j = i + 1; j < cohort.patients.size(); ++j)
      if (cohort.patients[i].id == cohort.patients[j].id)
        fail("cohort", "duplicate patient id '" + cohort.patients[i].id + "'");
  }
  for (const PatientRecord& r : cohort.patients) validate_patient(r, cohort, opts);
}

Cohort parse_cohort_string(const std::string& text, const ParseOptions& opts) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  Cohort cohort;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail("line " + std::to_string(line_no), std::string("invalid JSON: ") + e.what());
    }
    const std::string ctx = "line " + std::to_string(line_no);
    if (!have_header) {
      const json& catalog = require(j, "stream_catalog", ctx);
      if (!catalog.is_array()) fail(ctx, "stream_catalog is not an array");
      for (const auto& s : catalog) {
        StreamInfo info;
        info.name = require_string(require(s, "name", ctx), "name", ctx);
        info.unit = s.contains("unit") ? require_string(s["unit"], "unit", ctx) : "";
        cohort.stream_catalog.push_back(std::move(info));
      }
      const json& vocab = require(j, "vocabulary", ctx);
      cohort.vocabulary.gender = require_string_array(require(vocab, "gender", ctx), "gender", ctx);
      cohort.vocabulary.admission_floor =
          require_string_array(require(vocab, "admission_floor", ctx), "admission_floor", ctx);
      cohort.vocabulary.icd9_group =
          require_string_array(require(vocab, "icd9_group", ctx), "icd9_group", ctx);
      cohort.vocabulary.transfer_status =
          require_string_array(require(vocab, "transfer_status", ctx), "transfer_status", ctx);
      have_header = true;
      continue;
    }
    PatientRecord r;
    r.id = require_string(require(j, "id", ctx), "id", ctx);
    const std::string pctx = ctx + ", patient '" + r.id + "'";
    r.profile = profile_from_json(require(j, "profile", pctx), pctx);
    const json& events = require(j, "events", pctx);
    if (!events.is_array()) fail(pctx, "events is not an array");
    r.events.reserve(events.size());
    for (const auto& e : events) {
      if (!e.is_array() || e.size() != 3) fail(pctx, "event is not a [stream_id,time,value] triple");
      MeasurementEvent ev;
      if (!e[0].is_number_integer()) fail(pctx, "event stream_id is not an integer");
      ev.stream_id = e[0].get<int>();
      ev.time = require_finite_number(e[1], "time", pctx);
      ev.value = require_finite_number(e[2], "value", pctx);
      r.events.push_back(ev);
    }
    const json& outcome = require(j, "outcome", pctx);
    if (!outcome.is_number_integer() || (outcome.get<int>() != 0 && outcome.get<int>() != 1))
      fail(pctx, "outcome must be 0 or 1");
    r.outcome = outcome.get<int>() == 1 ? Outcome::Icu : Outcome::Discharged;
    r.endpoint_time = require_finite_number(require(j, "endpoint_time", pctx), "endpoint_time", pctx);
    if (j.contains("admission_time"))
      r.admission_time = require_finite_number(j["admission_time"], "admission_time", pctx);
    cohort.patients.push_back(std::move(r));
  }
  if (!have_header) fail("file", "missing header line with stream_catalog and vocabulary");
  validate_cohort(cohort, opts);
  return cohort;
}

Cohort parse_cohort(const std::string& path, const ParseOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open cohort file '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_cohort_string(buffer.str(), opts);
}

std::string serialize_cohort_string(const Cohort& cohort) {
  std::ostringstream out;
  json header;
  json catalog = json::array();
  for (const StreamInfo& s : cohort.stream_catalog) catalog.push_back({{"name", s.name}, {"unit", s.unit}});
  header["stream_catalog"] = std::move(catalog);
  header["vocabulary"] = {{"gender", cohort.vocabulary.gender},
                          {"admission_floor", cohort.vocabulary.admission_floor},
                          {"icd9_group", cohort.vocabulary.icd9_group},
                          {"transfer_status", cohort.vocabulary.transfer_status}};
  out << header.dump() << '\n';
  for (const PatientRecord& r : cohort.patients) {
    json j;
    j["id"] = r.id;
    j["profile"] = profile_to_json(r.profile);
    json events = json::array();
    for (const MeasurementEvent& e : r.events) events.push_back({e.stream_id, e.time, e.value});
    j["events"] = std::move(events);
    j["outcome"] = static_cast<int>(r.outcome);
    j["endpoint_time"] = r.endpoint_time;
    if (r.admission_time) j["admission_time"] = *r.admission_time;
    out << j.dump() << '\n';
  }
  return out.str();
}

void serialize_cohort(const Cohort& cohort, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << serialize_cohort_string(cohort);
  if (!out) throw DataError("write failed for '" + path + "'");
}

void export_events_csv(const Cohort& cohort, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "patient_id,stream,time,value\n";
  char buf[64];
  for (const PatientRecord& r : cohort.patients) {
    for (const MeasurementEvent& e : r.events) {
      out << r.id << ',' << cohort.stream_catalog[e.stream_id].name << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", e.time);
      out << buf << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", e.value);
      out << buf << '\n';
    }
  }
}

StaticEncoder::StaticEncoder(Vocabulary vocabulary, double age_mean, double age_sd)
    : vocabulary_(std::move(vocabulary)), age_mean_(age_mean), age_sd_(age_sd > 1e-12 ? age_sd : 1.0) {
  dim_ = 2 + static_cast<int>(vocabulary_.gender.size() + vocabulary_.admission_floor.size() + 2 +
                              vocabulary_.icd9_group.size() + vocabulary_.transfer_status.size());
}

namespace {

int vocab_index(const std::vector<std::string>& values, const std::string& v, const char* field) {
  auto it = std::find(values.begin(), values.end(), v);
  if (it == values.end())
    throw DataError(std::string("unknown ") + field + " value '" + v + "'");
  return static_cast<int>(it - values.begin());
}

}  // namespace

Eigen::VectorXd StaticEncoder::encode(const StaticProfile& p) const {
  Eigen::VectorXd y = Eigen::VectorXd::Zero(dim_);
  int at = 0;
  y[at++] = 1.0;
  y[at++] = (p.age - age_mean_) / age_sd_;
  y[at + vocab_index(vocabulary_.gender, p.gender, "gender")] = 1.0;
  at += static_cast<int>(vocabulary_.gender.size());
  y[at + vocab_index(vocabulary_.admission_floor, p.admission_floor, "admission_floor")] = 1.0;
  at += static_cast<int>(vocabulary_.admission_floor.size());
  y[at + (p.stem_cell_transplant ? 1 : 0)] = 1.0;
  at += 2;
  y[at + vocab_index(vocabulary_.icd9_group, p.icd9_group, "icd9_group")] = 1.0;
  at += static_cast<int>(vocabulary_.icd9_group.size());
  y[at + vocab_index(vocabulary_.transfer_status, p.transfer_status, "transfer_status")] = 1.0;
  return y;
}

StaticEncoder fit_static_encoder(const Cohort& cohort) {
  double mean = 0.0;
  for (const PatientRecord& r : cohort.patients) mean += r.profile.age;
  const std::size_t n = cohort.patients.size();
  if (n > 0) mean /= static_cast<double>(n);
  double var = 0.0;
  for (const PatientRecord& r : cohort.patients) {
    const double d = r.profile.age - mean;
    var += d * d;
  }
  const double sd = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
  return StaticEncoder(cohort.vocabulary, mean, sd);
}

SplitResult split_cohort(const Cohort& cohort, const FractionSplit& rule) {
  if (!(rule.train_fraction >= 0.0 && rule.train_fraction <= 1.0))
    throw ConfigError("train_fraction must lie in [0, 1]");
  const std::size_t n = cohort.patients.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(rule.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(rule.train_fraction * static_cast<double>(n)));
  std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  // Stable patient order inside each side keeps downstream runs reproducible.
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  SplitResult result{subset(cohort, train_idx), subset(cohort, test_idx), {}};
  if (result.train.patients.empty() && n > 0) result.warnings.push_back("train side is empty");
  if (result.test.patients.empty() && n > 0) result.warnings.push_back("test side is empty");
  return result;
}

SplitResult split_cohort(const Cohort& cohort, const TimeCutoffSplit& rule) {
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;
  bool missing_stamp = false;
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    const auto& stamp = cohort.patients[i].admission_time;
    if (!stamp) {
      missing_stamp = true;
      train_idx.push_back(i);
    } else if (*stamp < rule.cutoff) {
      train_idx.push_back(i);
    } else {
      test_idx.push_back(i);
    }
  }
  SplitResult result{subset(cohort, train_idx), subset(cohort, test_idx), {}};
  if (missing_stamp) result.warnings.push_back("records without admission_time were assigned to train");
  if (result.train.patients.empty() && !cohort.patients.empty())
    result.warnings.push_back("cutoff precedes all admissions; train side is empty");
  if (result.test.patients.empty() && !cohort.patients.empty())
    result.warnings.push_back("cutoff follows all admissions; test side is empty");
  return result;
}

}  // namespace wardrisk
