#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace wardrisk {

// Static admission fields. Categorical values must come from the cohort's
// declared vocabulary; ICD-9 codes are pre-grouped to top-level chapters.
struct StaticProfile {
  double age = 0.0;
  std::string gender;
  std::string admission_floor;
  bool stem_cell_transplant = false;
  std::string icd9_group;
  std::string transfer_status;

  bool operator==(const StaticProfile&) const = default;
};

struct MeasurementEvent {
  int stream_id = 0;
  double time = 0.0;   // hours since admission
  double value = 0.0;  // raw stream units

  bool operator==(const MeasurementEvent&) const = default;
};

enum class Outcome : int { Discharged = 0, Icu = 1 };

struct PatientRecord {
  std::string id;
  StaticProfile profile;
  std::vector<MeasurementEvent> events;  // sorted by (time, stream_id)
  Outcome outcome = Outcome::Discharged;
  double endpoint_time = 0.0;  // last moment of the ward stay
  // Wall-clock admission stamp, when the source carries one; used only by
  // time-cutoff splits.
  std::optional<double> admission_time;

  bool operator==(const PatientRecord&) const = default;
};

struct StreamInfo {
  std::string name;
  std::string unit;

  bool operator==(const StreamInfo&) const = default;
};

// Declared value sets for the categorical profile fields, in encoding order.
// stem_cell_transplant is boolean and always encodes as a {false,true} block.
struct Vocabulary {
  std::vector<std::string> gender;
  std::vector<std::string> admission_floor;
  std::vector<std::string> icd9_group;
  std::vector<std::string> transfer_status;

  bool operator==(const Vocabulary&) const = default;
};

struct Cohort {
  std::vector<StreamInfo> stream_catalog;
  Vocabulary vocabulary;
  std::vector<PatientRecord> patients;

  int stream_count() const { return static_cast<int>(stream_catalog.size()); }

  bool operator==(const Cohort&) const = default;
};

struct ParseOptions {
  // Endpoint bounds are permissive by default; real-shaped data is validated
  // with [4, 2700].
  double endpoint_min = 0.0;
  double endpoint_max = std::numeric_limits<double>::infinity();
};

inline ParseOptions real_shaped_bounds() { return ParseOptions{4.0, 2700.0}; }

// Newline-delimited JSON: header object (stream_catalog, vocabulary) on line
// 1, one patient object per following line. Throws DataError naming the line
// / field / patient on any schema or invariant violation.
Cohort parse_cohort(const std::string& path, const ParseOptions& opts = {});
Cohort parse_cohort_string(const std::string& text, const ParseOptions& opts = {});

void serialize_cohort(const Cohort& cohort, const std::string& path);
std::string serialize_cohort_string(const Cohort& cohort);

// Flat event dump (patient_id,stream,time,value) for eyeballing.
void export_events_csv(const Cohort& cohort, const std::string& path);

void validate_cohort(const Cohort& cohort, const ParseOptions& opts = {});

// Encodes static profiles as [intercept, standardized age, one-hot blocks].
// Age statistics come from the training set.
class StaticEncoder {
 public:
  StaticEncoder() = default;
  StaticEncoder(Vocabulary vocabulary, double age_mean, double age_sd);

  Eigen::VectorXd encode(const StaticProfile& profile) const;  // throws DataError on unknown value
  int dim() const { return dim_; }

  const Vocabulary& vocabulary() const { return vocabulary_; }
  double age_mean() const { return age_mean_; }
  double age_sd() const { return age_sd_; }

 private:
  Vocabulary vocabulary_;
  double age_mean_ = 0.0;
  double age_sd_ = 1.0;
  int dim_ = 0;
};

// Fits the age statistics on a cohort and pairs them with its vocabulary.
StaticEncoder fit_static_encoder(const Cohort& cohort);

struct FractionSplit {
  double train_fraction = 0.5;
  std::uint64_t seed = 0;
};

struct TimeCutoffSplit {
  double cutoff = 0.0;  // admission_time < cutoff goes to train
};

struct SplitResult {
  Cohort train;
  Cohort test;
  std::vector<std::string> warnings;
};

SplitResult split_cohort(const Cohort& cohort, const FractionSplit& rule);
SplitResult split_cohort(const Cohort& cohort, const TimeCutoffSplit& rule);

}  // namespace wardrisk
