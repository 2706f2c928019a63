#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "wardrisk/cohort.hpp"
#include "wardrisk/mixture.hpp"

namespace wardrisk {

// Sampling law for static profiles; categorical fields draw from the model's
// vocabulary with optional per-field weights (uniform by default).
struct ProfileLaw {
  double age_mean = 60.0;
  double age_sd = 15.0;
  std::map<std::string, std::vector<double>> weights;  // by field name
};

struct SimConfig {
  int n = 100;
  std::uint64_t seed = 0;
  ModelParams params;  // generative truth
  double gap_min = 1.0;  // observation intervals, hours
  double gap_max = 4.0;
  // Panel mode samples all streams at shared times; asynchronous mode gives
  // every stream its own arrival chain.
  bool asynchronous_streams = false;
  ProfileLaw profile_law;
  unsigned threads = 0;
};

struct PatientTruth {
  std::string id;
  int z = 0;
  int v = 0;
  int start_epoch = 0;           // 0-based
  std::vector<int> boundaries;   // completed-epoch end hours; last = endpoint
};

struct SimResult {
  Cohort cohort;
  std::vector<PatientTruth> truth;
};

// Draws one patient from the generative model: profile -> z ~ gating ->
// v ~ Bernoulli(prior) -> start epoch -> truncated-NB durations -> per-epoch
// multi-task GP values at irregular times. The endpoint is the final epoch's
// end; truth labels are returned separately from the record.
std::pair<PatientRecord, PatientTruth> sample_patient(const SimConfig& config,
                                                      std::uint64_t patient_index);

// N independent substreams; byte-identical output for identical seeds under
// any thread count.
SimResult sample_cohort(const SimConfig& config);

void write_truth_csv(const std::vector<PatientTruth>& truth, const std::string& path);
std::vector<PatientTruth> read_truth_csv(const std::string& path);

// Built-in generative presets.
std::vector<StreamInfo> table1_stream_catalog();  // the 21-stream ward catalog
Vocabulary full_vocabulary();
Vocabulary compact_vocabulary();

// G=2, K=3, D=3 truth with phenotype means separated by >= 2 sd; used by the
// parameter-recovery and model-selection experiments.
ModelParams make_recovery_model();
// Same family tuned for the standard synthetic benchmark (prevalence 0.09).
ModelParams make_benchmark_model();
// G=4, K=12, D=21 operating point for full-scale simulation.
ModelParams make_paper_scale_model();

}  // namespace wardrisk
