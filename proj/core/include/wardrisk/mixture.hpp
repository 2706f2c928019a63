#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "wardrisk/cohort.hpp"
#include "wardrisk/likelihood.hpp"
#include "wardrisk/trajectory.hpp"

namespace wardrisk {

// Phenotype gating weights over encoded static features. Row 0 is pinned to
// zero (reference class) for identifiability.
struct GatingParams {
  Eigen::MatrixXd w;  // G x F

  int phenotype_count() const { return static_cast<int>(w.rows()); }
};

Eigen::VectorXd gating_probabilities(const Eigen::VectorXd& y_encoded, const GatingParams& gating);
Eigen::VectorXd gating_log_probabilities(const Eigen::VectorXd& y_encoded, const GatingParams& gating);

struct EncodingMetadata {
  Vocabulary vocabulary;
  double age_mean = 0.0;
  double age_sd = 1.0;

  StaticEncoder encoder() const { return StaticEncoder(vocabulary, age_mean, age_sd); }
};

// Full trained artifact: per phenotype z, trajectory laws for the stable
// (v=0) and deteriorating (v=1) status; gating; class prior; the feature
// encoding and standardization needed to apply it to raw records.
struct ModelParams {
  int phenotype_count = 1;  // G
  int epoch_count = 1;      // K
  int rank = 3;             // task covariance factor rank
  double prior_icu = 0.09;  // P(V=1)
  std::vector<std::array<TrajectoryModel, 2>> models;  // [z][v]
  GatingParams gating;
  std::vector<StreamInfo> stream_catalog;
  EncodingMetadata encoding;
  StreamStats standardization;

  int stream_count() const { return static_cast<int>(stream_catalog.size()); }
  const TrajectoryModel& model(int v, int z) const {
    return models[static_cast<std::size_t>(z)][static_cast<std::size_t>(v)];
  }
  void validate() const;
};

struct FitReport {
  std::vector<double> loglik_trace;  // observed-data log likelihood per EM iteration
  int iterations = 0;
  bool converged = false;
  std::uint64_t seed = 0;
};

struct EMConfig {
  int max_iter = 100;
  double tol = 1e-4;  // relative log-likelihood gain
  int m_step_grad_steps = 25;
  int rank = 3;
  int t_max = 168;
  double length_scale_min = kDefaultLengthScaleMin;
  double length_scale_max = kDefaultLengthScaleMax;
  int kmeans_restarts = 5;
  std::uint64_t seed = 0;
  unsigned threads = 0;  // 0 resolves to WARDRISK_THREADS / hardware
  double adam_learning_rate = 0.05;
};

// log P(events in [0, horizon] | H_v, y) = log sum_z gamma_z(y) L_{v,z}.
double class_conditional_log_likelihood(std::span<const MeasurementEvent> events, double horizon,
                                        const Eigen::VectorXd& y_encoded, int v,
                                        const ModelParams& params);

// Generalized EM over latent phenotypes and segmentations; outcome labels are
// observed, so v=0 models train on discharged stays and v=1 on ICU stays.
std::pair<ModelParams, FitReport> em_fit(const Cohort& train, int phenotypes, int epochs,
                                         const EMConfig& config);

// Free parameter count for BIC.
long count_parameters(int phenotypes, int epochs, int streams, int features, int rank);

double total_log_likelihood(const ModelParams& params, const Cohort& cohort, unsigned threads = 0);
double bic(const ModelParams& params, const Cohort& cohort, unsigned threads = 0);

struct SelectionEntry {
  int phenotypes = 0;
  int epochs = 0;
  double bic = 0.0;
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct SelectionResult {
  int best_phenotypes = 0;
  int best_epochs = 0;
  ModelParams params;
  FitReport report;
  std::vector<SelectionEntry> table;
};

SelectionResult select_model(const Cohort& train, std::span<const int> phenotype_range,
                             std::span<const int> epoch_range, const EMConfig& config);

// Versioned JSON persistence of the trained artifact.
inline constexpr int kModelSchemaVersion = 1;
void save_model(const ModelParams& params, const FitReport& report, const std::string& path);
std::string model_to_json(const ModelParams& params, const FitReport& report);
std::pair<ModelParams, FitReport> load_model(const std::string& path);
std::pair<ModelParams, FitReport> model_from_json(const std::string& text);

}  // namespace wardrisk
