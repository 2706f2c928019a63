#include "wardrisk/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <Eigen/Cholesky>

#include "wardrisk/errors.hpp"
#include "wardrisk/parallel.hpp"
#include "wardrisk/rng.hpp"

namespace wardrisk {

namespace {

int categorical_draw(std::mt19937_64& rng, std::size_t cardinality, const std::vector<double>* weights) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng);
  if (!weights || weights->size() != cardinality) {
    const auto idx = static_cast<int>(u * static_cast<double>(cardinality));
    return std::min(idx, static_cast<int>(cardinality) - 1);
  }
  double total = 0.0;
  for (double w : *weights) total += w;
  if (total <= 0.0) throw ConfigError("profile law weights must have positive mass");
  double cum = 0.0;
  for (std::size_t i = 0; i < cardinality; ++i) {
    cum += (*weights)[i] / total;
    if (u < cum) return static_cast<int>(i);
  }
  return static_cast<int>(cardinality) - 1;
}

const std::vector<double>* field_weights(const ProfileLaw& law, const char* field) {
  auto it = law.weights.find(field);
  return it == law.weights.end() ? nullptr : &it->second;
}

StaticProfile sample_profile(const SimConfig& config, std::mt19937_64& rng) {
  const Vocabulary& vocab = config.params.encoding.vocabulary;
  const ProfileLaw& law = config.profile_law;
  StaticProfile p;
  std::normal_distribution<double> age(law.age_mean, law.age_sd);
  p.age = std::clamp(age(rng), 0.0, 130.0);
  p.gender = vocab.gender[static_cast<std::size_t>(
      categorical_draw(rng, vocab.gender.size(), field_weights(law, "gender")))];
  p.admission_floor = vocab.admission_floor[static_cast<std::size_t>(categorical_draw(
      rng, vocab.admission_floor.size(), field_weights(law, "admission_floor")))];
  p.stem_cell_transplant = categorical_draw(rng, 2, field_weights(law, "stem_cell_transplant")) == 1;
  p.icd9_group = vocab.icd9_group[static_cast<std::size_t>(
      categorical_draw(rng, vocab.icd9_group.size(), field_weights(law, "icd9_group")))];
  p.transfer_status = vocab.transfer_status[static_cast<std::size_t>(categorical_draw(
      rng, vocab.transfer_status.size(), field_weights(law, "transfer_status")))];
  return p;
}

// Observation time chains over [0, endpoint); shared across streams in panel
// mode, one chain per stream otherwise.
std::vector<ObsPoint> sample_observation_times(const SimConfig& config, double endpoint,
                                               std::mt19937_64& rng) {
  std::uniform_real_distribution<double> gap(config.gap_min, config.gap_max);
  std::vector<ObsPoint> obs;
  const int d = config.params.stream_count();
  if (config.asynchronous_streams) {
    for (int s = 0; s < d; ++s) {
      double t = gap(rng);
      while (t < endpoint) {
        obs.push_back({s, t});
        t += gap(rng);
      }
    }
  } else {
    double t = gap(rng);
    while (t < endpoint) {
      for (int s = 0; s < d; ++s) obs.push_back({s, t});
      t += gap(rng);
    }
  }
  std::sort(obs.begin(), obs.end(), [](const ObsPoint& a, const ObsPoint& b) {
    return a.time != b.time ? a.time < b.time : a.stream_id < b.stream_id;
  });
  return obs;
}

Eigen::VectorXd sample_epoch_values(const std::vector<ObsPoint>& obs, const EpochKernelParams& kernel,
                                    std::mt19937_64& rng) {
  const auto n = static_cast<Eigen::Index>(obs.size());
  const std::vector<int> labels(obs.size(), 0);
  Eigen::MatrixXd cov = assemble_covariance(obs, labels, std::span<const EpochKernelParams>(&kernel, 1));
  Eigen::LLT<Eigen::MatrixXd> llt;
  for (double nugget : {0.0, 1e-8, 1e-6, 1e-4}) {
    Eigen::MatrixXd attempt = cov;
    attempt.diagonal().array() += nugget;
    llt.compute(attempt);
    if (llt.info() == Eigen::Success) break;
  }
  if (llt.info() != Eigen::Success)
    throw NumericError("degenerate epoch covariance while sampling");
  std::normal_distribution<double> unit(0.0, 1.0);
  Eigen::VectorXd white(n);
  for (Eigen::Index i = 0; i < n; ++i) white[i] = unit(rng);
  Eigen::VectorXd values = llt.matrixL() * white;
  for (Eigen::Index i = 0; i < n; ++i) values[i] += kernel.mean[obs[static_cast<std::size_t>(i)].stream_id];
  return values;
}

}  // namespace

std::pair<PatientRecord, PatientTruth> sample_patient(const SimConfig& config,
                                                      std::uint64_t patient_index) {
  const ModelParams& params = config.params;
  std::mt19937_64 rng = substream(config.seed, patient_index);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  PatientRecord record;
  PatientTruth truth;
  {
    std::ostringstream id;
    id << "p" << std::setw(6) << std::setfill('0') << patient_index;
    record.id = id.str();
    truth.id = record.id;
  }
  record.profile = sample_profile(config, rng);

  const StaticEncoder encoder = params.encoding.encoder();
  const Eigen::VectorXd gamma = gating_probabilities(encoder.encode(record.profile), params.gating);
  {
    const double u = unit(rng);
    double cum = 0.0;
    truth.z = params.phenotype_count - 1;
    for (int z = 0; z < params.phenotype_count; ++z) {
      cum += gamma[z];
      if (u < cum) {
        truth.z = z;
        break;
      }
    }
  }
  truth.v = unit(rng) < params.prior_icu ? 1 : 0;
  record.outcome = truth.v == 1 ? Outcome::Icu : Outcome::Discharged;

  const TrajectoryModel& model = params.model(truth.v, truth.z);
  const DurationTable table = DurationTable::build(model.durations);
  {
    const double u = unit(rng);
    double cum = 0.0;
    truth.start_epoch = model.epoch_count() - 1;
    for (int k = 0; k < model.epoch_count(); ++k) {
      cum += model.initial.pi[k];
      if (u < cum) {
        truth.start_epoch = k;
        break;
      }
    }
  }
  int end_hour = 0;
  for (int k = truth.start_epoch; k < model.epoch_count(); ++k) {
    end_hour += sample_duration(unit(rng), k, table);
    truth.boundaries.push_back(end_hour);
  }
  record.endpoint_time = static_cast<double>(end_hour);

  const std::vector<ObsPoint> all_obs = sample_observation_times(config, record.endpoint_time, rng);
  record.events.reserve(all_obs.size());
  std::size_t at = 0;
  for (std::size_t seg = 0; seg < truth.boundaries.size(); ++seg) {
    const int epoch = truth.start_epoch + static_cast<int>(seg);
    const double end = truth.boundaries[seg];
    std::vector<ObsPoint> epoch_obs;
    while (at < all_obs.size() && all_obs[at].time < end) epoch_obs.push_back(all_obs[at++]);
    if (epoch_obs.empty()) continue;
    const Eigen::VectorXd values =
        sample_epoch_values(epoch_obs, model.epochs[static_cast<std::size_t>(epoch)], rng);
    for (std::size_t i = 0; i < epoch_obs.size(); ++i) {
      record.events.push_back(
          {epoch_obs[i].stream_id, epoch_obs[i].time,
           params.standardization.destandardize(epoch_obs[i].stream_id, values[static_cast<Eigen::Index>(i)])});
    }
  }
  return {std::move(record), std::move(truth)};
}

SimResult sample_cohort(const SimConfig& config) {
  if (config.n < 1) throw ConfigError("simulation needs n >= 1 patients");
  if (!(config.gap_min > 0.0) || config.gap_max < config.gap_min)
    throw ConfigError("observation intervals must satisfy 0 < gap_min <= gap_max");
  config.params.validate();

  SimResult result;
  result.cohort.stream_catalog = config.params.stream_catalog;
  result.cohort.vocabulary = config.params.encoding.vocabulary;
  result.cohort.patients.resize(static_cast<std::size_t>(config.n));
  result.truth.resize(static_cast<std::size_t>(config.n));
  parallel_for(static_cast<std::size_t>(config.n), config.threads, [&](std::size_t i) {
    auto [record, truth] = sample_patient(config, i);
    result.cohort.patients[i] = std::move(record);
    result.truth[i] = std::move(truth);
  });
  return result;
}

void write_truth_csv(const std::vector<PatientTruth>& truth, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "patient_id,z,v,start_epoch,boundaries\n";
  for (const PatientTruth& t : truth) {
    out << t.id << ',' << t.z << ',' << t.v << ',' << t.start_epoch << ',';
    for (std::size_t i = 0; i < t.boundaries.size(); ++i) {
      if (i > 0) out << ';';
      out << t.boundaries[i];
    }
    out << '\n';
  }
}

std::vector<PatientTruth> read_truth_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open truth file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("truth file is empty");
  std::vector<PatientTruth> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    PatientTruth t;
    std::string field;
    std::getline(row, t.id, ',');
    std::getline(row, field, ',');
    t.z = std::stoi(field);
    std::getline(row, field, ',');
    t.v = std::stoi(field);
    std::getline(row, field, ',');
    t.start_epoch = std::stoi(field);
    std::getline(row, field, ',');
    std::istringstream bounds(field);
    std::string b;
    while (std::getline(bounds, b, ';'))
      if (!b.empty()) t.boundaries.push_back(std::stoi(b));
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// presets
// ---------------------------------------------------------------------------

namespace {

struct StreamSpec {
  const char* name;
  const char* unit;
  double mean;
  double sd;
};

constexpr StreamSpec kWardStreams[] = {
    {"diastolic_bp", "mmHg", 70.0, 12.0},
    {"eye_opening", "score", 3.6, 0.7},
    {"glasgow_coma_score", "score", 13.5, 2.2},
    {"heart_rate", "bpm", 86.0, 16.0},
    {"respiratory_rate", "breaths/min", 19.0, 4.5},
    {"temperature", "degC", 37.0, 0.7},
    {"o2_device_assistance", "level", 1.2, 1.1},
    {"o2_saturation", "%", 96.0, 2.5},
    {"best_motor_response", "score", 5.6, 0.8},
    {"best_verbal_response", "score", 4.4, 1.1},
    {"systolic_bp", "mmHg", 122.0, 18.0},
    {"glucose", "mg/dL", 132.0, 45.0},
    {"urea_nitrogen", "mg/dL", 22.0, 14.0},
    {"white_blood_cell", "1e3/uL", 9.5, 5.0},
    {"creatinine", "mg/dL", 1.1, 0.9},
    {"hemoglobin", "g/dL", 10.8, 2.2},
    {"platelet_count", "1e3/uL", 220.0, 110.0},
    {"potassium", "mEq/L", 4.1, 0.5},
    {"sodium", "mEq/L", 138.0, 4.2},
    {"total_co2", "mEq/L", 24.0, 3.5},
    {"chloride", "mEq/L", 103.0, 4.8},
};

EpochKernelParams make_epoch(const Eigen::VectorXd& mean, const Eigen::MatrixXd& factor,
                             const Eigen::VectorXd& diag, double length_scale,
                             const Eigen::VectorXd& noise) {
  EpochKernelParams e;
  e.mean = mean;
  e.task_factor = factor;
  e.task_diag = diag;
  e.length_scale = length_scale;
  e.noise = noise;
  return e;
}

Eigen::VectorXd nb_p_for_mean(double r, const Eigen::VectorXd& means) {
  Eigen::VectorXd p(means.size());
  for (Eigen::Index i = 0; i < means.size(); ++i) p[i] = r / (r + means[i] - 1.0);
  return p;
}

}  // namespace

std::vector<StreamInfo> table1_stream_catalog() {
  std::vector<StreamInfo> catalog;
  for (const StreamSpec& s : kWardStreams) catalog.push_back({s.name, s.unit});
  return catalog;
}

Vocabulary full_vocabulary() {
  Vocabulary v;
  v.gender = {"female", "male"};
  v.admission_floor = {"cardiac_observation", "cardiothoracic", "hematology_stem_cell",
                       "liver_transplant"};
  v.icd9_group = {"infectious",     "neoplasms",    "endocrine_metabolic", "blood",
                  "mental",         "nervous",      "circulatory",         "respiratory",
                  "digestive",      "genitourinary", "pregnancy",          "skin",
                  "musculoskeletal", "congenital",   "perinatal",           "symptoms_illdefined",
                  "injury_poisoning", "supplementary_v", "supplementary_e"};
  v.transfer_status = {"direct_admission", "internal_transfer", "external_transfer"};
  return v;
}

Vocabulary compact_vocabulary() {
  Vocabulary v;
  v.gender = {"female", "male"};
  v.admission_floor = {"medical", "surgical"};
  v.icd9_group = {"infectious", "circulatory", "respiratory"};
  v.transfer_status = {"direct_admission", "internal_transfer"};
  return v;
}

namespace {

ModelParams desk_scale_skeleton() {
  ModelParams params;
  params.phenotype_count = 2;
  params.epoch_count = 3;
  params.rank = 1;
  params.stream_catalog = {{"heart_rate", "bpm"}, {"respiratory_rate", "breaths/min"},
                           {"creatinine", "mg/dL"}};
  params.encoding.vocabulary = compact_vocabulary();
  params.encoding.age_mean = 60.0;
  params.encoding.age_sd = 15.0;
  params.standardization.mean = Eigen::Vector3d(80.0, 18.0, 1.0);
  params.standardization.sd = Eigen::Vector3d(12.0, 4.0, 0.4);
  return params;
}

void fill_durations(TrajectoryModel& m, int v) {
  m.durations.t_max = 30;
  if (v == 0) {
    m.durations.r = Eigen::VectorXd::Constant(3, 4.0);
    m.durations.p = nb_p_for_mean(4.0, Eigen::Vector3d(6.0, 7.0, 8.0));
    m.initial.pi = Eigen::Vector3d(0.5, 0.3, 0.2);
  } else {
    m.durations.r = Eigen::VectorXd::Constant(3, 3.0);
    m.durations.p = nb_p_for_mean(3.0, Eigen::Vector3d(5.0, 4.0, 3.0));
    m.initial.pi = Eigen::Vector3d(0.45, 0.35, 0.2);
  }
}

}  // namespace

ModelParams make_recovery_model() {
  ModelParams params = desk_scale_skeleton();
  params.prior_icu = 0.35;

  const StaticEncoder encoder = params.encoding.encoder();
  params.gating.w = Eigen::MatrixXd::Zero(2, encoder.dim());
  // Layout: [1, age, gender(2), floor(2), stem(2), icd9(3), transfer(2)].
  params.gating.w.row(1) << 0.0, 0.3, -1.2, 1.2, 0.0, 0.0, 0.0, 0.0, -2.5, 2.5, 0.0, 0.0, 0.0;

  const Eigen::MatrixXd factor = (Eigen::MatrixXd(3, 1) << 0.5, 0.4, 0.3).finished();
  const Eigen::Vector3d diag(0.35, 0.40, 0.45);
  const Eigen::Vector3d noise(0.15, 0.20, 0.20);

  // Stream 2 carries a constant 3-sd phenotype offset in every epoch (the
  // identifiability anchor); deterioration drifts stream 0 upward for
  // phenotype 0 and stream 1 downward for phenotype 1, so trajectories from
  // different phenotypes never meet.
  const Eigen::Vector3d means[2][2][3] = {
      {{Eigen::Vector3d(0.0, 0.0, 0.0), Eigen::Vector3d(0.35, -0.3, 0.2),
        Eigen::Vector3d(-0.3, 0.3, -0.2)},
       {Eigen::Vector3d(0.4, 0.0, 0.0), Eigen::Vector3d(1.0, -0.2, 0.15),
        Eigen::Vector3d(1.8, 0.25, -0.1)}},
      {{Eigen::Vector3d(3.0, 3.0, 3.0), Eigen::Vector3d(3.35, 2.7, 3.2),
        Eigen::Vector3d(2.7, 3.3, 2.8)},
       {Eigen::Vector3d(3.0, 2.6, 3.0), Eigen::Vector3d(3.2, 2.0, 3.1),
        Eigen::Vector3d(2.85, 1.2, 2.9)}}};

  params.models.resize(2);
  for (int z = 0; z < 2; ++z) {
    for (int v = 0; v < 2; ++v) {
      TrajectoryModel m;
      for (int k = 0; k < 3; ++k)
        m.epochs.push_back(make_epoch(means[z][v][k], factor, diag, 4.0, noise));
      fill_durations(m, v);
      params.models[static_cast<std::size_t>(z)][static_cast<std::size_t>(v)] = std::move(m);
    }
  }
  params.validate();
  return params;
}

ModelParams make_benchmark_model() {
  ModelParams params = desk_scale_skeleton();
  params.prior_icu = 0.09;

  const StaticEncoder encoder = params.encoding.encoder();
  params.gating.w = Eigen::MatrixXd::Zero(2, encoder.dim());
  params.gating.w.row(1) << 0.0, 0.3, -1.0, 1.0, 0.0, 0.0, 0.0, 0.0, -2.0, 2.0, 0.0, 0.0, 0.0;

  const Eigen::MatrixXd factor = (Eigen::MatrixXd(3, 1) << 0.5, 0.4, 0.3).finished();
  const Eigen::Vector3d diag(0.35, 0.40, 0.45);
  const Eigen::Vector3d noise(0.15, 0.20, 0.20);

  // Deterioration runs in opposite directions per phenotype, so collapsing
  // the phenotypes or the epochs costs a single-model fit real likelihood.
  const Eigen::Vector3d base[2] = {Eigen::Vector3d(0.0, 0.0, 0.0), Eigen::Vector3d(2.0, 2.0, 2.0)};
  const Eigen::Vector3d wiggle[3] = {Eigen::Vector3d(0.0, 0.0, 0.0),
                                     Eigen::Vector3d(0.2, -0.1, 0.1),
                                     Eigen::Vector3d(0.0, 0.1, -0.1)};
  const Eigen::Vector3d drift0[3] = {Eigen::Vector3d(0.3, 0.2, 0.2), Eigen::Vector3d(0.9, 0.7, 0.6),
                                     Eigen::Vector3d(1.6, 1.3, 1.2)};
  const Eigen::Vector3d drift1[3] = {Eigen::Vector3d(-0.3, -0.2, -0.2),
                                     Eigen::Vector3d(-0.9, -0.7, -0.6),
                                     Eigen::Vector3d(-1.6, -1.3, -1.2)};

  params.models.resize(2);
  for (int z = 0; z < 2; ++z) {
    for (int v = 0; v < 2; ++v) {
      TrajectoryModel m;
      const double ell = 7.0 - z - v;
      for (int k = 0; k < 3; ++k) {
        Eigen::Vector3d mean = base[z] + wiggle[k];
        if (v == 1) mean += z == 0 ? drift0[k] : drift1[k];
        m.epochs.push_back(make_epoch(mean, factor, diag, ell, noise));
      }
      fill_durations(m, v);
      params.models[static_cast<std::size_t>(z)][static_cast<std::size_t>(v)] = std::move(m);
    }
  }
  params.validate();
  return params;
}

ModelParams make_paper_scale_model() {
  ModelParams params;
  const int g = 4, k_count = 12, d = 21;
  params.phenotype_count = g;
  params.epoch_count = k_count;
  params.rank = 3;
  params.prior_icu = 0.09;
  params.stream_catalog = table1_stream_catalog();
  params.encoding.vocabulary = full_vocabulary();
  params.encoding.age_mean = 58.0;
  params.encoding.age_sd = 16.0;
  params.standardization.mean.resize(d);
  params.standardization.sd.resize(d);
  for (int s = 0; s < d; ++s) {
    params.standardization.mean[s] = kWardStreams[s].mean;
    params.standardization.sd[s] = kWardStreams[s].sd;
  }

  const StaticEncoder encoder = params.encoding.encoder();
  params.gating.w = Eigen::MatrixXd::Zero(g, encoder.dim());
  for (int z = 1; z < g; ++z)
    for (int f = 2; f < encoder.dim(); ++f)
      params.gating.w(z, f) = 0.8 * std::sin(1.1 * f + 2.0 * z);

  params.models.resize(static_cast<std::size_t>(g));
  for (int z = 0; z < g; ++z) {
    for (int v = 0; v < 2; ++v) {
      TrajectoryModel m;
      for (int k = 0; k < k_count; ++k) {
        Eigen::VectorXd mean(d);
        Eigen::MatrixXd factor(d, 3);
        for (int s = 0; s < d; ++s) {
          mean[s] = 0.3 * std::sin(0.7 * s + z);
          if (v == 1)
            mean[s] += 1.2 * (static_cast<double>(k) / (k_count - 1)) * std::cos(0.5 * s + 1.3 * z);
          for (int c = 0; c < 3; ++c) factor(s, c) = 0.25 * std::sin(0.9 * s + 2.1 * c + z);
        }
        m.epochs.push_back(make_epoch(mean, factor, Eigen::VectorXd::Constant(d, 0.4),
                                      6.0 + z + (k % 3), Eigen::VectorXd::Constant(d, 0.3)));
      }
      m.durations.t_max = 168;
      m.durations.r = Eigen::VectorXd::Constant(k_count, 3.0);
      Eigen::VectorXd means(k_count);
      for (int k = 0; k < k_count; ++k) means[k] = 10.0 + 0.5 * k;
      m.durations.p = nb_p_for_mean(3.0, means);
      Eigen::VectorXd pi(k_count);
      for (int k = 0; k < k_count; ++k) pi[k] = std::exp(-0.25 * k);
      m.initial.pi = pi / pi.sum();
      params.models[static_cast<std::size_t>(z)][static_cast<std::size_t>(v)] = std::move(m);
    }
  }
  params.validate();
  return params;
}

}  // namespace wardrisk
