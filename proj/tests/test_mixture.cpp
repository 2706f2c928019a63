#include <doctest.h>

#include <cmath>
#include <random>

#include "wardrisk/errors.hpp"
#include "wardrisk/mixture.hpp"
#include "wardrisk/numeric.hpp"
#include "wardrisk/simulator.hpp"
#include "oracles.hpp"

using namespace wardrisk;

TEST_CASE("gating probabilities") {
  SUBCASE("zero weights give the uniform distribution") {
    GatingParams g{Eigen::MatrixXd::Zero(4, 3)};
    const Eigen::VectorXd y = Eigen::Vector3d(1.0, -2.0, 0.5);
    const Eigen::VectorXd probs = gating_probabilities(y, g);
    for (int z = 0; z < 4; ++z) CHECK(probs[z] == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("single phenotype is certain") {
    GatingParams g{Eigen::MatrixXd::Zero(1, 2)};
    CHECK(gating_probabilities(Eigen::Vector2d(3.0, 4.0), g)[0] == 1.0);
  }
  SUBCASE("adding a constant row shift leaves the softmax unchanged") {
    std::mt19937_64 rng(41);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd w(3, 4);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j) w(i, j) = normal(rng);
    Eigen::VectorXd y(4);
    for (int j = 0; j < 4; ++j) y[j] = normal(rng);
    Eigen::VectorXd shift(4);
    for (int j = 0; j < 4; ++j) shift[j] = normal(rng);
    Eigen::MatrixXd w2 = w;
    for (int i = 0; i < 3; ++i) w2.row(i) += shift.transpose();
    const Eigen::VectorXd a = gating_probabilities(y, {w});
    const Eigen::VectorXd b = gating_probabilities(y, {w2});
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("simplex under extreme logits") {
    GatingParams g{(Eigen::MatrixXd(2, 1) << 0.0, 1000.0).finished()};
    const Eigen::VectorXd probs = gating_probabilities(Eigen::VectorXd::Ones(1), g);
    CHECK(std::isfinite(probs[0]));
    CHECK(probs.sum() == doctest::Approx(1.0).epsilon(1e-12));
    GatingParams h{(Eigen::MatrixXd(2, 1) << 0.0, -1000.0).finished()};
    const Eigen::VectorXd probs2 = gating_probabilities(Eigen::VectorXd::Ones(1), h);
    CHECK(probs2.sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

namespace {

ModelParams tiny_params(int phenotypes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelParams params;
  params.phenotype_count = phenotypes;
  params.epoch_count = 2;
  params.rank = 1;
  params.prior_icu = 0.2;
  params.stream_catalog = {{"hr", "bpm"}, {"rr", "bpm"}};
  params.encoding.vocabulary = compact_vocabulary();
  params.encoding.age_mean = 55.0;
  params.encoding.age_sd = 10.0;
  params.standardization.mean = Eigen::Vector2d(80.0, 18.0);
  params.standardization.sd = Eigen::Vector2d(10.0, 4.0);
  const int f = params.encoding.encoder().dim();
  params.gating.w = Eigen::MatrixXd::Zero(phenotypes, f);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int z = 1; z < phenotypes; ++z)
    for (int j = 0; j < f; ++j) params.gating.w(z, j) = 0.5 * normal(rng);
  for (int z = 0; z < phenotypes; ++z) {
    std::array<TrajectoryModel, 2> pair;
    pair[0] = oracles::random_trajectory_model(rng, 2, 2, 1, 20);
    pair[1] = oracles::random_trajectory_model(rng, 2, 2, 1, 20);
    params.models.push_back(std::move(pair));
  }
  params.validate();
  return params;
}

std::vector<MeasurementEvent> tiny_events() {
  return {{0, 1.2, 85.0}, {1, 2.0, 17.0}, {0, 3.5, 90.0}};
}

StaticProfile tiny_profile() {
  return {57.0, "female", "medical", false, "circulatory", "direct_admission"};
}

}  // namespace

TEST_CASE("class-conditional likelihood") {
  SUBCASE("G=1 reduces exactly to the trajectory likelihood") {
    const ModelParams params = tiny_params(1, 50);
    const std::vector<MeasurementEvent> events = tiny_events();
    const Eigen::VectorXd y = params.encoding.encoder().encode(tiny_profile());
    const double got = class_conditional_log_likelihood(events, 4.0, y, 1, params);
    const StandardizedEvents ev = standardize_events(events, params.standardization);
    CHECK(got == trajectory_log_likelihood(ev, 4.0, params.model(1, 0)));
  }
  SUBCASE("G=2 matches a direct two-term sum") {
    const ModelParams params = tiny_params(2, 51);
    const std::vector<MeasurementEvent> events = tiny_events();
    const Eigen::VectorXd y = params.encoding.encoder().encode(tiny_profile());
    const double got = class_conditional_log_likelihood(events, 4.0, y, 0, params);
    const StandardizedEvents ev = standardize_events(events, params.standardization);
    const Eigen::VectorXd gamma = gating_probabilities(y, params.gating);
    const double l0 = trajectory_log_likelihood(ev, 4.0, params.model(0, 0));
    const double l1 = trajectory_log_likelihood(ev, 4.0, params.model(0, 1));
    const double want = std::log(gamma[0] * std::exp(l0) + gamma[1] * std::exp(l1));
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
  }
  SUBCASE("concentrated gating collapses to the selected phenotype") {
    ModelParams params = tiny_params(2, 52);
    params.gating.w.row(1).setZero();
    params.gating.w(1, 0) = 200.0;  // intercept column: phenotype 1 certain
    const std::vector<MeasurementEvent> events = tiny_events();
    const Eigen::VectorXd y = params.encoding.encoder().encode(tiny_profile());
    const double got = class_conditional_log_likelihood(events, 4.0, y, 0, params);
    const StandardizedEvents ev = standardize_events(events, params.standardization);
    const double want = trajectory_log_likelihood(ev, 4.0, params.model(0, 1));
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
  }
  SUBCASE("phenotype label permutation leaves the value unchanged") {
    ModelParams params = tiny_params(3, 53);
    const std::vector<MeasurementEvent> events = tiny_events();
    const Eigen::VectorXd y = params.encoding.encoder().encode(tiny_profile());
    const double before = class_conditional_log_likelihood(events, 4.0, y, 1, params);
    ModelParams permuted = params;
    const std::vector<int> perm = {2, 0, 1};
    for (int z = 0; z < 3; ++z) {
      permuted.models[static_cast<std::size_t>(z)] = params.models[static_cast<std::size_t>(perm[z])];
      permuted.gating.w.row(z) = params.gating.w.row(perm[z]);
    }
    const double after = class_conditional_log_likelihood(events, 4.0, y, 1, permuted);
    CHECK(after == doctest::Approx(before).epsilon(1e-12));
  }
}

TEST_CASE("parameter counting") {
  CHECK(count_parameters(1, 1, 1, 0, 0) == 13);
  SUBCASE("doubling G more than doubles the count") {
    const long p1 = count_parameters(2, 3, 4, 10, 2);
    const long p2 = count_parameters(4, 3, 4, 10, 2);
    CHECK(p2 > 2 * p1 - 1);  // gating rows grow with G
  }
  SUBCASE("reflection tally over an actual parameter set") {
    const ModelParams params = tiny_params(2, 54);
    long tally = 1;  // prior
    tally += (params.phenotype_count - 1) * params.encoding.encoder().dim();
    for (const auto& pair : params.models) {
      for (const TrajectoryModel& m : pair) {
        for (const EpochKernelParams& e : m.epochs)
          tally += e.mean.size() + e.task_factor.size() + e.task_diag.size() + 1 + e.noise.size();
        tally += m.durations.r.size() + m.durations.p.size();
        tally += m.initial.pi.size() - 1;
      }
    }
    CHECK(tally == count_parameters(params.phenotype_count, params.epoch_count,
                                    params.stream_count(), params.encoding.encoder().dim(),
                                    params.rank));
  }
}

TEST_CASE("BIC ordering") {
  SimConfig sim;
  sim.params = make_recovery_model();
  sim.n = 40;
  sim.seed = 5;
  const Cohort cohort = sample_cohort(sim).cohort;

  // A two-phenotype model whose components are identical clones of a G=1
  // model has exactly the same likelihood but more parameters.
  ModelParams small = tiny_params(1, 55);
  small.stream_catalog = cohort.stream_catalog;
  small.standardization.mean = Eigen::Vector3d(80.0, 18.0, 1.0);
  small.standardization.sd = Eigen::Vector3d(12.0, 4.0, 0.4);
  std::mt19937_64 rng(56);
  small.models[0][0] = oracles::random_trajectory_model(rng, 2, 3, 1, 100);
  small.models[0][1] = oracles::random_trajectory_model(rng, 2, 3, 1, 100);

  ModelParams cloned = small;
  cloned.phenotype_count = 2;
  cloned.models.push_back(small.models[0]);
  cloned.gating.w = Eigen::MatrixXd::Zero(2, small.encoding.encoder().dim());

  const double ll_small = total_log_likelihood(small, cohort);
  const double ll_cloned = total_log_likelihood(cloned, cohort);
  CHECK(ll_small == doctest::Approx(ll_cloned).epsilon(1e-10));
  CHECK(bic(cloned, cohort) > bic(small, cohort));

  SUBCASE("equal parameter counts make BIC differences pure likelihood") {
    ModelParams other = small;
    other.models[0][0] = oracles::random_trajectory_model(rng, 2, 3, 1, 100);
    const double delta_bic = bic(other, cohort) - bic(small, cohort);
    const double delta_ll = total_log_likelihood(other, cohort) - ll_small;
    CHECK(delta_bic == doctest::Approx(-2.0 * delta_ll).epsilon(1e-9));
  }
}

TEST_CASE("em_fit rejects degenerate cohorts") {
  Cohort empty;
  empty.stream_catalog = {{"hr", "bpm"}};
  empty.vocabulary = compact_vocabulary();
  EMConfig config;
  CHECK_THROWS_AS(em_fit(empty, 1, 1, config), DataError);

  SimConfig sim;
  sim.params = make_recovery_model();
  sim.n = 20;
  sim.seed = 9;
  Cohort one_class = sample_cohort(sim).cohort;
  for (PatientRecord& r : one_class.patients) r.outcome = Outcome::Discharged;
  CHECK_THROWS_AS(em_fit(one_class, 1, 1, config), DataError);
}

TEST_CASE("em_fit trace is monotone and deterministic") {
  SimConfig sim;
  sim.params = make_recovery_model();
  sim.n = 60;
  sim.seed = 11;
  sim.asynchronous_streams = true;
  const Cohort cohort = sample_cohort(sim).cohort;

  EMConfig config;
  config.t_max = 31;
  config.max_iter = 6;
  config.seed = 17;
  config.m_step_grad_steps = 10;
  auto [params, report] = em_fit(cohort, 2, 2, config);
  REQUIRE(report.loglik_trace.size() >= 2);
  for (std::size_t i = 1; i < report.loglik_trace.size(); ++i)
    CHECK(report.loglik_trace[i] >= report.loglik_trace[i - 1] - 1e-8);

  SUBCASE("identical across repeated runs and thread counts") {
    auto [params2, report2] = em_fit(cohort, 2, 2, config);
    CHECK(model_to_json(params, report) == model_to_json(params2, report2));
    EMConfig threaded = config;
    threaded.threads = 4;
    auto [params3, report3] = em_fit(cohort, 2, 2, threaded);
    CHECK(model_to_json(params, report) == model_to_json(params3, report3));
  }
}

TEST_CASE("G=1 K=1 fit recovers a known mean") {
  // Patients drawn from a single-epoch model; the fitted epoch mean must land
  // within three standard errors of the truth in raw units.
  ModelParams truth = make_recovery_model();
  truth.phenotype_count = 1;
  truth.models.resize(1);
  truth.gating.w = Eigen::MatrixXd::Zero(1, truth.encoding.encoder().dim());
  for (int v = 0; v < 2; ++v) {
    TrajectoryModel& m = truth.models[0][static_cast<std::size_t>(v)];
    m.epochs.resize(1);
    m.epochs[0].mean = Eigen::Vector3d(v == 0 ? 0.0 : 1.0, 0.0, 0.0);
    m.durations.r = Eigen::VectorXd::Constant(1, 4.0);
    m.durations.p = Eigen::VectorXd::Constant(1, 4.0 / (4.0 + 14.0));
    m.durations.t_max = 60;
    m.initial.pi = Eigen::VectorXd::Ones(1);
  }
  truth.epoch_count = 1;
  truth.prior_icu = 0.4;
  truth.validate();

  SimConfig sim;
  sim.params = truth;
  sim.n = 150;
  sim.seed = 13;
  sim.asynchronous_streams = true;
  const SimResult data = sample_cohort(sim);

  EMConfig config;
  config.t_max = 61;
  config.max_iter = 12;
  config.seed = 1;
  auto [fit, report] = em_fit(data.cohort, 1, 1, config);

  const StreamStats& trained = fit.standardization;
  for (int v = 0; v < 2; ++v) {
    double n_obs = 0.0;
    for (std::size_t i = 0; i < data.cohort.patients.size(); ++i)
      if (static_cast<int>(data.cohort.patients[i].outcome) == v)
        n_obs += static_cast<double>(data.cohort.patients[i].events.size()) / 3.0;
    const double truth_raw =
        truth.standardization.destandardize(0, truth.models[0][static_cast<std::size_t>(v)].epochs[0].mean[0]);
    const double fit_raw = trained.destandardize(0, fit.models[0][static_cast<std::size_t>(v)].epochs[0].mean[0]);
    const double marginal_sd = truth.standardization.sd[0];
    const double se = marginal_sd / std::sqrt(std::max(n_obs, 1.0));
    CHECK(std::abs(fit_raw - truth_raw) <= 3.0 * se + 0.05 * marginal_sd);
  }
}

TEST_CASE("model persistence roundtrip is exact") {
  const ModelParams params = tiny_params(2, 57);
  FitReport report;
  report.loglik_trace = {-100.5, -90.25, -90.2499};
  report.iterations = 3;
  report.converged = true;
  report.seed = 99;
  const std::string path = "/tmp/wardrisk_test_model.json";
  save_model(params, report, path);
  auto [loaded, loaded_report] = load_model(path);
  CHECK(model_to_json(params, report) == model_to_json(loaded, loaded_report));
  CHECK(loaded_report.converged);
  CHECK(loaded_report.loglik_trace.size() == 3);

  SUBCASE("schema version is enforced") {
    std::string text = model_to_json(params, report);
    const auto at = text.find("\"schema_version\": 1");
    REQUIRE(at != std::string::npos);
    text.replace(at, 19, "\"schema_version\": 9");
    CHECK_THROWS_AS(model_from_json(text), DataError);
  }
}

TEST_CASE("select_model returns the requested singleton") {
  SimConfig sim;
  sim.params = make_recovery_model();
  sim.n = 50;
  sim.seed = 19;
  const Cohort cohort = sample_cohort(sim).cohort;
  EMConfig config;
  config.t_max = 31;
  config.max_iter = 3;
  const std::vector<int> gs = {2};
  const std::vector<int> ks = {2};
  const SelectionResult result = select_model(cohort, gs, ks, config);
  CHECK(result.best_phenotypes == 2);
  CHECK(result.best_epochs == 2);
  CHECK(result.table.size() == 1);
  const std::vector<int> none = {};
  CHECK_THROWS_AS(select_model(cohort, none, ks, config), ConfigError);
}
