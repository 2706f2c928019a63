// Command-line front end for the ward deterioration risk pipeline:
// simulate, train, select-model, score, evaluate, benchmark.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "wardrisk/errors.hpp"
#include "wardrisk/eval.hpp"
#include "wardrisk/mixture.hpp"
#include "wardrisk/parallel.hpp"
#include "wardrisk/scoring.hpp"
#include "wardrisk/simulator.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string checksum_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw wardrisk::DataError("cannot open '" + path + "' for checksum");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(fnv1a64(buffer.str())));
  return hex;
}

void require_output_dir(const std::string& dir) {
  if (!fs::is_directory(dir))
    throw wardrisk::ConfigError("output directory '" + dir + "' does not exist");
}

void require_input_file(const std::string& path) {
  if (!fs::is_regular_file(path))
    throw wardrisk::ConfigError("input file '" + path + "' does not exist");
}

// Every run records its full configuration, seeds, and output checksums.
void write_manifest(const std::string& dir, const std::string& subcommand, const json& config,
                    const std::vector<std::string>& inputs, const std::vector<std::string>& outputs,
                    const std::vector<std::string>& argv) {
  json m;
  m["tool"] = "wardrisk";
  m["subcommand"] = subcommand;
  m["argv"] = argv;
  m["config"] = config;
  json in = json::object();
  for (const std::string& p : inputs) in[fs::path(p).filename().string()] = checksum_file(p);
  m["inputs"] = std::move(in);
  json out = json::object();
  for (const std::string& p : outputs) out[fs::path(p).filename().string()] = checksum_file(p);
  m["outputs"] = std::move(out);
  std::ofstream f(dir + "/manifest.json", std::ios::binary);
  if (!f) throw wardrisk::DataError("cannot write manifest in '" + dir + "'");
  f << m.dump(2) << "\n";
}

wardrisk::ModelParams preset_model(const std::string& name) {
  if (name == "recovery") return wardrisk::make_recovery_model();
  if (name == "benchmark") return wardrisk::make_benchmark_model();
  if (name == "paper-scale") return wardrisk::make_paper_scale_model();
  throw wardrisk::ConfigError("unknown preset '" + name + "'");
}

std::vector<int> parse_range(const std::string& text) {
  // "1:4" or "1,2,3".
  std::vector<int> out;
  if (text.find(':') != std::string::npos) {
    const auto at = text.find(':');
    const int lo = std::stoi(text.substr(0, at));
    const int hi = std::stoi(text.substr(at + 1));
    if (hi < lo) throw wardrisk::ConfigError("range '" + text + "' is empty");
    for (int v = lo; v <= hi; ++v) out.push_back(v);
  } else {
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ','))
      if (!item.empty()) out.push_back(std::stoi(item));
  }
  if (out.empty()) throw wardrisk::ConfigError("range '" + text + "' is empty");
  return out;
}

struct EmFlags {
  int rank = 3;
  int t_max = 168;
  int max_iter = 100;
  double tol = 1e-4;
  int grad_steps = 25;
  std::uint64_t seed = 0;
  unsigned threads = 0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--rank", rank, "Task covariance factor rank");
    cmd->add_option("--t-max", t_max, "Per-epoch duration cap in hours");
    cmd->add_option("--max-iter", max_iter, "EM iteration cap");
    cmd->add_option("--tol", tol, "Relative log-likelihood gain for convergence");
    cmd->add_option("--grad-steps", grad_steps, "Gradient steps per M-step block");
    cmd->add_option("--seed", seed, "Random seed");
    cmd->add_option("--threads", threads, "Worker threads (0 = WARDRISK_THREADS or hardware)");
  }

  wardrisk::EMConfig config() const {
    wardrisk::EMConfig c;
    c.rank = rank;
    c.t_max = t_max;
    c.max_iter = max_iter;
    c.tol = tol;
    c.m_step_grad_steps = grad_steps;
    c.seed = seed;
    c.threads = threads;
    return c;
  }

  json to_json() const {
    return {{"rank", rank},     {"t_max", t_max},           {"max_iter", max_iter},
            {"tol", tol},       {"grad_steps", grad_steps}, {"seed", seed},
            {"threads", threads}};
  }
};

int run(int argc, char** argv) {
  const std::vector<std::string> argv_copy(argv, argv + argc);

  CLI::App app{"Individualized ward deterioration risk scoring"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML config file (command-line flags win)");

  // --- simulate ---
  auto* sim = app.add_subcommand("simulate", "Sample a synthetic cohort from a generative model");
  std::string sim_preset = "benchmark";
  std::string sim_model_path;
  std::string sim_out;
  int sim_n = 100;
  std::uint64_t sim_seed = 0;
  bool sim_async = false;
  bool sim_paper_scale = false;
  double sim_gap_min = 1.0, sim_gap_max = 4.0;
  unsigned sim_threads = 0;
  sim->add_option("--preset", sim_preset, "Built-in generative model: recovery|benchmark|paper-scale");
  sim->add_option("--model", sim_model_path, "Sample from a trained model file instead of a preset");
  sim->add_flag("--paper-scale", sim_paper_scale, "Shorthand for --preset paper-scale");
  sim->add_option("--n", sim_n, "Number of patients")->required();
  sim->add_option("--seed", sim_seed, "Random seed");
  sim->add_flag("--async", sim_async, "Independent observation times per stream");
  sim->add_option("--gap-min", sim_gap_min, "Minimum observation interval (hours)");
  sim->add_option("--gap-max", sim_gap_max, "Maximum observation interval (hours)");
  sim->add_option("--threads", sim_threads, "Worker threads");
  sim->add_option("--out", sim_out, "Output directory")->required();

  // --- train ---
  auto* train = app.add_subcommand("train", "Fit the mixture model by EM");
  std::string train_cohort, train_out;
  int train_g = 2, train_k = 3;
  EmFlags train_em;
  train->add_option("--cohort", train_cohort, "Training cohort (NDJSON)")->required();
  train->add_option("--g", train_g, "Phenotype count");
  train->add_option("--k", train_k, "Epoch count");
  train_em.attach(train);
  train->add_option("--out", train_out, "Output directory")->required();

  // --- select-model ---
  auto* sel = app.add_subcommand("select-model", "BIC sweep over phenotype and epoch counts");
  std::string sel_cohort, sel_out, sel_g_range = "1:3", sel_k_range = "1:4";
  EmFlags sel_em;
  sel->add_option("--cohort", sel_cohort, "Training cohort (NDJSON)")->required();
  sel->add_option("--g-range", sel_g_range, "Phenotype counts, e.g. 1:3 or 1,2,4");
  sel->add_option("--k-range", sel_k_range, "Epoch counts, e.g. 1:4");
  sel_em.attach(sel);
  sel->add_option("--out", sel_out, "Output directory")->required();

  // --- score ---
  auto* score = app.add_subcommand("score", "Replay cohort events through the risk score");
  std::string score_model, score_cohort_path, score_out;
  bool score_clock_tick = false;
  unsigned score_threads = 0;
  score->add_option("--model", score_model, "Trained model file")->required();
  score->add_option("--cohort", score_cohort_path, "Cohort to score")->required();
  score->add_flag("--clock-tick", score_clock_tick,
                  "Also re-evaluate the score at every whole hour between events");
  score->add_option("--threads", score_threads, "Worker threads");
  score->add_option("--out", score_out, "Output directory")->required();

  // --- evaluate ---
  auto* eval = app.add_subcommand("evaluate", "Threshold curves and the benchmark report");
  std::string eval_model, eval_stationary, eval_cohort_path, eval_out;
  double eval_target_tpr = 0.5;
  unsigned eval_threads = 0;
  eval->add_option("--model", eval_model, "Trained full model")->required();
  eval->add_option("--stationary-model", eval_stationary, "Trained G=1,K=1 model for the ablations")
      ->required();
  eval->add_option("--cohort", eval_cohort_path, "Cohort to evaluate")->required();
  eval->add_option("--target-tpr", eval_target_tpr, "TPR pinned by the timeliness curve");
  eval->add_option("--threads", eval_threads, "Worker threads");
  eval->add_option("--out", eval_out, "Output directory")->required();

  // --- benchmark ---
  auto* bench = app.add_subcommand("benchmark", "Simulate, train, and compare scorers end to end");
  std::string bench_out;
  int bench_n_train = 1000, bench_n_test = 2000, bench_g = 2, bench_k = 3;
  std::uint64_t bench_seed = 0;
  double bench_target_tpr = 0.5;
  EmFlags bench_em;
  bench_em.t_max = 30;
  bench->add_option("--n-train", bench_n_train, "Training cohort size");
  bench->add_option("--n-test", bench_n_test, "Test cohort size");
  bench->add_option("--g", bench_g, "Phenotype count for the full model");
  bench->add_option("--k", bench_k, "Epoch count for the full model");
  bench->add_option("--target-tpr", bench_target_tpr, "TPR pinned by the timeliness comparison");
  bench->add_option("--bench-seed", bench_seed, "Cohort simulation seed");
  bench_em.attach(bench);
  bench->add_option("--out", bench_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return kExitConfig;
  }

  if (sim->parsed()) {
    require_output_dir(sim_out);
    if (!sim_model_path.empty()) require_input_file(sim_model_path);
    wardrisk::SimConfig config;
    if (sim_paper_scale) sim_preset = "paper-scale";
    config.params = sim_model_path.empty() ? preset_model(sim_preset)
                                           : wardrisk::load_model(sim_model_path).first;
    config.n = sim_n;
    config.seed = sim_seed;
    config.asynchronous_streams = sim_async;
    config.gap_min = sim_gap_min;
    config.gap_max = sim_gap_max;
    config.threads = sim_threads;
    const wardrisk::SimResult result = wardrisk::sample_cohort(config);
    const std::string cohort_path = sim_out + "/cohort.ndjson";
    const std::string truth_path = sim_out + "/truth.csv";
    wardrisk::serialize_cohort(result.cohort, cohort_path);
    wardrisk::write_truth_csv(result.truth, truth_path);
    json cfg{{"preset", sim_model_path.empty() ? sim_preset : "file:" + sim_model_path},
             {"n", sim_n},
             {"seed", sim_seed},
             {"async", sim_async},
             {"gap_min", sim_gap_min},
             {"gap_max", sim_gap_max},
             {"threads", sim_threads}};
    write_manifest(sim_out, "simulate", cfg, {}, {cohort_path, truth_path}, argv_copy);
    std::cout << "simulate: wrote " << result.cohort.patients.size() << " patients to "
              << cohort_path << "\n";
  } else if (train->parsed()) {
    require_output_dir(train_out);
    require_input_file(train_cohort);
    const wardrisk::Cohort cohort = wardrisk::parse_cohort(train_cohort);
    auto [params, report] = wardrisk::em_fit(cohort, train_g, train_k, train_em.config());
    const std::string model_path = train_out + "/model.json";
    wardrisk::save_model(params, report, model_path);
    json cfg = train_em.to_json();
    cfg["g"] = train_g;
    cfg["k"] = train_k;
    write_manifest(train_out, "train", cfg, {train_cohort}, {model_path}, argv_copy);
    std::cout << "train: " << report.iterations << " EM iterations, converged="
              << (report.converged ? "yes" : "no") << ", final loglik="
              << report.loglik_trace.back() << "\n";
  } else if (sel->parsed()) {
    require_output_dir(sel_out);
    require_input_file(sel_cohort);
    const wardrisk::Cohort cohort = wardrisk::parse_cohort(sel_cohort);
    const std::vector<int> g_range = parse_range(sel_g_range);
    const std::vector<int> k_range = parse_range(sel_k_range);
    const wardrisk::SelectionResult result =
        wardrisk::select_model(cohort, g_range, k_range, sel_em.config());
    const std::string model_path = sel_out + "/model.json";
    const std::string table_path = sel_out + "/bic_table.csv";
    wardrisk::save_model(result.params, result.report, model_path);
    {
      std::ofstream t(table_path, std::ios::binary);
      t << "g,k,bic,loglik,iterations,converged\n";
      char buf[64];
      for (const wardrisk::SelectionEntry& e : result.table) {
        t << e.phenotypes << ',' << e.epochs << ',';
        std::snprintf(buf, sizeof(buf), "%.17g", e.bic);
        t << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.17g", e.loglik);
        t << buf << ',' << e.iterations << ',' << (e.converged ? 1 : 0) << '\n';
      }
    }
    json cfg = sel_em.to_json();
    cfg["g_range"] = sel_g_range;
    cfg["k_range"] = sel_k_range;
    write_manifest(sel_out, "select-model", cfg, {sel_cohort}, {model_path, table_path}, argv_copy);
    std::cout << "select-model: best (G=" << result.best_phenotypes << ", K=" << result.best_epochs
              << ")\n";
  } else if (score->parsed()) {
    require_output_dir(score_out);
    require_input_file(score_model);
    require_input_file(score_cohort_path);
    const auto [params, report] = wardrisk::load_model(score_model);
    const wardrisk::Cohort cohort = wardrisk::parse_cohort(score_cohort_path);
    if (cohort.vocabulary != params.encoding.vocabulary)
      throw wardrisk::DataError("cohort vocabulary does not match the model's");
    if (cohort.stream_count() != params.stream_count())
      throw wardrisk::DataError("cohort stream catalog does not match the model's");
    std::vector<wardrisk::ScoreTrace> traces(cohort.patients.size());
    wardrisk::parallel_for(cohort.patients.size(), score_threads, [&](std::size_t i) {
      const wardrisk::PatientRecord& r = cohort.patients[i];
      wardrisk::ScoreTrace trace{r.id, static_cast<int>(r.outcome), r.endpoint_time, {}};
      wardrisk::ScoringSession session(params, r.profile);
      trace.points.push_back({0.0, session.risk()});
      double clock = 1.0;
      for (const wardrisk::MeasurementEvent& e : r.events) {
        if (score_clock_tick) {
          for (; clock < e.time; clock += 1.0)
            trace.points.push_back({clock, session.score_at(clock)});
        }
        trace.points.push_back({e.time, session.observe(e)});
      }
      if (score_clock_tick) {
        for (; clock <= r.endpoint_time; clock += 1.0)
          trace.points.push_back({clock, session.score_at(clock)});
      }
      traces[i] = std::move(trace);
    });
    const std::string scores_path = score_out + "/scores.csv";
    wardrisk::write_scores_csv(traces, scores_path);
    json cfg{{"clock_tick", score_clock_tick}, {"threads", score_threads}};
    write_manifest(score_out, "score", cfg, {score_model, score_cohort_path}, {scores_path},
                   argv_copy);
    std::cout << "score: wrote " << scores_path << "\n";
  } else if (eval->parsed()) {
    require_output_dir(eval_out);
    require_input_file(eval_model);
    require_input_file(eval_stationary);
    require_input_file(eval_cohort_path);
    const auto [params, report] = wardrisk::load_model(eval_model);
    const auto [stat_params, stat_report] = wardrisk::load_model(eval_stationary);
    if (stat_params.phenotype_count != 1 || stat_params.epoch_count != 1)
      throw wardrisk::ConfigError("--stationary-model must be a G=1, K=1 fit");
    const wardrisk::Cohort cohort = wardrisk::parse_cohort(eval_cohort_path);
    const std::vector<std::vector<wardrisk::ScoreTrace>> traces = {
        wardrisk::score_cohort(params, cohort, eval_threads),
        wardrisk::score_cohort(stat_params, cohort, eval_threads),
        wardrisk::snapshot_cohort(stat_params, cohort, eval_threads)};
    const std::vector<double> grid = wardrisk::adaptive_threshold_grid(traces[0]);
    const wardrisk::MetricCurve roc = wardrisk::roc_curve(traces[0], grid);
    const wardrisk::MetricCurve timeliness =
        wardrisk::timeliness_curve(traces[0], eval_target_tpr, grid);
    std::vector<std::string> outputs;
    auto emit = [&](const wardrisk::MetricCurve& c, const std::string& stem, const std::string& title) {
      const std::string csv = eval_out + "/" + stem + ".csv";
      const std::string svg = eval_out + "/" + stem + ".svg";
      wardrisk::write_curve_csv(c, csv);
      wardrisk::write_curve_svg(c, title, svg);
      outputs.push_back(csv);
      outputs.push_back(svg);
    };
    emit(roc, "roc", "TPR vs PPV");
    emit(timeliness, "timeliness", "Timeliness at fixed TPR");
    for (double lower : {0.01, 0.05, 0.2}) {
      std::vector<double> uppers;
      for (double t : grid)
        if (t > lower) uppers.push_back(t);
      char stem[32];
      std::snprintf(stem, sizeof(stem), "dual_%0.2f", lower);
      emit(wardrisk::dual_threshold_eval(traces[0], lower, uppers), stem,
           "Dual-threshold discharge sweep");
    }
    const wardrisk::BenchmarkReport rep =
        wardrisk::benchmark_from_traces(traces, {"full", "stationary", "snapshot"}, eval_target_tpr);
    const std::string report_path = eval_out + "/report.json";
    {
      std::ofstream f(report_path, std::ios::binary);
      f << wardrisk::benchmark_report_json(rep);
    }
    outputs.push_back(report_path);
    json cfg{{"target_tpr", eval_target_tpr}, {"threads", eval_threads}};
    write_manifest(eval_out, "evaluate", cfg, {eval_model, eval_stationary, eval_cohort_path},
                   outputs, argv_copy);
    std::cout << "evaluate: auc_icu full=" << rep.auc_icu[0] << " stationary=" << rep.auc_icu[1]
              << " snapshot=" << rep.auc_icu[2] << "\n";
  } else if (bench->parsed()) {
    require_output_dir(bench_out);
    wardrisk::SimConfig sim_config;
    sim_config.params = wardrisk::make_benchmark_model();
    sim_config.asynchronous_streams = true;
    sim_config.threads = bench_em.threads;
    sim_config.n = bench_n_train;
    sim_config.seed = bench_seed;
    const wardrisk::SimResult train_data = wardrisk::sample_cohort(sim_config);
    sim_config.n = bench_n_test;
    sim_config.seed = bench_seed + 1;
    const wardrisk::SimResult test_data = wardrisk::sample_cohort(sim_config);
    wardrisk::BenchmarkConfig config;
    config.phenotypes = bench_g;
    config.epochs = bench_k;
    config.em = bench_em.config();
    config.target_tpr = bench_target_tpr;
    config.threads = bench_em.threads;
    const wardrisk::BenchmarkReport rep =
        wardrisk::run_benchmark(train_data.cohort, test_data.cohort, config);
    const std::string report_path = bench_out + "/report.json";
    {
      std::ofstream f(report_path, std::ios::binary);
      f << wardrisk::benchmark_report_json(rep);
    }
    json cfg = bench_em.to_json();
    cfg["n_train"] = bench_n_train;
    cfg["n_test"] = bench_n_test;
    cfg["g"] = bench_g;
    cfg["k"] = bench_k;
    cfg["bench_seed"] = bench_seed;
    cfg["target_tpr"] = bench_target_tpr;
    write_manifest(bench_out, "benchmark", cfg, {}, {report_path}, argv_copy);
    std::cout << "benchmark: auc_icu full=" << rep.auc_icu[0] << " stationary=" << rep.auc_icu[1]
              << " snapshot=" << rep.auc_icu[2] << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const wardrisk::ConfigError& e) {
    std::cerr << "error[config]: " << e.what() << "\n";
    return kExitConfig;
  } catch (const wardrisk::DataError& e) {
    std::cerr << "error[data]: " << e.what() << "\n";
    return kExitData;
  } catch (const wardrisk::NumericError& e) {
    std::cerr << "error[numeric]: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
