// Command-line front end: dataset generation, training, evaluation, the
// single-trajectory report, the gain-to-covariance equivalence sweep, and the
// full scenario pipeline.

#include "knetuq/harness.hpp"
#include "knetuq/io.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

namespace {

using namespace knetuq;
namespace fs = std::filesystem;

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::string scenario;
};

ExperimentConfig resolve_config(const CommonOpts& opts) {
  ExperimentConfig cfg;
  if (!opts.config_path.empty()) {
    cfg = load_config(opts.config_path);
  } else if (!opts.scenario.empty()) {
    cfg = scenario_config(opts.scenario);
  } else {
    throw ContractError("provide --config or --scenario");
  }
  if (opts.seed) {
    cfg.data_seed = *opts.seed;
    cfg.train_seed = *opts.seed ^ 0x5EEDULL;
  }
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  validate_config(cfg);
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts, bool with_checkpoint) {
  cmd->add_option("--config", opts.config_path,
                  "JSON config mirroring the experiment fields");
  cmd->add_option("--scenario", opts.scenario,
                  "preset: linear-full | linear-mismatch | lorenz");
  cmd->add_option("--seed", opts.seed,
                  "override data/train seeds for reproducible runs");
  cmd->add_option("--out", opts.out_dir, "output directory");
  if (with_checkpoint) {
    cmd->add_option("--checkpoint", opts.checkpoint,
                    "trained parameter file (JSON)");
  }
}

int cmd_generate(const CommonOpts& opts) {
  auto cfg = resolve_config(opts);
  fs::create_directories(cfg.out_dir);
  auto data = generate_scenario_datasets(cfg);
  for (const Dataset* ds : {&data.train, &data.val, &data.test}) {
    const auto csv = (fs::path(cfg.out_dir) / (ds->split + ".csv")).string();
    const auto meta = (fs::path(cfg.out_dir) / (ds->split + ".json")).string();
    save_dataset(*ds, csv, meta);
    std::printf("wrote %s (%d trajectories, T=%d)\n", csv.c_str(), ds->size(),
                ds->T);
  }
  return 0;
}

int cmd_train(const CommonOpts& opts, const std::string& data_dir) {
  auto cfg = resolve_config(opts);
  fs::create_directories(cfg.out_dir);

  ScenarioData data;
  if (!data_dir.empty()) {
    auto load = [&](const std::string& split) {
      return load_dataset((fs::path(data_dir) / (split + ".csv")).string(),
                          (fs::path(data_dir) / (split + ".json")).string());
    };
    data.train = load("train");
    data.val = load("val");
    data.test = load("test");
  } else {
    data = generate_scenario_datasets(cfg);
  }

  KnetPipeline pipe = make_knet_pipeline(cfg, data);
  TrainConfig tc = cfg.training;
  tc.seed = cfg.train_seed;
  auto result = train_knet(pipe.assumed, pipe.train, pipe.val, tc);

  const auto ckpt = (fs::path(cfg.out_dir) / "checkpoint.json").string();
  save_checkpoint(result.params, ckpt);
  const auto curves = (fs::path(cfg.out_dir) / "loss_curves.csv").string();
  save_loss_curves(result.curve, curves);
  std::printf("trained %zu epochs, best epoch %d, best val %.3f dB\n",
              result.curve.size(), result.best_epoch,
              to_db(result.best_val_mse));
  std::printf("wrote %s and %s\n", ckpt.c_str(), curves.c_str());
  return 0;
}

int cmd_evaluate(const CommonOpts& opts) {
  auto cfg = resolve_config(opts);
  require(!opts.checkpoint.empty(), "evaluate: --checkpoint is required");
  fs::create_directories(cfg.out_dir);
  auto params = load_checkpoint(opts.checkpoint);
  auto data = generate_scenario_datasets(cfg);
  KnetPipeline pipe = make_knet_pipeline(cfg, data);

  const std::string label =
      cfg.assumed_model.evolution.linear() ? "kf" : "ekf";
  auto model_ms =
      evaluate_model_filter(cfg.assumed_model, data.test, cfg.x0.cov, label);
  std::optional<ObservationGeometry> geom;
  try {
    geom = make_geometry(pipe.assumed.H, pipe.assumed.R);
  } catch (const std::exception&) {
  }
  auto knet_ms = evaluate_knet(params, pipe.assumed, pipe.test, geom);

  const auto metrics = (fs::path(cfg.out_dir) / "metrics.csv").string();
  save_metrics_csv({model_ms, knet_ms}, metrics);
  json summary;
  summary["scenario"] = cfg.scenario;
  summary["filters"][label] = summarize_series(model_ms);
  summary["filters"]["knet"] = summarize_series(knet_ms);
  const auto sj = (fs::path(cfg.out_dir) / "summary.json").string();
  {
    auto out = open_out(sj);
    out << summary.dump(2) << "\n";
  }
  std::printf("%s\n", summary.dump(2).c_str());
  std::printf("wrote %s and %s\n", metrics.c_str(), sj.c_str());
  return 0;
}

int cmd_single_traj(const CommonOpts& opts, int index) {
  auto cfg = resolve_config(opts);
  require(!opts.checkpoint.empty(), "single-traj: --checkpoint is required");
  require(fs::exists(opts.checkpoint),
          "single-traj: checkpoint not found: " + opts.checkpoint);
  auto params = load_checkpoint(opts.checkpoint);
  fs::create_directories(cfg.out_dir);
  const auto csv = (fs::path(cfg.out_dir) / "trajectory.csv").string();
  const auto svg = cfg.emit_svg
                       ? (fs::path(cfg.out_dir) / "trajectory.svg").string()
                       : std::string();
  (void)single_trajectory_report(cfg, params, index, csv, svg);
  std::printf("wrote %s\n", csv.c_str());
  return 0;
}

int cmd_covtest(int m, int n, int draws, std::uint64_t seed) {
  CovtestSpec spec;
  spec.m = m;
  spec.n = n;
  spec.draws = draws;
  spec.seed = seed;
  auto report = covtest(spec);
  std::printf("draws: %d  max relative error: %.3e\n", report.draws,
              report.max_rel_err);
  for (const auto& f : report.failures) {
    std::printf("FAIL draw %d (seed %llu): rel err %.3e\n", f.draw,
                static_cast<unsigned long long>(f.seed), f.rel_err);
  }
  std::printf("%s\n", report.pass ? "PASS" : "FAIL");
  return report.pass ? 0 : 1;
}

int cmd_run(const CommonOpts& opts) {
  auto cfg = resolve_config(opts);
  auto report = run_scenario(cfg);
  std::printf("%s\n", report.summary.dump(2).c_str());
  for (const auto& f : report.written) std::printf("wrote %s\n", f.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"State estimation with model-based and learned Kalman gains, "
               "with gain-derived error covariance"};
  app.require_subcommand(1);

  CommonOpts gen_opts, train_opts, eval_opts, traj_opts, run_opts;
  std::string data_dir;
  int traj_index = 0;
  int cov_m = 0, cov_n = 0, cov_draws = 100;
  std::uint64_t cov_seed = 1;

  auto* gen = app.add_subcommand("generate", "write train/val/test datasets");
  add_common(gen, gen_opts, false);

  auto* train = app.add_subcommand("train", "train the learned gain network");
  add_common(train, train_opts, false);
  train->add_option("--data", data_dir,
                    "load datasets from this directory instead of generating");

  auto* eval = app.add_subcommand("evaluate",
                                  "evaluate filters on the test split");
  add_common(eval, eval_opts, true);

  auto* traj = app.add_subcommand("single-traj",
                                  "per-dimension report with 1-sigma bands");
  add_common(traj, traj_opts, true);
  traj->add_option("--index", traj_index, "test trajectory index");

  auto* cov = app.add_subcommand(
      "covtest", "random-system equivalence sweep of the covariance extraction");
  cov->add_option("--m", cov_m, "state dimension (0 = random in [1,4])");
  cov->add_option("--n", cov_n, "observation dimension (0 = random in [m,5])");
  cov->add_option("--draws", cov_draws, "number of random systems");
  cov->add_option("--seed", cov_seed, "sweep seed");

  auto* run = app.add_subcommand("run", "full scenario pipeline");
  add_common(run, run_opts, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(gen_opts);
    if (train->parsed()) return cmd_train(train_opts, data_dir);
    if (eval->parsed()) return cmd_evaluate(eval_opts);
    if (traj->parsed()) return cmd_single_traj(traj_opts, traj_index);
    if (cov->parsed()) return cmd_covtest(cov_m, cov_n, cov_draws, cov_seed);
    if (run->parsed()) return cmd_run(run_opts);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
