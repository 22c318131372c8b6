#pragma once

#include "knetuq/common.hpp"
#include "knetuq/io.hpp"
#include "knetuq/kalman.hpp"
#include "knetuq/knet.hpp"
#include "knetuq/metrics.hpp"
#include "knetuq/ssmodel.hpp"
#include "knetuq/svg.hpp"
#include "knetuq/uncertainty.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace knetuq {

struct ExperimentConfig {
  std::string scenario;  // linear-full | linear-mismatch | lorenz
  StateSpaceModel true_model;
  StateSpaceModel assumed_model;
  InitialStateLaw x0;
  int T = 100;
  int train_n = 1000;
  int val_n = 100;
  int test_n = 2000;
  std::uint64_t data_seed = 1;
  std::uint64_t train_seed = 2;
  TrainConfig training;
  bool emit_svg = true;
  bool persist_datasets = false;
  std::string out_dir = "out";
};

// Split seeds are derived from data_seed so the three splits never share
// trajectory substreams.
inline std::uint64_t split_seed(std::uint64_t data_seed,
                                const std::string& split) {
  std::uint64_t tag = 0;
  for (char c : split) tag = tag * 257 + static_cast<unsigned char>(c);
  return Rng(data_seed ^ (tag * 0x9E3779B97F4A7C15ULL)).next_u64();
}

inline ExperimentConfig linear_full_config() {
  ExperimentConfig cfg;
  cfg.scenario = "linear-full";
  cfg.true_model = make_scalar_model(0.9, 1.0, 1.0, 1.0);
  cfg.assumed_model = cfg.true_model;
  cfg.x0 = known_start(Vec::Zero(1));
  cfg.training.max_epochs = 150;
  cfg.training.patience = 30;
  return cfg;
}

inline ExperimentConfig linear_mismatch_config() {
  ExperimentConfig cfg = linear_full_config();
  cfg.scenario = "linear-mismatch";
  cfg.assumed_model = make_scalar_model(0.5, 1.0, 1.0, 1.0);
  return cfg;
}

// Data follow the fine discretization; both filters assume the first-order
// one. The data are noiseless in the state equation, so the filters' assumed
// process noise is a tuning knob covering the discretization error; the
// default leans conservative, which is what produces the overestimating EKF.
inline ExperimentConfig lorenz_config() {
  ExperimentConfig cfg;
  cfg.scenario = "lorenz";
  const Mat h = Mat::Identity(3, 3);
  const Mat r = Mat::Identity(3, 3);
  cfg.true_model =
      make_model(lorenz_evolution(0.02, 5), h, Mat::Zero(3, 3), r);
  cfg.assumed_model =
      make_model(lorenz_evolution(0.02, 1), h, 0.5 * Mat::Identity(3, 3), r);
  Vec mu0(3);
  mu0 << 1.0, 1.0, 1.0;
  cfg.x0 = known_start(mu0);
  cfg.training.normalize_features = true;
  cfg.training.output_init_scale = 0.01;
  cfg.training.max_epochs = 300;
  cfg.training.patience = 40;
  return cfg;
}

inline ExperimentConfig scenario_config(const std::string& name) {
  if (name == "linear-full") return linear_full_config();
  if (name == "linear-mismatch") return linear_mismatch_config();
  if (name == "lorenz") return lorenz_config();
  throw ContractError("unknown scenario: " + name);
}

inline void validate_config(const ExperimentConfig& cfg) {
  require(cfg.T >= 1 && cfg.train_n >= 1 && cfg.val_n >= 1 && cfg.test_n >= 1,
          "config: sizes must be positive");
  require(cfg.true_model.m() == cfg.assumed_model.m() &&
              cfg.true_model.n() == cfg.assumed_model.n(),
          "config: true and assumed models must share dimensions");
  if (cfg.scenario == "linear-mismatch") {
    require(cfg.true_model.evolution.linear() &&
                cfg.assumed_model.evolution.linear(),
            "linear-mismatch: both models must be linear");
    require((cfg.true_model.evolution.F - cfg.assumed_model.evolution.F)
                    .cwiseAbs()
                    .maxCoeff() > 0.0,
            "linear-mismatch: assumed F must differ from true F");
  }
}

// ---- config file (JSON mirroring the field names above) --------------------

inline ExperimentConfig config_from_json(const json& j) {
  require(j.contains("scenario"), "config: missing scenario");
  ExperimentConfig cfg = scenario_config(j.at("scenario").get<std::string>());
  if (j.contains("true_model")) cfg.true_model = model_from_json(j["true_model"]);
  if (j.contains("assumed_model")) {
    cfg.assumed_model = model_from_json(j["assumed_model"]);
  }
  if (j.contains("x0")) {
    cfg.x0.mean = vector_from_json(j["x0"].at("mean"));
    if (j["x0"].contains("cov")) {
      cfg.x0.cov = matrix_from_json(j["x0"]["cov"]);
    } else {
      cfg.x0.cov = Mat::Zero(cfg.x0.mean.size(), cfg.x0.mean.size());
    }
  }
  cfg.T = j.value("T", cfg.T);
  cfg.train_n = j.value("train_n", cfg.train_n);
  cfg.val_n = j.value("val_n", cfg.val_n);
  cfg.test_n = j.value("test_n", cfg.test_n);
  cfg.data_seed = j.value("data_seed", cfg.data_seed);
  cfg.train_seed = j.value("train_seed", cfg.train_seed);
  if (j.contains("training")) {
    const json& t = j["training"];
    cfg.training.opt.lr = t.value("lr", cfg.training.opt.lr);
    cfg.training.opt.beta1 = t.value("beta1", cfg.training.opt.beta1);
    cfg.training.opt.beta2 = t.value("beta2", cfg.training.opt.beta2);
    cfg.training.opt.eps = t.value("eps", cfg.training.opt.eps);
    cfg.training.hidden = t.value("hidden", cfg.training.hidden);
    cfg.training.normalize_features =
        t.value("normalize_features", cfg.training.normalize_features);
    cfg.training.output_init_scale =
        t.value("output_init_scale", cfg.training.output_init_scale);
    cfg.training.batch_size = t.value("batch_size", cfg.training.batch_size);
    cfg.training.max_epochs = t.value("max_epochs", cfg.training.max_epochs);
    cfg.training.patience = t.value("patience", cfg.training.patience);
    cfg.training.clip_norm = t.value("clip_norm", cfg.training.clip_norm);
    cfg.training.val_loss_cap =
        t.value("val_loss_cap", cfg.training.val_loss_cap);
  }
  cfg.emit_svg = j.value("emit_svg", cfg.emit_svg);
  cfg.persist_datasets = j.value("persist_datasets", cfg.persist_datasets);
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  validate_config(cfg);
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  return config_from_json(json::parse(open_in(path)));
}

// ---- scenario pipeline ------------------------------------------------------

struct ScenarioData {
  Dataset train, val, test;
};

inline ScenarioData generate_scenario_datasets(const ExperimentConfig& cfg) {
  ScenarioData d;
  d.train = generate_dataset(cfg.true_model, cfg.T, cfg.train_n, cfg.x0,
                             split_seed(cfg.data_seed, "train"), "train");
  d.val = generate_dataset(cfg.true_model, cfg.T, cfg.val_n, cfg.x0,
                           split_seed(cfg.data_seed, "val"), "val");
  d.test = generate_dataset(cfg.true_model, cfg.T, cfg.test_n, cfg.x0,
                            split_seed(cfg.data_seed, "test"), "test");
  return d;
}

inline bool is_identity(const Mat& m) {
  return m.isIdentity(1e-15);
}

// The learned filter trains under the identity-R convention: observations are
// pre-whitened with the assumed R whenever it is not already the identity.
struct KnetPipeline {
  StateSpaceModel assumed;  // whitened assumed model
  Dataset train, val, test;
  bool whitened = false;
};

inline KnetPipeline make_knet_pipeline(const ExperimentConfig& cfg,
                                       const ScenarioData& data) {
  KnetPipeline p;
  if (is_identity(cfg.assumed_model.R)) {
    p.assumed = cfg.assumed_model;
    p.train = data.train;
    p.val = data.val;
    p.test = data.test;
    return p;
  }
  const Mat w = matrix_inv_sqrt(cfg.assumed_model.R);
  p.assumed = make_model(cfg.assumed_model.evolution, w * cfg.assumed_model.H,
                         cfg.assumed_model.Q,
                         Mat::Identity(cfg.assumed_model.n(),
                                       cfg.assumed_model.n()));
  p.train = whiten(data.train, cfg.assumed_model.R);
  p.val = whiten(data.val, cfg.assumed_model.R);
  p.test = whiten(data.test, cfg.assumed_model.R);
  p.whitened = true;
  return p;
}

struct ScenarioReport {
  MetricSeries model_filter;  // "kf" or "ekf"
  MetricSeries knet;
  TrainResult training;
  json summary;
  std::vector<std::string> written;  // files produced
};

namespace detail {

class OutputGuard {
 public:
  explicit OutputGuard(std::vector<std::string>& files) : files_(files) {}
  void commit() { committed_ = true; }
  ~OutputGuard() {
    if (committed_) return;
    for (const auto& f : files_) {
      std::error_code ec;
      std::filesystem::remove(f, ec);
    }
  }

 private:
  std::vector<std::string>& files_;
  bool committed_ = false;
};

}  // namespace detail

inline json summarize_series(const MetricSeries& ms, int from_t = 0) {
  json s;
  s["empirical_db"] = time_averaged_db(ms.empirical_mse, from_t);
  s["predicted_db"] = time_averaged_db(ms.predicted_trace, from_t);
  const double gap = mean_abs_db_gap(ms.predicted_db, ms.empirical_db, from_t);
  const double signed_gap =
      mean_signed_db_gap(ms.predicted_db, ms.empirical_db, from_t);
  s["calibration_gap_db"] = gap;
  s["predicted_minus_empirical_db"] = signed_gap;
  s["count"] = ms.count;
  s["excluded"] = ms.excluded;
  return s;
}

// Full study: generate data, train the learned filter, evaluate both filters
// on the shared test set, write metrics/summary/curves (and optionally SVG).
// Any stage failure removes the partial outputs and rethrows with the stage
// name.
inline ScenarioReport run_scenario(const ExperimentConfig& cfg) {
  validate_config(cfg);
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  ScenarioReport report;
  detail::OutputGuard guard(report.written);
  auto path = [&](const std::string& name) {
    return (fs::path(cfg.out_dir) / name).string();
  };

  std::string stage = "generate";
  try {
    ScenarioData data = generate_scenario_datasets(cfg);
    if (cfg.persist_datasets) {
      for (const Dataset* ds : {&data.train, &data.val, &data.test}) {
        const std::string csv = path(ds->split + ".csv");
        const std::string meta = path(ds->split + ".json");
        save_dataset(*ds, csv, meta);
        report.written.push_back(csv);
        report.written.push_back(meta);
      }
    }

    stage = "train";
    KnetPipeline pipe = make_knet_pipeline(cfg, data);
    TrainConfig tc = cfg.training;
    tc.seed = cfg.train_seed;
    report.training = train_knet(pipe.assumed, pipe.train, pipe.val, tc);
    const std::string ckpt = path("checkpoint.json");
    save_checkpoint(report.training.params, ckpt);
    report.written.push_back(ckpt);
    const std::string curves = path("loss_curves.csv");
    save_loss_curves(report.training.curve, curves);
    report.written.push_back(curves);

    stage = "evaluate";
    const std::string model_label =
        cfg.assumed_model.evolution.linear() ? "kf" : "ekf";
    report.model_filter = evaluate_model_filter(cfg.assumed_model, data.test,
                                                cfg.x0.cov, model_label);
    std::optional<ObservationGeometry> geom;
    try {
      geom = make_geometry(pipe.assumed.H, pipe.assumed.R);
    } catch (const std::exception&) {
      geom.reset();  // e.g. PSD-singular R: empirical series only
    }
    report.knet =
        evaluate_knet(report.training.params, pipe.assumed, pipe.test, geom);

    stage = "report";
    const std::string metrics = path("metrics.csv");
    save_metrics_csv({report.model_filter, report.knet}, metrics);
    report.written.push_back(metrics);

    report.summary["scenario"] = cfg.scenario;
    report.summary["T"] = cfg.T;
    report.summary["test_n"] = cfg.test_n;
    report.summary["data_seed"] = cfg.data_seed;
    report.summary["train_seed"] = cfg.train_seed;
    report.summary["whitened"] = pipe.whitened;
    report.summary["filters"][report.model_filter.label] =
        summarize_series(report.model_filter);
    report.summary["filters"][report.knet.label] = summarize_series(report.knet);
    report.summary["train"]["epochs"] =
        static_cast<int>(report.training.curve.size());
    report.summary["train"]["best_epoch"] = report.training.best_epoch;
    report.summary["train"]["best_val_db"] = to_db(report.training.best_val_mse);
    const std::string summary = path("summary.json");
    {
      std::ofstream out = open_out(summary);
      out << report.summary.dump(2) << "\n";
    }
    report.written.push_back(summary);

    if (cfg.emit_svg) {
      std::vector<SvgSeries> curves_svg;
      std::vector<double> ts(static_cast<std::size_t>(cfg.T));
      for (int t = 0; t < cfg.T; ++t) ts[static_cast<std::size_t>(t)] = t + 1;
      const char* colors[4] = {"#1f77b4", "#1f77b4", "#d62728", "#d62728"};
      int ci = 0;
      for (const MetricSeries* ms : {&report.model_filter, &report.knet}) {
        SvgSeries emp{ms->label + " empirical", colors[ci++], false, ts,
                      ms->empirical_db};
        SvgSeries pred{ms->label + " predicted", colors[ci++], true, ts,
                       ms->predicted_db};
        curves_svg.push_back(std::move(emp));
        curves_svg.push_back(std::move(pred));
      }
      const std::string svg = path("metrics.svg");
      write_svg_chart(svg, curves_svg, "t", "error (dB)");
      report.written.push_back(svg);
    }
  } catch (const std::exception& e) {
    throw NumericError("run_scenario failed at stage '" + stage +
                       "': " + e.what());
  }
  guard.commit();
  return report;
}

// ---- single-trajectory report -----------------------------------------------

struct TrajectoryReport {
  Mat truth;       // T x m
  Mat kf_est, knet_est;
  Mat kf_sigma, knet_sigma;  // per-dimension 1-sigma band half-widths
};

inline TrajectoryReport single_trajectory_report(
    const ExperimentConfig& cfg, const GainNetworkParams& params, int index,
    const std::string& out_path = "", const std::string& svg_path = "") {
  validate_config(cfg);
  require(index >= 0 && index < cfg.test_n,
          "single_trajectory_report: index out of range");
  ScenarioData data = generate_scenario_datasets(cfg);
  KnetPipeline pipe = make_knet_pipeline(cfg, data);
  const Trajectory& traj = data.test.trajectories[index];
  const Trajectory& wtraj = pipe.test.trajectories[index];
  const int T = cfg.T, m = cfg.true_model.m();

  TrajectoryReport rep;
  rep.truth = traj.states;
  rep.kf_est.resize(T, m);
  rep.kf_sigma.resize(T, m);
  rep.knet_est.resize(T, m);
  rep.knet_sigma.resize(T, m);

  auto moments = kf_filter(cfg.assumed_model, traj.observations,
                           traj.init_state, cfg.x0.cov);
  for (int t = 0; t < T; ++t) {
    rep.kf_est.row(t) = moments[static_cast<std::size_t>(t)].x_post.transpose();
    for (int i = 0; i < m; ++i) {
      const double v = moments[static_cast<std::size_t>(t)].sigma_post(i, i);
      rep.kf_sigma(t, i) = v >= 0.0 ? std::sqrt(v)
                                    : std::numeric_limits<double>::quiet_NaN();
    }
  }

  KnetRun run =
      run_knet(params, pipe.assumed, wtraj.observations, wtraj.init_state);
  if (run.diverged) {
    throw DivergenceError("single_trajectory_report: filter diverged at t=" +
                          std::to_string(run.diverged_at));
  }
  rep.knet_est = run.estimates;
  ObservationGeometry geom = make_geometry(pipe.assumed.H, pipe.assumed.R);
  ErrorPrediction pred = predict_error(run.gains, geom);
  for (int t = 0; t < T; ++t) {
    rep.knet_sigma.row(t) = pred.stddev[static_cast<std::size_t>(t)].transpose();
  }

  if (!out_path.empty()) {
    std::ofstream out = open_out(out_path);
    out << "t,dim,truth,kf_est,kf_sigma,knet_est,knet_sigma\n";
    for (int t = 0; t < T; ++t) {
      for (int i = 0; i < m; ++i) {
        out << (t + 1) << ',' << i << ',' << fmt17(rep.truth(t, i)) << ','
            << fmt17(rep.kf_est(t, i)) << ',' << fmt17(rep.kf_sigma(t, i))
            << ',' << fmt17(rep.knet_est(t, i)) << ','
            << fmt17(rep.knet_sigma(t, i)) << "\n";
      }
    }
  }
  if (!svg_path.empty()) {
    std::vector<double> ts(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) ts[static_cast<std::size_t>(t)] = t + 1;
    auto col = [&](const Mat& m2, int dim) {
      std::vector<double> v(static_cast<std::size_t>(T));
      for (int t = 0; t < T; ++t) v[static_cast<std::size_t>(t)] = m2(t, dim);
      return v;
    };
    auto band = [&](const Mat& est, const Mat& sig, int dim, double sgn) {
      std::vector<double> v(static_cast<std::size_t>(T));
      for (int t = 0; t < T; ++t) {
        v[static_cast<std::size_t>(t)] = est(t, dim) + sgn * sig(t, dim);
      }
      return v;
    };
    std::vector<SvgSeries> series;
    series.push_back({"truth", "#333333", false, ts, col(rep.truth, 0)});
    series.push_back({"kf", "#1f77b4", false, ts, col(rep.kf_est, 0)});
    series.push_back({"kf +1s", "#1f77b4", true, ts,
                      band(rep.kf_est, rep.kf_sigma, 0, 1.0)});
    series.push_back({"kf -1s", "#1f77b4", true, ts,
                      band(rep.kf_est, rep.kf_sigma, 0, -1.0)});
    series.push_back({"knet", "#d62728", false, ts, col(rep.knet_est, 0)});
    series.push_back({"knet +1s", "#d62728", true, ts,
                      band(rep.knet_est, rep.knet_sigma, 0, 1.0)});
    series.push_back({"knet -1s", "#d62728", true, ts,
                      band(rep.knet_est, rep.knet_sigma, 0, -1.0)});
    write_svg_chart(svg_path, series, "t", "state (dim 0)");
  }
  return rep;
}

// ---- Theorem-style equivalence sweep (covtest) -------------------------------

struct CovtestSpec {
  int m = 0;  // 0 -> random in [1,4]
  int n = 0;  // 0 -> random in [m,5]
  int draws = 100;
  std::uint64_t seed = 1;
  int T = 30;
  double tol = 1e-9;
};

struct CovtestFailure {
  int draw = -1;
  std::uint64_t seed = 0;
  double rel_err = 0.0;
};

struct CovtestReport {
  bool pass = false;
  double max_rel_err = 0.0;
  int draws = 0;
  std::vector<CovtestFailure> failures;
};

namespace detail {

inline Mat random_gaussian_matrix(Rng& rng, int rows, int cols) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = rng.next_gaussian();
  }
  return m;
}

// Random system with a stable F, well-conditioned full-column-rank H,
// SPD Q and R, and a random PSD starting covariance.
struct RandomSystem {
  StateSpaceModel model;
  Mat sigma0;
};

inline RandomSystem random_system(Rng& rng, int m, int n) {
  Mat f = random_gaussian_matrix(rng, m, m);
  const double radius = f.eigenvalues().cwiseAbs().maxCoeff();
  f *= rng.next_uniform(0.3, 0.95) / std::max(radius, 1e-6);

  Mat h;
  for (int tries = 0;; ++tries) {
    h = random_gaussian_matrix(rng, n, m);
    Eigen::JacobiSVD<Mat> svd(h);
    if (svd.singularValues()(svd.singularValues().size() - 1) >
        1e-2 * svd.singularValues()(0)) {
      break;
    }
    require(tries < 100, "random_system: could not draw well-conditioned H");
  }
  const Mat gq = random_gaussian_matrix(rng, m, m);
  const Mat q = gq * gq.transpose() / m + 0.01 * Mat::Identity(m, m);
  const Mat gr = random_gaussian_matrix(rng, n, n);
  const Mat r = gr * gr.transpose() / n + 0.1 * Mat::Identity(n, n);
  const Mat g0 = random_gaussian_matrix(rng, m, m);
  RandomSystem sys;
  sys.model = make_model(linear_evolution(f), h, q, r);
  sys.sigma0 = g0 * g0.transpose() / m;
  return sys;
}

}  // namespace detail

// Feeds exact KF gains into the gain-to-covariance extraction and compares
// against the filter's own covariance recursion.
inline CovtestReport covtest(const CovtestSpec& spec) {
  CovtestReport report;
  report.draws = spec.draws;
  for (int d = 0; d < spec.draws; ++d) {
    const std::uint64_t draw_seed = spec.seed ^ static_cast<std::uint64_t>(d);
    Rng rng = Rng::substream(spec.seed, static_cast<std::uint64_t>(d));
    const int m = spec.m > 0 ? spec.m : 1 + static_cast<int>(rng.next_below(4));
    const int n = spec.n > 0
                      ? spec.n
                      : m + static_cast<int>(rng.next_below(
                                static_cast<std::uint64_t>(5 - m + 1)));
    require(n >= m, "covtest: requires n >= m");
    detail::RandomSystem sys = detail::random_system(rng, m, n);
    const ObservationGeometry geom = make_geometry(sys.model.H, sys.model.R);
    auto seq = kf_covariance_sequence(sys.model, sys.sigma0, spec.T);
    double worst = 0.0;
    for (const auto& step : seq) {
      const Mat sigma_thm = error_cov_from_gain(step.gain, geom);
      const double scale =
          std::max(step.sigma_post.cwiseAbs().maxCoeff(), 1e-30);
      worst = std::max(
          worst, (sigma_thm - step.sigma_post).cwiseAbs().maxCoeff() / scale);
    }
    report.max_rel_err = std::max(report.max_rel_err, worst);
    if (worst >= spec.tol) {
      report.failures.push_back({d, draw_seed, worst});
    }
  }
  report.pass = report.failures.empty();
  return report;
}

}  // namespace knetuq
