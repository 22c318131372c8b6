#include "knetuq/knet.hpp"

#include "knetuq/harness.hpp"
#include "knetuq/kalman.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace knetuq;

namespace {

StateSpaceModel scalar_model(double f = 0.9) {
  return make_scalar_model(f, 1.0, 1.0, 1.0);
}

double fd_check_max_rel(const GainNetworkParams& params,
                        const StateSpaceModel& model,
                        const std::vector<const Trajectory*>& batch) {
  GainNetworkParams grads;
  bptt_gradients(params, model, batch, grads);
  GainNetworkParams p = params;
  auto ts = tensor_list(p);
  auto gs = tensor_list(grads);
  double max_rel = 0.0;
  for (std::size_t k = 0; k < ts.size(); ++k) {
    Mat& t = *ts[k];
    for (int i = 0; i < t.rows(); ++i) {
      for (int j = 0; j < t.cols(); ++j) {
        const double orig = t(i, j);
        const double h = 1e-6 * std::max(1.0, std::abs(orig));
        GainNetworkParams scratch;
        t(i, j) = orig + h;
        const double lp = bptt_gradients(p, model, batch, scratch);
        t(i, j) = orig - h;
        const double lm = bptt_gradients(p, model, batch, scratch);
        t(i, j) = orig;
        const double fd = (lp - lm) / (2.0 * h);
        const double an = (*gs[k])(i, j);
        const double rel =
            std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        max_rel = std::max(max_rel, rel);
      }
    }
  }
  return max_rel;
}

}  // namespace

TEST_CASE("knet_init stores the assumed model and zeroes the memory") {
  auto params = init_gain_network({1, 1, 4, false}, 3);
  auto mismatched = scalar_model(0.5);
  auto st = knet_init(mismatched, Vec::Zero(1), params);
  REQUIRE(st.assumed.evolution.F(0, 0) == 0.5);  // not the data-generating 0.9
  REQUIRE(st.hidden.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(st.x_post_prev == st.x_prior_prev);

  auto st2 = knet_init(mismatched, Vec::Zero(1), params);
  REQUIRE(st.x_post_prev == st2.x_post_prev);
  REQUIRE(st.t == st2.t);
}

TEST_CASE("zero-weight network follows pure model prediction") {
  auto model = scalar_model();
  auto params = zero_gain_network({1, 1, 4, false});
  auto ds = generate_dataset(model, 20, 1, known_start(Vec::Constant(1, 2.0)), 5);
  auto run = run_knet(params, model, ds.trajectories[0].observations,
                      ds.trajectories[0].init_state);
  REQUIRE_FALSE(run.diverged);
  for (int t = 0; t < 20; ++t) {
    REQUIRE(run.estimates(t, 0) ==
            Catch::Approx(2.0 * std::pow(0.9, t + 1)).epsilon(1e-12));
    REQUIRE(run.gains[t].cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("first step with y1 = H x0 and zero net gives x1 = F x0") {
  auto model = scalar_model();
  auto params = zero_gain_network({1, 1, 4, false});
  auto st = knet_init(model, Vec::Constant(1, 1.5), params);
  auto r = knet_step(st, params, Vec::Constant(1, 1.5));
  REQUIRE(r.x_post(0) == Catch::Approx(0.9 * 1.5).epsilon(1e-14));
}

TEST_CASE("gain sequence forced to the KF's reproduces the KF exactly") {
  // structural fidelity of the recursion
  auto model = scalar_model();
  auto seq = kf_covariance_sequence(model, Mat::Zero(1, 1), 50);
  auto ds = generate_dataset(model, 50, 3, known_start(Vec::Zero(1)), 10);
  auto params = zero_gain_network({1, 1, 2, false});
  for (const auto& traj : ds.trajectories) {
    auto moments =
        kf_filter(model, traj.observations, traj.init_state, Mat::Zero(1, 1));
    KnetState st = knet_init(model, traj.init_state, params);
    for (int t = 0; t < 50; ++t) {
      auto r = knet_apply_gain(st, seq[t].gain,
                               traj.observations.row(t).transpose());
      REQUIRE(std::abs(r.x_post(0) - moments[t].x_post(0)) < 1e-12);
    }
  }
}

TEST_CASE("network frozen at the steady-state gain equals the fixed-gain KF") {
  auto model = scalar_model();
  auto fp = kf_riccati_steady_state(model);
  // bias-only network pinned to K_infinity
  auto params = zero_gain_network({1, 1, 2, false});
  params.b_out(0, 0) = fp.gain(0, 0);
  auto ds = generate_dataset(model, 40, 2, known_start(Vec::Zero(1)), 77);
  for (const auto& traj : ds.trajectories) {
    auto run = run_knet(params, model, traj.observations, traj.init_state);
    // reference: the same recursion with the constant steady-state gain
    Vec x = traj.init_state;
    for (int t = 0; t < 40; ++t) {
      const double xp = 0.9 * x(0);
      const double xe =
          xp + fp.gain(0, 0) * (traj.observations(t, 0) - xp);
      REQUIRE(std::abs(run.estimates(t, 0) - xe) < 1e-12);
      x(0) = xe;
    }
  }
}

TEST_CASE("bptt: zero-weight network still reaches the output bias") {
  auto model = scalar_model();
  auto ds = generate_dataset(model, 15, 2, known_start(Vec::Zero(1)), 3);
  auto params = zero_gain_network({1, 1, 4, false});
  std::vector<const Trajectory*> batch{&ds.trajectories[0],
                                       &ds.trajectories[1]};
  GainNetworkParams grads;
  bptt_gradients(params, model, batch, grads);
  REQUIRE(grads.b_out.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("bptt matches central finite differences (scalar)") {
  auto model = scalar_model();
  auto ds = generate_dataset(model, 12, 3, known_start(Vec::Zero(1)), 21);
  auto params = init_gain_network({1, 1, 5, false}, 31);
  std::vector<const Trajectory*> batch;
  for (auto& t : ds.trajectories) batch.push_back(&t);
  REQUIRE(fd_check_max_rel(params, model, batch) < 1e-4);
}

TEST_CASE("bptt matches central finite differences (2x2, normalized)") {
  Mat f(2, 2);
  f << 0.9, 0.1, -0.05, 0.8;
  auto model = make_linear_model(f, Mat::Identity(2, 2), Mat::Identity(2, 2),
                                 Mat::Identity(2, 2));
  auto ds = generate_dataset(model, 10, 2, known_start(Vec::Zero(2)), 8);
  GainNetConfig cfg{2, 2, 6, true};
  auto params = init_gain_network(cfg, 12);
  std::vector<const Trajectory*> batch;
  for (auto& t : ds.trajectories) batch.push_back(&t);
  REQUIRE(fd_check_max_rel(params, model, batch) < 1e-4);
}

TEST_CASE("duplicating the batch leaves the mean-loss gradient unchanged") {
  auto model = scalar_model();
  auto ds = generate_dataset(model, 10, 2, known_start(Vec::Zero(1)), 14);
  auto params = init_gain_network({1, 1, 4, false}, 2);
  std::vector<const Trajectory*> batch{&ds.trajectories[0],
                                       &ds.trajectories[1]};
  std::vector<const Trajectory*> doubled{&ds.trajectories[0],
                                         &ds.trajectories[1],
                                         &ds.trajectories[0],
                                         &ds.trajectories[1]};
  GainNetworkParams g1, g2;
  const double l1 = bptt_gradients(params, model, batch, g1);
  const double l2 = bptt_gradients(params, model, doubled, g2);
  REQUIRE(l1 == Catch::Approx(l2).margin(1e-12));
  auto t1 = tensor_list(g1), t2 = tensor_list(g2);
  for (std::size_t i = 0; i < t1.size(); ++i) {
    REQUIRE((*t1[i] - *t2[i]).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("training on noiseless data from an exact model floors the loss") {
  auto model = make_scalar_model(0.9, 1.0, 0.0, 0.0);
  auto train = generate_dataset(model, 20, 8, known_start(Vec::Constant(1, 1.0)), 1);
  auto val = generate_dataset(model, 20, 4, known_start(Vec::Constant(1, 1.0)), 2, "val");
  TrainConfig tc;
  tc.hidden = 4;
  tc.max_epochs = 3;
  tc.batch_size = 4;
  tc.seed = 5;
  auto result = train_knet(model, train, val, tc);
  REQUIRE(to_db(result.best_val_mse) < -40.0);
}

TEST_CASE("trained scalar filter approaches the KF floor") {
  auto cfg = linear_full_config();
  auto model = cfg.true_model;
  auto train = generate_dataset(model, 100, 150, known_start(Vec::Zero(1)), 11);
  auto val = generate_dataset(model, 100, 30, known_start(Vec::Zero(1)), 12, "val");
  auto test = generate_dataset(model, 100, 400, known_start(Vec::Zero(1)), 13, "test");
  TrainConfig tc;
  tc.max_epochs = 40;
  tc.patience = 15;
  tc.seed = 3;
  auto result = train_knet(model, train, val, tc);

  auto knet_ms = evaluate_knet(result.params, model, test,
                               make_geometry(model.H, model.R));
  auto kf_ms = evaluate_model_filter(model, test, Mat::Zero(1, 1));
  const double knet_db = time_averaged_db(knet_ms.empirical_mse, 19);
  const double kf_db = time_averaged_db(kf_ms.empirical_mse, 19);
  REQUIRE(std::abs(knet_db - kf_db) < 0.5);
}

TEST_CASE("mismatch training beats the mismatched KF") {
  auto data_model = scalar_model(0.9);
  auto assumed = scalar_model(0.5);
  auto train = generate_dataset(data_model, 100, 150, known_start(Vec::Zero(1)), 6);
  auto val = generate_dataset(data_model, 100, 30, known_start(Vec::Zero(1)), 7, "val");
  auto test = generate_dataset(data_model, 100, 400, known_start(Vec::Zero(1)), 8, "test");
  TrainConfig tc;
  tc.max_epochs = 60;
  tc.patience = 20;
  tc.seed = 9;
  auto result = train_knet(assumed, train, val, tc);
  auto knet_ms = evaluate_knet(result.params, assumed, test,
                               make_geometry(assumed.H, assumed.R));
  auto kf_ms = evaluate_model_filter(assumed, test, Mat::Zero(1, 1));
  REQUIRE(time_averaged_db(knet_ms.empirical_mse) <
          time_averaged_db(kf_ms.empirical_mse));
}

TEST_CASE("training reproduces the loss curve bitwise for a fixed seed") {
  auto model = scalar_model();
  auto train = generate_dataset(model, 30, 24, known_start(Vec::Zero(1)), 44);
  auto val = generate_dataset(model, 30, 8, known_start(Vec::Zero(1)), 45, "val");
  TrainConfig tc;
  tc.hidden = 6;
  tc.max_epochs = 4;
  tc.batch_size = 8;
  tc.seed = 10;
  auto a = train_knet(model, train, val, tc);
  auto b = train_knet(model, train, val, tc);
  REQUIRE(a.curve.size() == b.curve.size());
  for (std::size_t e = 0; e < a.curve.size(); ++e) {
    REQUIRE(a.curve[e].train_db == b.curve[e].train_db);
    REQUIRE(a.curve[e].val_db == b.curve[e].val_db);
  }
}

TEST_CASE("evaluate_knet: noiseless exact model scores below -40 dB") {
  auto model = make_scalar_model(0.9, 1.0, 0.0, 0.0);
  auto test = generate_dataset(model, 20, 5, known_start(Vec::Constant(1, 1.0)), 3, "test");
  auto params = init_gain_network({1, 1, 4, false}, 2);
  auto ms = evaluate_knet(params, model, test);  // no geometry: R is singular
  for (double db : ms.empirical_db) REQUIRE(db < -40.0);
  for (double v : ms.predicted_trace) REQUIRE(std::isnan(v));
}

TEST_CASE("evaluate_knet: frozen steady-state gain predicts 0.59741 always") {
  auto model = scalar_model();
  auto fp = kf_riccati_steady_state(model);
  auto params = zero_gain_network({1, 1, 2, false});
  params.b_out(0, 0) = fp.gain(0, 0);
  auto test = generate_dataset(model, 25, 10, known_start(Vec::Zero(1)), 19, "test");
  auto ms = evaluate_knet(params, model, test, make_geometry(model.H, model.R));
  for (double v : ms.predicted_trace) {
    REQUIRE(v == Catch::Approx(0.59741).epsilon(1e-4));
  }
}

TEST_CASE("evaluate_knet: N=1 reduces to the squared-error series") {
  auto model = scalar_model();
  auto test = generate_dataset(model, 30, 1, known_start(Vec::Zero(1)), 23, "test");
  auto params = init_gain_network({1, 1, 4, false}, 6);
  auto ms = evaluate_knet(params, model, test);
  auto run = run_knet(params, model, test.trajectories[0].observations,
                      test.trajectories[0].init_state);
  for (int t = 0; t < 30; ++t) {
    const double e = run.estimates(t, 0) - test.trajectories[0].states(t, 0);
    REQUIRE(ms.empirical_mse[t] == Catch::Approx(e * e).epsilon(1e-12));
  }
}

TEST_CASE("divergence names the timestep") {
  // a huge constant gain overflows the estimate within a few steps
  auto model = scalar_model();
  auto params = zero_gain_network({1, 1, 2, false});
  params.b_out(0, 0) = 1e150;
  auto st = knet_init(model, Vec::Zero(1), params);
  try {
    for (int t = 0; t < 10; ++t) {
      (void)knet_step(st, params, Vec::Constant(1, 1.0));
    }
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    REQUIRE(std::string(e.what()).find("timestep") != std::string::npos);
  }

  // run_knet flags the same failure instead of throwing
  Mat obs = Mat::Ones(10, 1);
  auto run = run_knet(params, model, obs, Vec::Zero(1));
  REQUIRE(run.diverged);
  REQUIRE(run.diverged_at >= 1);
}
