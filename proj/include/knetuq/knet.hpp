#pragma once

#include "knetuq/common.hpp"
#include "knetuq/gainnet.hpp"
#include "knetuq/kalman.hpp"
#include "knetuq/metrics.hpp"
#include "knetuq/ssmodel.hpp"
#include "knetuq/uncertainty.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace knetuq {

// Recurrent filter state: everything the next step's features and prediction
// need. The assumed model may carry a mismatched F or Jacobian scheme.
struct KnetState {
  StateSpaceModel assumed;
  Vec x_post_prev;   // x̂_{t-1}
  Vec x_prior_prev;  // x̂_{t-1|t-2}
  Vec y_prev;        // y_{t-1}
  Vec hidden;        // GRU state
  int t = 1;         // timestep about to be processed (1-based)
};

inline KnetState knet_init(const StateSpaceModel& assumed, const Vec& x0,
                           const GainNetworkParams& params) {
  require(x0.size() == assumed.m(), "knet_init: x0 dimension mismatch");
  require(params.m == assumed.m() && params.n == assumed.n(),
          "knet_init: network shaped for a different model");
  KnetState st;
  st.assumed = assumed;
  st.x_post_prev = x0;
  st.x_prior_prev = x0;  // x̂_{0|-1} := x̂_0, so the t=1 difference feature is 0
  st.y_prev = Vec::Zero(assumed.n());
  st.hidden = Vec::Zero(params.hidden);
  st.t = 1;
  return st;
}

struct KnetStepResult {
  Vec x_post;
  Mat gain;
};

// The Kalman-style update with an externally supplied gain; the learned
// filter is exactly this recursion with K from the network.
inline KnetStepResult knet_apply_gain(KnetState& state, const Mat& gain,
                                      const Vec& y) {
  const Vec x_prior = state.assumed.evolution.step(state.x_post_prev);
  const Vec y_pred = state.assumed.H * x_prior;
  const Vec innovation = y - y_pred;
  KnetStepResult out;
  out.gain = gain;
  out.x_post = x_prior + gain * innovation;
  if (!out.x_post.allFinite()) {
    throw DivergenceError("knet_step: non-finite estimate at timestep " +
                          std::to_string(state.t));
  }
  state.x_prior_prev = x_prior;
  state.x_post_prev = out.x_post;
  state.y_prev = y;
  state.t += 1;
  return out;
}

inline KnetStepResult knet_step(KnetState& state,
                                const GainNetworkParams& params, const Vec& y) {
  require(y.size() == state.assumed.n(), "knet_step: observation dim mismatch");
  const Vec x_prior = state.assumed.evolution.step(state.x_post_prev);
  const Vec y_pred = state.assumed.H * x_prior;
  const Vec innovation = y - y_pred;
  const Vec obs_diff =
      state.t == 1 ? Vec::Zero(state.assumed.n()).eval() : (y - state.y_prev).eval();
  const Vec fwd_diff = state.x_post_prev - state.x_prior_prev;
  const Vec features = assemble_features(innovation, obs_diff, fwd_diff,
                                         params.normalize_features);
  GainForwardResult fw = gain_forward(params, state.hidden, features);
  state.hidden = fw.hidden;
  return knet_apply_gain(state, fw.gain, y);
}

struct KnetRun {
  Mat estimates;           // T x m (valid rows up to diverged_at if diverged)
  std::vector<Mat> gains;  // per-step K_t
  bool diverged = false;
  int diverged_at = -1;    // 1-based timestep of failure
};

inline KnetRun run_knet(const GainNetworkParams& params,
                        const StateSpaceModel& assumed, const Mat& observations,
                        const Vec& x0) {
  const int T = static_cast<int>(observations.rows());
  KnetRun out;
  out.estimates = Mat::Zero(T, assumed.m());
  out.gains.reserve(static_cast<std::size_t>(T));
  KnetState st = knet_init(assumed, x0, params);
  for (int t = 0; t < T; ++t) {
    try {
      KnetStepResult r = knet_step(st, params, observations.row(t).transpose());
      out.estimates.row(t) = r.x_post.transpose();
      out.gains.push_back(std::move(r.gain));
    } catch (const DivergenceError&) {
      out.diverged = true;
      out.diverged_at = t + 1;
      break;
    } catch (const NumericError&) {
      out.diverged = true;
      out.diverged_at = t + 1;
      break;
    }
  }
  return out;
}

// ---- backpropagation through time -------------------------------------- //

namespace detail {

// Everything the reverse sweep needs, stored row-per-step.
struct BpttTape {
  Mat x_prev, x_prior, dy, feat_raw, feat;       // T x {m, m, n, fd, fd}
  Mat a, zg, rg, cand, h_prev, h_new, rh;        // T x h
  Mat gkvec;                                     // T x (m n), filled backward
  std::vector<Mat> jac;                          // exact Jacobian per step
  Mat estimates;                                 // T x m
  std::vector<double> norm_gamma;                // feature normalizer per step
};

}  // namespace detail

// Exact reverse-mode gradient of the mean squared state error
//   L = mean over {batch, t, state dim} of |x̂_t - x_t|^2
// through the filter recursion and the recurrent network. Returns the loss.
inline double bptt_gradients(const GainNetworkParams& params,
                             const StateSpaceModel& assumed,
                             const std::vector<const Trajectory*>& batch,
                             GainNetworkParams& grads_out) {
  require(!batch.empty(), "bptt_gradients: empty batch");
  const int T = batch.front()->length();
  for (const Trajectory* tr : batch) {
    require(tr->length() == T, "bptt_gradients: trajectories must share T");
  }
  const int m = params.m, n = params.n, h = params.hidden;
  const int fd = params.feature_dim, gd = params.gain_dim();
  require(assumed.m() == m && assumed.n() == n,
          "bptt_gradients: model/network shape mismatch");

  GainNetConfig shape{m, n, h, params.normalize_features};
  grads_out = zero_gain_network(shape);

  std::vector<GainNetworkParams> slot_grads(batch.size());
  std::vector<double> slot_loss(batch.size(), 0.0);

  const bool linear = assumed.evolution.linear();
  const Mat f_const = linear ? assumed.evolution.F : Mat();

  parallel_for(static_cast<int>(batch.size()), [&](int bi) {
    const Trajectory& traj = *batch[bi];
    detail::BpttTape tape;
    tape.x_prev.resize(T, m);
    tape.x_prior.resize(T, m);
    tape.dy.resize(T, n);
    tape.feat_raw.resize(T, fd);
    tape.feat.resize(T, fd);
    tape.a.resize(T, h);
    tape.zg.resize(T, h);
    tape.rg.resize(T, h);
    tape.cand.resize(T, h);
    tape.h_prev.resize(T, h);
    tape.h_new.resize(T, h);
    tape.rh.resize(T, h);
    tape.gkvec.resize(T, gd);
    tape.estimates.resize(T, m);
    tape.norm_gamma.assign(T, 1.0);
    if (!linear) tape.jac.resize(T);

    // forward
    Vec x_post = traj.init_state;
    Vec x_prior_prev = traj.init_state;
    Vec y_prev = Vec::Zero(n);
    Vec hidden = Vec::Zero(h);
    for (int t = 0; t < T; ++t) {
      const Vec y = traj.observations.row(t).transpose();
      tape.x_prev.row(t) = x_post.transpose();
      if (!linear) {
        tape.jac[t] = assumed.evolution.exact_jacobian(x_post);
      }
      const Vec x_prior = assumed.evolution.step(x_post);
      const Vec dy = y - assumed.H * x_prior;
      const Vec od = t == 0 ? Vec::Zero(n).eval() : (y - y_prev).eval();
      const Vec fdv = x_post - x_prior_prev;
      Vec feat_raw(fd);
      feat_raw << dy, od, fdv;
      Vec feat = feat_raw;
      if (params.normalize_features) {
        const double gamma =
            std::sqrt(1.0 + feat_raw.squaredNorm() / static_cast<double>(fd));
        feat = feat_raw / gamma;
        tape.norm_gamma[t] = gamma;
      }
      const Vec a = (params.w_in * feat + params.b_in.col(0)).array().tanh();
      const Vec zg = (params.w_z * a + params.u_z * hidden + params.b_z.col(0))
                         .unaryExpr([](double v) { return sigmoid(v); });
      const Vec rg = (params.w_r * a + params.u_r * hidden + params.b_r.col(0))
                         .unaryExpr([](double v) { return sigmoid(v); });
      const Vec rh = rg.cwiseProduct(hidden);
      const Vec cand =
          (params.w_c * a + params.u_c * rh + params.b_c.col(0)).array().tanh();
      const Vec h_new =
          (Vec::Ones(h) - zg).cwiseProduct(cand) + zg.cwiseProduct(hidden);
      const Vec kvec = params.w_out * h_new + params.b_out.col(0);

      Mat gain(m, n);
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) gain(i, j) = kvec(i * n + j);
      }
      const Vec x_new = x_prior + gain * dy;
      if (!x_new.allFinite()) {
        throw DivergenceError("bptt_gradients: non-finite estimate at timestep " +
                              std::to_string(t + 1));
      }

      tape.x_prior.row(t) = x_prior.transpose();
      tape.dy.row(t) = dy.transpose();
      tape.feat_raw.row(t) = feat_raw.transpose();
      tape.feat.row(t) = feat.transpose();
      tape.a.row(t) = a.transpose();
      tape.zg.row(t) = zg.transpose();
      tape.rg.row(t) = rg.transpose();
      tape.cand.row(t) = cand.transpose();
      tape.h_prev.row(t) = hidden.transpose();
      tape.h_new.row(t) = h_new.transpose();
      tape.rh.row(t) = rh.transpose();
      tape.estimates.row(t) = x_new.transpose();

      x_prior_prev = x_prior;
      x_post = x_new;
      y_prev = y;
      hidden = h_new;
    }

    const double scale = 1.0 / (static_cast<double>(T) * m);
    slot_loss[bi] =
        scale * (tape.estimates - traj.states).squaredNorm();

    // backward
    Mat dsz(T, h), dsr(T, h), dsc(T, h), dsi(T, h);
    Vec gx_post = Vec::Zero(m);        // dL/dx̂_t flowing into step t
    Vec gh = Vec::Zero(h);             // dL/dh_t from downstream
    Vec gx_prior_carry = Vec::Zero(m); // from the t+1 forward-difference feature
    for (int t = T - 1; t >= 0; --t) {
      const Vec err = (tape.estimates.row(t) - traj.states.row(t)).transpose();
      gx_post += 2.0 * scale * err;

      const Vec dy = tape.dy.row(t).transpose();
      const Vec h_new = tape.h_new.row(t).transpose();
      const Vec h_prev = tape.h_prev.row(t).transpose();
      const Vec a = tape.a.row(t).transpose();
      const Vec zg = tape.zg.row(t).transpose();
      const Vec rg = tape.rg.row(t).transpose();
      const Vec cand = tape.cand.row(t).transpose();

      // gain and output layer
      Vec gkvec(gd);
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          gkvec(i * n + j) = gx_post(i) * dy(j);
        }
      }
      tape.gkvec.row(t) = gkvec.transpose();
      Vec gh_total = gh + params.w_out.transpose() * gkvec;

      // innovation path through K dy
      const Vec kvec = params.w_out * h_new + params.b_out.col(0);
      Mat gain(m, n);
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) gain(i, j) = kvec(i * n + j);
      }
      Vec g_dy = gain.transpose() * gx_post;

      // GRU cell
      const Vec g_zg = gh_total.cwiseProduct(h_prev - cand);
      const Vec g_cand =
          gh_total.cwiseProduct(Vec::Ones(h) - zg);
      Vec gh_prev = gh_total.cwiseProduct(zg);

      const Vec dsc_t = g_cand.cwiseProduct(
          (Vec::Ones(h) - cand.cwiseProduct(cand)));
      dsc.row(t) = dsc_t.transpose();
      Vec ga = params.w_c.transpose() * dsc_t;
      const Vec g_rh = params.u_c.transpose() * dsc_t;
      const Vec g_rg = g_rh.cwiseProduct(h_prev);
      gh_prev += g_rh.cwiseProduct(rg);

      const Vec dsr_t = g_rg.cwiseProduct(rg.cwiseProduct(Vec::Ones(h) - rg));
      dsr.row(t) = dsr_t.transpose();
      ga += params.w_r.transpose() * dsr_t;
      gh_prev += params.u_r.transpose() * dsr_t;

      const Vec dsz_t = g_zg.cwiseProduct(zg.cwiseProduct(Vec::Ones(h) - zg));
      dsz.row(t) = dsz_t.transpose();
      ga += params.w_z.transpose() * dsz_t;
      gh_prev += params.u_z.transpose() * dsz_t;

      // input layer
      const Vec dsi_t = ga.cwiseProduct(Vec::Ones(h) - a.cwiseProduct(a));
      dsi.row(t) = dsi_t.transpose();
      Vec gfeat = params.w_in.transpose() * dsi_t;

      // feature normalization
      if (params.normalize_features) {
        const Vec f = tape.feat_raw.row(t).transpose();
        const double gamma = tape.norm_gamma[t];
        const double inner = f.dot(gfeat);
        gfeat = gfeat / gamma -
                f * (inner / (static_cast<double>(fd) * gamma * gamma * gamma));
      }

      g_dy += gfeat.head(n);
      const Vec g_fd = gfeat.tail(m);

      // x_prior collects: direct update path, observation prediction path,
      // and the carry from the t+1 forward-difference feature.
      Vec gx_prior = gx_post - assumed.H.transpose() * g_dy + gx_prior_carry;

      // flow to x̂_{t-1}
      Vec gx_prev;
      if (linear) {
        gx_prev = f_const.transpose() * gx_prior;
      } else {
        gx_prev = tape.jac[t].transpose() * gx_prior;
      }
      gx_prev += g_fd;

      gx_post = gx_prev;
      gh = gh_prev;
      gx_prior_carry = -g_fd;
    }

    // weight-gradient GEMMs over the whole sequence
    GainNetworkParams& g = slot_grads[bi];
    g = zero_gain_network(shape);
    g.w_in = dsi.transpose() * tape.feat;
    g.b_in = dsi.colwise().sum().transpose();
    g.w_z = dsz.transpose() * tape.a;
    g.u_z = dsz.transpose() * tape.h_prev;
    g.b_z = dsz.colwise().sum().transpose();
    g.w_r = dsr.transpose() * tape.a;
    g.u_r = dsr.transpose() * tape.h_prev;
    g.b_r = dsr.colwise().sum().transpose();
    g.w_c = dsc.transpose() * tape.a;
    g.u_c = dsc.transpose() * tape.rh;
    g.b_c = dsc.colwise().sum().transpose();
    g.w_out = tape.gkvec.transpose() * tape.h_new;
    g.b_out = tape.gkvec.colwise().sum().transpose();
  });

  // ordered reduction keeps results independent of thread interleaving
  double loss = 0.0;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    accumulate(grads_out, slot_grads[bi], w);
    loss += w * slot_loss[bi];
  }
  if (!std::isfinite(loss)) {
    throw DivergenceError("bptt_gradients: non-finite loss");
  }
  return loss;
}

// ---- training ------------------------------------------------------------

struct TrainConfig {
  OptimizerConfig opt;
  int hidden = 0;  // 0 -> default size
  bool normalize_features = false;
  double output_init_scale = 1.0;
  int batch_size = 32;
  int max_epochs = 2000;
  int patience = 50;          // epochs without validation improvement
  double clip_norm = 1.0;     // global gradient norm
  double val_loss_cap = 1e6;  // divergent validation trajectories cap here
  std::uint64_t seed = 0;     // parameter init and batch shuffling
  bool verbose = false;
};

struct EpochStats {
  double train_db = 0.0;
  double val_db = 0.0;
};

struct TrainResult {
  GainNetworkParams params;       // best-validation parameters
  std::vector<EpochStats> curve;  // per epoch
  int best_epoch = -1;            // 0-based
  double best_val_mse = 0.0;
};

inline double validation_mse(const GainNetworkParams& params,
                             const StateSpaceModel& assumed, const Dataset& val,
                             double cap) {
  std::vector<double> losses(val.size(), 0.0);
  parallel_for(val.size(), [&](int i) {
    const Trajectory& traj = val.trajectories[i];
    KnetRun run = run_knet(params, assumed, traj.observations, traj.init_state);
    if (run.diverged) {
      losses[i] = cap;
      return;
    }
    const double mse = (run.estimates - traj.states).squaredNorm() /
                       (static_cast<double>(traj.length()) * assumed.m());
    losses[i] = std::isfinite(mse) ? std::min(mse, cap) : cap;
  });
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(val.size());
}

inline TrainResult train_knet(const StateSpaceModel& assumed,
                              const Dataset& train, const Dataset& val,
                              const TrainConfig& cfg) {
  require(train.size() >= 1 && val.size() >= 1,
          "train_knet: datasets must be nonempty");
  require(cfg.max_epochs >= 1, "train_knet: max_epochs must be >= 1");
  GainNetConfig net_cfg{assumed.m(), assumed.n(), cfg.hidden,
                        cfg.normalize_features, cfg.output_init_scale};
  TrainResult result;
  GainNetworkParams params = init_gain_network(net_cfg, cfg.seed);
  OptimizerState opt = make_optimizer(params, cfg.opt);
  Rng shuffle_rng(cfg.seed ^ 0x53485546ULL);

  std::vector<int> order(train.size());
  for (int i = 0; i < train.size(); ++i) order[i] = i;

  result.best_val_mse = std::numeric_limits<double>::infinity();
  int since_best = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < order.size();
         b0 += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<const Trajectory*> batch;
      for (std::size_t i = b0;
           i < std::min(order.size(),
                        b0 + static_cast<std::size_t>(cfg.batch_size));
           ++i) {
        batch.push_back(&train.trajectories[order[i]]);
      }
      GainNetworkParams grads;
      double loss;
      try {
        loss = bptt_gradients(params, assumed, batch, grads);
      } catch (const DivergenceError& e) {
        throw DivergenceError("train_knet: aborted at epoch " +
                              std::to_string(epoch) + ": " + e.what());
      }
      clip_gradient_norm(grads, cfg.clip_norm);
      optimizer_step(params, grads, opt);
      epoch_loss += loss * static_cast<double>(batch.size());
    }
    epoch_loss /= static_cast<double>(train.size());

    const double val_mse =
        validation_mse(params, assumed, val, cfg.val_loss_cap);
    result.curve.push_back({to_db(epoch_loss), to_db(val_mse)});

    if (val_mse < result.best_val_mse) {
      result.best_val_mse = val_mse;
      result.best_epoch = epoch;
      result.params = params;
      since_best = 0;
    } else {
      ++since_best;
      if (since_best > cfg.patience) break;
    }
  }
  return result;
}

// ---- evaluation ------------------------------------------------------------

// Runs the learned filter over every test trajectory. Empirical MSE averages
// |x̂_t - x_t|^2 / m over the non-diverged trajectories; predicted error is the
// Theorem-style covariance extracted per step from each trajectory's gains
// (skipped when no geometry is supplied, e.g. a PSD-singular R).
inline MetricSeries evaluate_knet(const GainNetworkParams& params,
                                  const StateSpaceModel& assumed,
                                  const Dataset& test,
                                  const std::optional<ObservationGeometry>&
                                      geom = std::nullopt,
                                  const std::string& label = "knet") {
  require(test.size() >= 1, "evaluate_knet: empty test set");
  const int T = test.T;
  const int m = assumed.m();

  struct Slot {
    std::vector<double> sq;     // |err|^2/m per step
    std::vector<double> trace;  // trace(Σ̂)/m per step
    bool diverged = false;
  };
  std::vector<Slot> slots(test.size());

  parallel_for(test.size(), [&](int i) {
    const Trajectory& traj = test.trajectories[i];
    Slot& slot = slots[i];
    KnetRun run = run_knet(params, assumed, traj.observations, traj.init_state);
    if (run.diverged) {
      slot.diverged = true;
      return;
    }
    slot.sq.resize(T);
    for (int t = 0; t < T; ++t) {
      slot.sq[t] =
          (run.estimates.row(t) - traj.states.row(t)).squaredNorm() / m;
    }
    if (geom) {
      ErrorPrediction pred = predict_error(run.gains, *geom);
      slot.trace.resize(T);
      for (int t = 0; t < T; ++t) {
        slot.trace[t] = pred.sigma[static_cast<std::size_t>(t)].size() > 0
                            ? pred.sigma[static_cast<std::size_t>(t)].trace() / m
                            : std::numeric_limits<double>::quiet_NaN();
      }
    }
  });

  MetricSeries ms;
  ms.label = label;
  ms.empirical_mse.assign(T, 0.0);
  ms.predicted_trace.assign(
      T, geom ? 0.0 : std::numeric_limits<double>::quiet_NaN());
  for (const Slot& slot : slots) {
    if (slot.diverged) {
      ++ms.excluded;
      continue;
    }
    ++ms.count;
    for (int t = 0; t < T; ++t) {
      ms.empirical_mse[t] += slot.sq[t];
      if (geom) ms.predicted_trace[t] += slot.trace[t];
    }
  }
  require(ms.count > 0, "evaluate_knet: every test trajectory diverged");
  for (int t = 0; t < T; ++t) {
    ms.empirical_mse[t] /= ms.count;
    if (geom) ms.predicted_trace[t] /= ms.count;
  }
  fill_db(ms);
  return ms;
}

// Model-based counterpart: KF (or EKF) empirical error plus its own Eq.-style
// predicted covariance trace, aggregated the same way.
inline MetricSeries evaluate_model_filter(const StateSpaceModel& assumed,
                                          const Dataset& test,
                                          const Mat& sigma0,
                                          const std::string& label = "kf") {
  require(test.size() >= 1, "evaluate_model_filter: empty test set");
  const int T = test.T;
  const int m = assumed.m();

  std::vector<std::vector<double>> sq(test.size()), trace(test.size());
  parallel_for(test.size(), [&](int i) {
    const Trajectory& traj = test.trajectories[i];
    auto moments =
        kf_filter(assumed, traj.observations, traj.init_state, sigma0);
    sq[i].resize(T);
    trace[i].resize(T);
    for (int t = 0; t < T; ++t) {
      sq[i][t] = (moments[static_cast<std::size_t>(t)].x_post -
                  traj.states.row(t).transpose())
                     .squaredNorm() /
                 m;
      trace[i][t] = moments[static_cast<std::size_t>(t)].sigma_post.trace() / m;
    }
  });

  MetricSeries ms;
  ms.label = label;
  ms.count = test.size();
  ms.empirical_mse.assign(T, 0.0);
  ms.predicted_trace.assign(T, 0.0);
  for (int i = 0; i < test.size(); ++i) {
    for (int t = 0; t < T; ++t) {
      ms.empirical_mse[t] += sq[i][t];
      ms.predicted_trace[t] += trace[i][t];
    }
  }
  for (int t = 0; t < T; ++t) {
    ms.empirical_mse[t] /= ms.count;
    ms.predicted_trace[t] /= ms.count;
  }
  fill_db(ms);
  return ms;
}

}  // namespace knetuq
