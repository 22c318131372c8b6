#pragma once

#include "knetuq/common.hpp"
#include "knetuq/lorenz.hpp"
#include "knetuq/rng.hpp"

#include <string>
#include <utility>
#include <vector>

namespace knetuq {

// State evolution map: dense linear F or the discretized Lorenz flow.
struct Evolution {
  enum class Kind { kLinear, kLorenz };

  Kind kind = Kind::kLinear;
  Mat F;  // linear case
  LorenzParams lorenz;
  double dt = 0.02;
  int taylor_order = 5;

  bool linear() const { return kind == Kind::kLinear; }

  int state_dim() const {
    return linear() ? static_cast<int>(F.rows()) : 3;
  }

  Vec step(const Vec& x) const {
    if (linear()) return F * x;
    return lorenz_transition(x, dt, taylor_order, lorenz).first;
  }

  // Jacobian the filter linearizes with (F, or F_hat in the Lorenz case).
  Mat filter_jacobian(const Vec& x) const {
    if (linear()) return F;
    return lorenz_transition(x, dt, taylor_order, lorenz).second;
  }

  // True Jacobian of step(); used by reverse-mode differentiation.
  Mat exact_jacobian(const Vec& x) const {
    if (linear()) return F;
    return lorenz_transition_jacobian(x, dt, taylor_order, lorenz);
  }
};

inline Evolution linear_evolution(const Mat& f) {
  require(f.rows() == f.cols() && f.rows() >= 1,
          "linear_evolution: F must be square and non-empty");
  Evolution ev;
  ev.kind = Evolution::Kind::kLinear;
  ev.F = f;
  return ev;
}

inline Evolution lorenz_evolution(double dt, int taylor_order,
                                  const LorenzParams& p = {}) {
  require(dt > 0.0, "lorenz_evolution: dt must be positive");
  require(taylor_order >= 1, "lorenz_evolution: Taylor order must be >= 1");
  Evolution ev;
  ev.kind = Evolution::Kind::kLorenz;
  ev.lorenz = p;
  ev.dt = dt;
  ev.taylor_order = taylor_order;
  return ev;
}

namespace detail {

constexpr double kSymTol = 1e-10;

// Construction admits the PSD boundary (noiseless setups stay expressible);
// strict positivity is enforced at the operations that invert the matrix.
inline void check_covariance(const Mat& c, int dim, const char* name) {
  require(c.rows() == dim && c.cols() == dim,
          std::string(name) + ": wrong dimensions");
  require(is_symmetric(c, kSymTol * std::max(1.0, c.cwiseAbs().maxCoeff())),
          std::string(name) + ": not symmetric within tolerance");
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(c));
  require(es.eigenvalues().minCoeff() >= -kSymTol,
          std::string(name) + ": negative eigenvalue");
}

}  // namespace detail

struct StateSpaceModel {
  Evolution evolution;
  Mat H;  // n x m
  Mat Q;  // m x m, symmetric PSD
  Mat R;  // n x n, symmetric PSD (strict positivity required where inverted)

  int m() const { return static_cast<int>(H.cols()); }
  int n() const { return static_cast<int>(H.rows()); }
};

inline StateSpaceModel make_model(Evolution evolution, Mat h, Mat q, Mat r) {
  int m = evolution.state_dim();
  require(h.cols() == m, "make_model: H column count must equal state dim");
  require(h.rows() >= 1, "make_model: H must have at least one row");
  int n = static_cast<int>(h.rows());
  detail::check_covariance(q, m, "Q");
  detail::check_covariance(r, n, "R");
  return StateSpaceModel{std::move(evolution), std::move(h), symmetrize(q),
                         symmetrize(r)};
}

inline StateSpaceModel make_linear_model(const Mat& f, const Mat& h,
                                         const Mat& q, const Mat& r) {
  return make_model(linear_evolution(f), h, q, r);
}

inline StateSpaceModel make_scalar_model(double f, double h, double q, double r) {
  auto scalar = [](double v) { return Mat::Constant(1, 1, v); };
  return make_linear_model(scalar(f), scalar(h), scalar(q), scalar(r));
}

// Factor L with L L^T = cov. Cholesky when SPD; eigendecomposition fallback
// admits zero-variance directions.
inline Mat covariance_factor(const Mat& cov) {
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(cov));
  require(es.eigenvalues().minCoeff() >= -detail::kSymTol,
          "covariance_factor: matrix has negative eigenvalue");
  return es.eigenvectors() *
         es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

// Symmetric square root / inverse square root via eigendecomposition.
inline Mat matrix_sqrt(const Mat& spd) {
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(spd));
  require(es.eigenvalues().minCoeff() > 0.0, "matrix_sqrt: matrix not SPD");
  return es.eigenvectors() * es.eigenvalues().cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}

inline Mat matrix_inv_sqrt(const Mat& spd) {
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(spd));
  require(es.eigenvalues().minCoeff() > 0.0, "matrix_inv_sqrt: matrix not SPD");
  return es.eigenvectors() *
         es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
         es.eigenvectors().transpose();
}

// x_prev -> F x_prev + w (linear) or f(x_prev) + w (Lorenz).
inline Vec step_evolve(const StateSpaceModel& model, const Vec& x_prev,
                       const Vec& w) {
  require(x_prev.size() == model.m(), "step_evolve: state dimension mismatch");
  require(w.size() == model.m(), "step_evolve: noise dimension mismatch");
  return model.evolution.step(x_prev) + w;
}

// x -> H x + v.
inline Vec observe(const StateSpaceModel& model, const Vec& x, const Vec& v) {
  require(x.size() == model.m(), "observe: state dimension mismatch");
  require(v.size() == model.n(), "observe: noise dimension mismatch");
  return model.H * x + v;
}

struct InitialStateLaw {
  Vec mean;
  Mat cov;  // may be exactly zero for a known start
};

inline InitialStateLaw known_start(const Vec& x0) {
  return InitialStateLaw{x0, Mat::Zero(x0.size(), x0.size())};
}

struct Trajectory {
  Vec init_state;    // x_0, handed to filters under the known-start convention
  Mat states;        // T x m, row t-1 holds x_t
  Mat observations;  // T x n, row t-1 holds y_t
  std::uint64_t seed = 0;

  int length() const { return static_cast<int>(states.rows()); }
};

struct Dataset {
  std::vector<Trajectory> trajectories;
  StateSpaceModel model;  // generating model descriptor
  InitialStateLaw x0_law;
  int T = 0;
  std::uint64_t seed = 0;
  std::string split;

  int size() const { return static_cast<int>(trajectories.size()); }
};

// Draw order per trajectory is frozen: x0 (m deviates), then per step
// w (m deviates) and v (n deviates). Substream i = seed ^ i, so growing N
// never reshuffles earlier trajectories.
inline Dataset generate_dataset(const StateSpaceModel& model, int T, int N,
                                const InitialStateLaw& x0_law,
                                std::uint64_t seed,
                                const std::string& split = "train") {
  require(T >= 1, "generate_dataset: T must be >= 1");
  require(N >= 1, "generate_dataset: N must be >= 1");
  require(x0_law.mean.size() == model.m(),
          "generate_dataset: x0 mean dimension mismatch");
  detail::check_covariance(x0_law.cov, model.m(), "x0 cov");

  const Mat l0 = covariance_factor(x0_law.cov);
  const Mat lq = covariance_factor(model.Q);
  const Mat lr = covariance_factor(model.R);
  const int m = model.m(), n = model.n();

  Dataset ds;
  ds.trajectories.resize(N);
  ds.model = model;
  ds.x0_law = x0_law;
  ds.T = T;
  ds.seed = seed;
  ds.split = split;

  parallel_for(N, [&](int i) {
    Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(i));
    Trajectory traj;
    traj.seed = seed ^ static_cast<std::uint64_t>(i);
    traj.init_state = x0_law.mean + l0 * rng.next_gaussian_vector(m);
    traj.states.resize(T, m);
    traj.observations.resize(T, n);
    Vec x = traj.init_state;
    for (int t = 0; t < T; ++t) {
      x = step_evolve(model, x, lq * rng.next_gaussian_vector(m));
      traj.states.row(t) = x.transpose();
      traj.observations.row(t) =
          observe(model, x, lr * rng.next_gaussian_vector(n)).transpose();
    }
    ds.trajectories[i] = std::move(traj);
  });
  return ds;
}

// Rescale observations by R^{-1/2}; states untouched. The returned dataset's
// model carries H' = R^{-1/2} H and R' = I.
inline Dataset whiten(const Dataset& dataset, const Mat& r) {
  require(r.rows() == dataset.model.n() && r.cols() == dataset.model.n(),
          "whiten: R dimension mismatch");
  const Mat w = matrix_inv_sqrt(r);  // throws unless SPD
  Dataset out = dataset;
  out.model.H = w * dataset.model.H;
  out.model.R = Mat::Identity(dataset.model.n(), dataset.model.n());
  for (auto& traj : out.trajectories) {
    traj.observations = traj.observations * w.transpose();
  }
  return out;
}

}  // namespace knetuq
