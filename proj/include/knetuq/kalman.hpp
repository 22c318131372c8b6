#pragma once

#include "knetuq/common.hpp"
#include "knetuq/ssmodel.hpp"

#include <limits>
#include <sstream>
#include <vector>

namespace knetuq {

// First- and second-order moments of one filter step.
struct FilterMoments {
  Vec x_prior;      // x̂_{t|t-1}
  Vec x_post;       // x̂_t
  Mat sigma_prior;  // Σ_{t|t-1}
  Mat sigma_post;   // Σ_t
  Vec y_pred;       // ŷ_{t|t-1}
  Mat S;            // innovation covariance
  Vec innovation;   // y_t - ŷ_{t|t-1}
  Mat gain;         // K_t
};

// Moment prediction. The covariance propagates through the Jacobian at the
// previous posterior, which is F itself in the linear case.
inline FilterMoments kf_predict(const StateSpaceModel& assumed,
                                const Vec& x_post_prev,
                                const Mat& sigma_post_prev) {
  require(x_post_prev.size() == assumed.m(), "kf_predict: state dim mismatch");
  require(sigma_post_prev.rows() == assumed.m() &&
              sigma_post_prev.cols() == assumed.m(),
          "kf_predict: covariance dim mismatch");
  FilterMoments fm;
  const Mat f = assumed.evolution.filter_jacobian(x_post_prev);
  fm.x_prior = assumed.evolution.step(x_post_prev);
  fm.sigma_prior = symmetrize(f * sigma_post_prev * f.transpose() + assumed.Q);
  fm.y_pred = assumed.H * fm.x_prior;
  fm.S = symmetrize(assumed.H * fm.sigma_prior * assumed.H.transpose() +
                    assumed.R);
  return fm;
}

// K = Σ_{t|t-1} H^T S^{-1}, via the solve S K^T = H Σ_{t|t-1}. A singular S
// paired with a zero right-hand side (fully noiseless, fully certain) takes
// the minimum-norm solution K = 0; any other singular S is an error.
inline Mat kf_gain(const Mat& sigma_prior, const Mat& h, const Mat& r) {
  require(h.cols() == sigma_prior.rows(), "kf_gain: H/Sigma dim mismatch");
  require(r.rows() == h.rows() && r.cols() == h.rows(),
          "kf_gain: R dim mismatch");
  const Mat sp = symmetrize(sigma_prior);
  const Mat s = symmetrize(h * sp * h.transpose() + r);
  const Mat rhs = h * sp;  // n x m

  Eigen::SelfAdjointEigenSolver<Mat> es(s);
  const double max_eig = es.eigenvalues().cwiseAbs().maxCoeff();
  const double min_eig = es.eigenvalues().minCoeff();
  if (min_eig <= max_eig * 1e-14 || max_eig == 0.0) {
    double scale = std::max(1.0, sp.cwiseAbs().maxCoeff());
    if (rhs.cwiseAbs().maxCoeff() <= 1e-12 * scale) {
      return Mat::Zero(sp.rows(), h.rows());
    }
    std::ostringstream msg;
    msg << "kf_gain: innovation covariance singular or indefinite"
        << " (min eig " << min_eig << ", condition "
        << (min_eig > 0.0 ? max_eig / min_eig
                          : std::numeric_limits<double>::infinity())
        << ")";
    throw NumericError(msg.str());
  }
  Eigen::LDLT<Mat> ldlt(s);
  return ldlt.solve(rhs).transpose();
}

// Posterior update: x̂_t = x̂_{t|t-1} + K Δy, Σ_t = Σ_{t|t-1} - K S K^T.
inline void kf_update(FilterMoments& fm, const Mat& gain, const Vec& y) {
  require(y.size() == fm.y_pred.size(), "kf_update: observation dim mismatch");
  require(gain.rows() == fm.x_prior.size() && gain.cols() == y.size(),
          "kf_update: gain dim mismatch");
  fm.gain = gain;
  fm.innovation = y - fm.y_pred;
  fm.x_post = fm.x_prior + gain * fm.innovation;
  fm.sigma_post = symmetrize(fm.sigma_prior - gain * fm.S * gain.transpose());
}

// Full predict/gain/update step with nonlinear maps linearized through their
// Jacobians; degenerates to the plain KF for a linear model.
inline FilterMoments ekf_step(const StateSpaceModel& assumed,
                              const Vec& x_post_prev,
                              const Mat& sigma_post_prev, const Vec& y) {
  FilterMoments fm = kf_predict(assumed, x_post_prev, sigma_post_prev);
  Mat gain = kf_gain(fm.sigma_prior, assumed.H, assumed.R);
  kf_update(fm, gain, y);
  return fm;
}

inline FilterMoments kf_step(const StateSpaceModel& assumed,
                             const Vec& x_post_prev,
                             const Mat& sigma_post_prev, const Vec& y) {
  require(assumed.evolution.linear(), "kf_step: model must be linear");
  return ekf_step(assumed, x_post_prev, sigma_post_prev, y);
}

// Filter a whole observation sequence from (x̂_0, Σ_0).
inline std::vector<FilterMoments> kf_filter(const StateSpaceModel& assumed,
                                            const Mat& observations,
                                            const Vec& x0, const Mat& sigma0) {
  std::vector<FilterMoments> out;
  out.reserve(static_cast<std::size_t>(observations.rows()));
  Vec x = x0;
  Mat sigma = sigma0;
  for (int t = 0; t < observations.rows(); ++t) {
    FilterMoments fm =
        ekf_step(assumed, x, sigma, observations.row(t).transpose());
    x = fm.x_post;
    sigma = fm.sigma_post;
    out.push_back(std::move(fm));
  }
  return out;
}

// Observation-independent covariance recursion (linear model): the Σ and K
// sequences every trajectory shares.
struct CovarianceStep {
  Mat sigma_prior, sigma_post, S, gain;
};

inline std::vector<CovarianceStep> kf_covariance_sequence(
    const StateSpaceModel& assumed, const Mat& sigma0, int T) {
  require(assumed.evolution.linear(),
          "kf_covariance_sequence: model must be linear");
  std::vector<CovarianceStep> out;
  out.reserve(static_cast<std::size_t>(T));
  Mat sigma = sigma0;
  const Mat& f = assumed.evolution.F;
  for (int t = 0; t < T; ++t) {
    CovarianceStep cs;
    cs.sigma_prior = symmetrize(f * sigma * f.transpose() + assumed.Q);
    cs.S = symmetrize(assumed.H * cs.sigma_prior * assumed.H.transpose() +
                      assumed.R);
    cs.gain = kf_gain(cs.sigma_prior, assumed.H, assumed.R);
    cs.sigma_post =
        symmetrize(cs.sigma_prior - cs.gain * cs.S * cs.gain.transpose());
    sigma = cs.sigma_post;
    out.push_back(std::move(cs));
  }
  return out;
}

struct RiccatiFixedPoint {
  Mat sigma_prior, sigma_post, gain;
  int iterations = 0;
};

// Fixed point of the predict -> gain -> update covariance map.
inline RiccatiFixedPoint kf_riccati_steady_state(const StateSpaceModel& assumed,
                                                 double tol = 1e-12,
                                                 int max_iter = 100000) {
  require(assumed.evolution.linear(),
          "kf_riccati_steady_state: model must be linear");
  const Mat& f = assumed.evolution.F;
  Mat sigma = Mat::Identity(assumed.m(), assumed.m());
  RiccatiFixedPoint fp;
  for (int it = 1; it <= max_iter; ++it) {
    fp.sigma_prior = symmetrize(f * sigma * f.transpose() + assumed.Q);
    fp.gain = kf_gain(fp.sigma_prior, assumed.H, assumed.R);
    Mat s = symmetrize(assumed.H * fp.sigma_prior * assumed.H.transpose() +
                       assumed.R);
    fp.sigma_post =
        symmetrize(fp.sigma_prior - fp.gain * s * fp.gain.transpose());
    fp.iterations = it;
    if ((fp.sigma_post - sigma).cwiseAbs().maxCoeff() < tol) {
      return fp;
    }
    sigma = fp.sigma_post;
  }
  throw NumericError("kf_riccati_steady_state: no convergence after " +
                     std::to_string(max_iter) + " iterations");
}

}  // namespace knetuq
