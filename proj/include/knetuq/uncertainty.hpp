#pragma once

#include "knetuq/common.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

namespace knetuq {

// The observation-side quantities a gain-to-covariance conversion needs:
// full-column-rank H, its normal-equation inverse H_tilde = (H^T H)^{-1},
// and the measurement noise covariance.
struct ObservationGeometry {
  Mat H;        // n x m, full column rank
  Mat H_tilde;  // (H^T H)^{-1}
  Mat R;        // n x n SPD
};

inline ObservationGeometry make_geometry(const Mat& h, const Mat& r) {
  ObservationGeometry g;
  require(h.rows() >= 1 && h.cols() >= 1, "geometry: empty H");
  Eigen::JacobiSVD<Mat> svd(h);
  const auto& sv = svd.singularValues();
  if (h.rows() < h.cols() || sv(sv.size() - 1) <= 1e-10 * sv(0)) {
    throw GeometryError(
        "geometry: H is not full column rank; unsupported geometry");
  }
  require(r.rows() == h.rows() && r.cols() == h.rows(),
          "geometry: R dimension mismatch");
  require(is_symmetric(r, 1e-10 * std::max(1.0, r.cwiseAbs().maxCoeff())),
          "geometry: R not symmetric");
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(r));
  require(es.eigenvalues().minCoeff() > 0.0, "geometry: R not SPD");

  g.H = h;
  g.R = symmetrize(r);
  const Mat hth = h.transpose() * h;
  const Mat id = Mat::Identity(h.cols(), h.cols());
  g.H_tilde = symmetrize(Eigen::LLT<Mat>(hth).solve(id));
  const double residual = (g.H_tilde * hth - id).cwiseAbs().maxCoeff();
  if (residual > 1e-8) {
    throw NumericError("geometry: (H^T H)^{-1} inaccurate, residual " +
                       std::to_string(residual));
  }
  return g;
}

inline ObservationGeometry make_geometry(const Mat& h) {
  return make_geometry(h, Mat::Identity(h.rows(), h.rows()));
}

// Prior error covariance implied by a gain:
//   Σ_{t|t-1} = H̃ H^T (I - H K)^{-1} H K R H H̃.
// With R = I this is the identity the gain equation K = Σ H^T S^{-1} inverts;
// the general-R form inserts R so callers need not pre-whiten.
inline Mat sigma_prior_from_gain(const Mat& gain,
                                 const ObservationGeometry& geom) {
  const int m = static_cast<int>(geom.H.cols());
  const int n = static_cast<int>(geom.H.rows());
  require(gain.rows() == m && gain.cols() == n,
          "sigma_prior_from_gain: gain must be m x n");
  if (!gain.allFinite()) {
    throw NumericError("sigma_prior_from_gain: non-finite gain");
  }

  const Mat hk = geom.H * gain;
  const Mat a = Mat::Identity(n, n) - hk;
  Eigen::JacobiSVD<Mat> svd(a);
  const auto& sv = svd.singularValues();
  const double cond = sv(sv.size() - 1) > 0.0
                          ? sv(0) / sv(sv.size() - 1)
                          : std::numeric_limits<double>::infinity();
  if (!(cond < 1e12)) {
    std::ostringstream msg;
    msg << "sigma_prior_from_gain: gain at observation-trust boundary, "
        << "(I - H K) condition " << cond;
    throw NumericError(msg.str());
  }
  const Mat a_inv = Eigen::PartialPivLU<Mat>(a).inverse();
  return symmetrize(geom.H_tilde * geom.H.transpose() * a_inv * hk * geom.R *
                    geom.H * geom.H_tilde);
}

// Posterior error covariance: Σ_t = (I - K H) Σ_{t|t-1}.
inline Mat error_cov_from_gain(const Mat& gain,
                               const ObservationGeometry& geom) {
  const int m = static_cast<int>(geom.H.cols());
  const Mat sigma_prior = sigma_prior_from_gain(gain, geom);
  return symmetrize((Mat::Identity(m, m) - gain * geom.H) * sigma_prior);
}

// Per-step covariance extraction over a gain sequence. Steps whose gain sits
// at the trust boundary are recorded and leave a NaN gap in the dB trace.
struct ErrorPrediction {
  std::vector<Mat> sigma;          // Σ_t per step (empty Mat at failed steps)
  std::vector<double> trace_db;    // 10 log10(trace(Σ_t)/m), NaN on failure
  std::vector<Vec> stddev;         // sqrt(diag Σ_t); NaN entries where diag < 0
  std::vector<int> failed_steps;   // indices whose extraction threw
  std::vector<int> non_psd_steps;  // min eigenvalue < -1e-10 (reported as-is)
};

inline ErrorPrediction predict_error(const std::vector<Mat>& gains,
                                     const ObservationGeometry& geom) {
  const int m = static_cast<int>(geom.H.cols());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  ErrorPrediction out;
  out.sigma.reserve(gains.size());
  out.trace_db.reserve(gains.size());
  out.stddev.reserve(gains.size());
  for (std::size_t t = 0; t < gains.size(); ++t) {
    try {
      Mat sigma = error_cov_from_gain(gains[t], geom);
      Eigen::SelfAdjointEigenSolver<Mat> es(sigma);
      if (es.eigenvalues().minCoeff() < -1e-10) {
        out.non_psd_steps.push_back(static_cast<int>(t));
      }
      double tr = sigma.trace() / m;
      out.trace_db.push_back(tr > 0.0 ? 10.0 * std::log10(tr) : nan);
      Vec sd(m);
      for (int i = 0; i < m; ++i) {
        sd(i) = sigma(i, i) >= 0.0 ? std::sqrt(sigma(i, i)) : nan;
      }
      out.stddev.push_back(std::move(sd));
      out.sigma.push_back(std::move(sigma));
    } catch (const NumericError&) {
      out.failed_steps.push_back(static_cast<int>(t));
      out.sigma.emplace_back();
      out.trace_db.push_back(nan);
      out.stddev.push_back(Vec::Constant(m, nan));
    }
  }
  return out;
}

}  // namespace knetuq
