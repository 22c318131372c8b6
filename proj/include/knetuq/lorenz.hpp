#pragma once

#include "knetuq/common.hpp"

#include <utility>

namespace knetuq {

struct LorenzParams {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
};

// State-dependent coefficient matrix A(x) with dx/dt = A(x) x.
inline Mat lorenz_coefficient_matrix(const Vec& x, const LorenzParams& p = {}) {
  require(x.size() == 3, "lorenz_coefficient_matrix: state must be 3-dimensional");
  Mat a(3, 3);
  a << -p.sigma, p.sigma, 0.0,
       p.rho - x(2), -1.0, 0.0,
       x(1), 0.0, -p.beta;
  return a;
}

// I + sum_{j=1..J} M^j / j!
inline Mat taylor_matrix_exp(const Mat& m, int order) {
  require(order >= 1, "taylor_matrix_exp: order must be >= 1");
  Mat result = Mat::Identity(m.rows(), m.cols());
  Mat term = Mat::Identity(m.rows(), m.cols());
  double factorial = 1.0;
  for (int j = 1; j <= order; ++j) {
    term = term * m;
    factorial *= j;
    result += term / factorial;
  }
  return result;
}

// One discretized step: F_hat = I + sum_{j<=J} (A(x) dt)^j / j!, x_next = F_hat x.
// F_hat doubles as the evolution Jacobian handed to the EKF.
inline std::pair<Vec, Mat> lorenz_transition(const Vec& x, double dt, int order,
                                             const LorenzParams& p = {}) {
  require(dt > 0.0, "lorenz_transition: dt must be positive");
  require(order >= 1, "lorenz_transition: Taylor order must be >= 1");
  if (!x.allFinite()) throw NumericError("lorenz_transition: non-finite state");
  Mat f_hat = taylor_matrix_exp(lorenz_coefficient_matrix(x, p) * dt, order);
  return {f_hat * x, f_hat};
}

// Exact Jacobian of x -> F_hat(x) x, including the dependence of A on x.
// Needed where the transition sits inside a differentiated computation;
// the EKF keeps using F_hat itself.
inline Mat lorenz_transition_jacobian(const Vec& x, double dt, int order,
                                      const LorenzParams& p = {}) {
  require(dt > 0.0 && order >= 1, "lorenz_transition_jacobian: bad dt or order");
  Mat m = lorenz_coefficient_matrix(x, p) * dt;

  // Powers M^0..M^{order-1} and vectors M^p x.
  std::vector<Mat> pow(order);
  pow[0] = Mat::Identity(3, 3);
  for (int k = 1; k < order; ++k) pow[k] = pow[k - 1] * m;
  std::vector<Vec> mx(order);
  mx[0] = x;
  for (int k = 1; k < order; ++k) mx[k] = m * mx[k - 1];

  Mat jac = taylor_matrix_exp(m, order);  // F_hat term

  // dM/dx1 has dt at (2,0); dM/dx2 has -dt at (1,0). dM/dx0 = 0.
  // d(M^j)/de = sum_k M^k (dM/de) M^{j-1-k}, applied to x.
  double factorial = 1.0;
  for (int j = 1; j <= order; ++j) {
    factorial *= j;
    for (int k = 0; k <= j - 1; ++k) {
      const Vec& v = mx[j - 1 - k];  // M^{j-1-k} x
      Vec e1 = Vec::Zero(3), e2 = Vec::Zero(3);
      e1(2) = dt * v(0);   // (dM/dx1) v
      e2(1) = -dt * v(0);  // (dM/dx2) v
      jac.col(1) += pow[k] * e1 / factorial;
      jac.col(2) += pow[k] * e2 / factorial;
    }
  }
  return jac;
}

}  // namespace knetuq
