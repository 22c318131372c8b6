#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace knetuq {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Contract violations: bad dimensions, invalid arguments, broken invariants.
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Numerical failures: singular systems, non-finite values, conditioning.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filter state left the representable regime; message names the timestep.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Observation geometry outside the supported class (rank-deficient H).
struct GeometryError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

inline Mat symmetrize(const Mat& a) { return 0.5 * (a + a.transpose()); }

// 10*log10 with a floor so that exactly-zero errors stay representable.
inline double to_db(double mse) {
  return 10.0 * std::log10(std::max(mse, 1e-30));
}

inline bool is_symmetric(const Mat& a, double tol) {
  if (a.rows() != a.cols()) return false;
  return (a - a.transpose()).cwiseAbs().maxCoeff() <= tol;
}

// Runs fn(i) for i in [0, count), split over threads. Each index writes only
// its own slots, so results do not depend on the schedule. The first worker
// exception (lowest starting index) is rethrown after all threads join.
inline void parallel_for(int count, const std::function<void(int)>& fn) {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  int workers = std::min(std::max(hw, 1), count);
  if (workers <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
}

}  // namespace knetuq
