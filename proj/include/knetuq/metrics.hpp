#pragma once

#include "knetuq/common.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace knetuq {

// Per-timestep error curves for one filter, all in the convention
// mse(t) = mean over trajectories of |x̂_t - x_t|^2 / m.
struct MetricSeries {
  std::string label;
  std::vector<double> empirical_mse;    // linear scale
  std::vector<double> predicted_trace;  // trace(Σ_t)/m, linear scale
  std::vector<double> empirical_db;
  std::vector<double> predicted_db;
  int count = 0;     // trajectories aggregated
  int excluded = 0;  // diverged trajectories left out

  int length() const { return static_cast<int>(empirical_mse.size()); }
};

inline void fill_db(MetricSeries& ms) {
  ms.empirical_db.resize(ms.empirical_mse.size());
  ms.predicted_db.resize(ms.predicted_trace.size());
  for (std::size_t t = 0; t < ms.empirical_mse.size(); ++t) {
    ms.empirical_db[t] = to_db(ms.empirical_mse[t]);
  }
  for (std::size_t t = 0; t < ms.predicted_trace.size(); ++t) {
    double v = ms.predicted_trace[t];
    ms.predicted_db[t] =
        std::isfinite(v) ? to_db(v) : std::numeric_limits<double>::quiet_NaN();
  }
}

// 10 log10 of the time-averaged linear values over t in [from, T).
inline double time_averaged_db(const std::vector<double>& linear, int from = 0) {
  double sum = 0.0;
  int count = 0;
  for (std::size_t t = static_cast<std::size_t>(from); t < linear.size(); ++t) {
    if (std::isfinite(linear[t])) {
      sum += linear[t];
      ++count;
    }
  }
  if (count == 0) return std::numeric_limits<double>::quiet_NaN();
  return to_db(sum / count);
}

// Mean over t of |a_db(t) - b_db(t)|; NaN steps are skipped.
inline double mean_abs_db_gap(const std::vector<double>& a_db,
                              const std::vector<double>& b_db, int from = 0) {
  double sum = 0.0;
  int count = 0;
  for (std::size_t t = static_cast<std::size_t>(from);
       t < a_db.size() && t < b_db.size(); ++t) {
    if (std::isfinite(a_db[t]) && std::isfinite(b_db[t])) {
      sum += std::abs(a_db[t] - b_db[t]);
      ++count;
    }
  }
  return count > 0 ? sum / count : std::numeric_limits<double>::quiet_NaN();
}

// Mean over t of a_db(t) - b_db(t) (signed).
inline double mean_signed_db_gap(const std::vector<double>& a_db,
                                 const std::vector<double>& b_db,
                                 int from = 0) {
  double sum = 0.0;
  int count = 0;
  for (std::size_t t = static_cast<std::size_t>(from);
       t < a_db.size() && t < b_db.size(); ++t) {
    if (std::isfinite(a_db[t]) && std::isfinite(b_db[t])) {
      sum += a_db[t] - b_db[t];
      ++count;
    }
  }
  return count > 0 ? sum / count : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace knetuq
