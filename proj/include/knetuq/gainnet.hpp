#pragma once

#include "knetuq/common.hpp"
#include "knetuq/rng.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace knetuq {

// Recurrent gain head: tanh input layer -> single GRU cell -> linear output
// reshaped row-major to an m x n gain. Feature layout is
// [innovation (n); observation difference (n); forward update difference (m)].
struct GainNetConfig {
  int m = 1;
  int n = 1;
  int hidden = 0;  // 0 -> 10 (m^2 + n^2)
  bool normalize_features = false;
  // Multiplier on the output layer's init range. Near-zero starts the filter
  // at pure model prediction, which keeps chaotic rollouts bounded while the
  // gains grow.
  double output_init_scale = 1.0;
};

struct GainNetworkParams {
  int m = 0, n = 0, hidden = 0, feature_dim = 0;
  bool normalize_features = false;

  Mat w_in, b_in;               // h x fd, h x 1
  Mat w_z, u_z, b_z;            // update gate
  Mat w_r, u_r, b_r;            // reset gate
  Mat w_c, u_c, b_c;            // candidate
  Mat w_out, b_out;             // (m n) x h, (m n) x 1

  int gain_dim() const { return m * n; }
};

// Fixed parameter order; checkpoints and optimizer state rely on it.
template <typename Params, typename Fn>
void visit_params(Params& p, Fn&& fn) {
  fn("w_in", p.w_in);
  fn("b_in", p.b_in);
  fn("w_z", p.w_z);
  fn("u_z", p.u_z);
  fn("b_z", p.b_z);
  fn("w_r", p.w_r);
  fn("u_r", p.u_r);
  fn("b_r", p.b_r);
  fn("w_c", p.w_c);
  fn("u_c", p.u_c);
  fn("b_c", p.b_c);
  fn("w_out", p.w_out);
  fn("b_out", p.b_out);
}

inline int default_hidden_size(int m, int n) { return 10 * (m * m + n * n); }

inline GainNetworkParams zero_gain_network(const GainNetConfig& cfg) {
  require(cfg.m >= 1 && cfg.n >= 1, "gain network: dimensions must be positive");
  GainNetworkParams p;
  p.m = cfg.m;
  p.n = cfg.n;
  p.hidden = cfg.hidden > 0 ? cfg.hidden : default_hidden_size(cfg.m, cfg.n);
  p.feature_dim = 2 * cfg.n + cfg.m;
  p.normalize_features = cfg.normalize_features;
  const int h = p.hidden, fd = p.feature_dim, g = p.gain_dim();
  p.w_in = Mat::Zero(h, fd);
  p.b_in = Mat::Zero(h, 1);
  p.w_z = Mat::Zero(h, h);
  p.u_z = Mat::Zero(h, h);
  p.b_z = Mat::Zero(h, 1);
  p.w_r = Mat::Zero(h, h);
  p.u_r = Mat::Zero(h, h);
  p.b_r = Mat::Zero(h, 1);
  p.w_c = Mat::Zero(h, h);
  p.u_c = Mat::Zero(h, h);
  p.b_c = Mat::Zero(h, 1);
  p.w_out = Mat::Zero(g, h);
  p.b_out = Mat::Zero(g, 1);
  return p;
}

// Uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer; biases use the fan-in
// of their layer. Draw order follows visit_params, row-major within a tensor.
inline GainNetworkParams init_gain_network(const GainNetConfig& cfg,
                                           std::uint64_t seed) {
  GainNetworkParams p = zero_gain_network(cfg);
  Rng rng(seed);
  auto fan_in = [&](const std::string& name, const Mat& t) {
    if (name == "w_in" || name == "b_in") return p.feature_dim;
    if (name == "w_out" || name == "b_out") return p.hidden;
    (void)t;
    return p.hidden;  // GRU tensors
  };
  visit_params(p, [&](const std::string& name, Mat& t) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in(name, t)));
    if (name == "w_out" || name == "b_out") bound *= cfg.output_init_scale;
    for (int i = 0; i < t.rows(); ++i) {
      for (int j = 0; j < t.cols(); ++j) {
        t(i, j) = rng.next_uniform(-bound, bound);
      }
    }
  });
  return p;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Scale-limiting map f -> f / sqrt(1 + |f|^2 / d): identity near the origin,
// bounded norm for large inputs, smooth everywhere.
inline Vec normalize_features(const Vec& f) {
  const double d = static_cast<double>(f.size());
  return f / std::sqrt(1.0 + f.squaredNorm() / d);
}

inline Vec assemble_features(const Vec& innovation, const Vec& obs_diff,
                             const Vec& fwd_diff, bool normalize) {
  Vec f(innovation.size() + obs_diff.size() + fwd_diff.size());
  f << innovation, obs_diff, fwd_diff;
  return normalize ? normalize_features(f) : f;
}

namespace detail {
inline void check_finite_layer(const Mat& v, const char* layer) {
  if (!v.allFinite()) {
    throw NumericError(std::string("gain_forward: non-finite activation in ") +
                       layer);
  }
}
}  // namespace detail

struct GainForwardResult {
  Mat gain;    // m x n
  Vec hidden;  // updated GRU state
};

inline GainForwardResult gain_forward(const GainNetworkParams& p,
                                      const Vec& hidden, const Vec& features) {
  require(hidden.size() == p.hidden, "gain_forward: hidden size mismatch");
  require(features.size() == p.feature_dim,
          "gain_forward: feature size mismatch");

  const Vec a = (p.w_in * features + p.b_in.col(0)).array().tanh();
  detail::check_finite_layer(a, "input layer");
  const Vec zg = (p.w_z * a + p.u_z * hidden + p.b_z.col(0))
                     .unaryExpr([](double v) { return sigmoid(v); });
  detail::check_finite_layer(zg, "update gate");
  const Vec rg = (p.w_r * a + p.u_r * hidden + p.b_r.col(0))
                     .unaryExpr([](double v) { return sigmoid(v); });
  detail::check_finite_layer(rg, "reset gate");
  const Vec cand =
      (p.w_c * a + p.u_c * (rg.cwiseProduct(hidden)) + p.b_c.col(0))
          .array()
          .tanh();
  detail::check_finite_layer(cand, "candidate");
  const Vec h_new =
      (Vec::Ones(p.hidden) - zg).cwiseProduct(cand) + zg.cwiseProduct(hidden);
  const Vec kvec = p.w_out * h_new + p.b_out.col(0);
  detail::check_finite_layer(kvec, "output layer");

  GainForwardResult out;
  out.hidden = h_new;
  out.gain.resize(p.m, p.n);
  for (int i = 0; i < p.m; ++i) {
    for (int j = 0; j < p.n; ++j) {
      out.gain(i, j) = kvec(i * p.n + j);  // row-major contract
    }
  }
  return out;
}

// ---- optimizer -------------------------------------------------------------

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  GainNetworkParams m1, m2;  // moment accumulators, shapes mirror the params
  long step = 0;
  OptimizerConfig cfg;
};

inline OptimizerState make_optimizer(const GainNetworkParams& shape,
                                     const OptimizerConfig& cfg = {}) {
  GainNetConfig gc{shape.m, shape.n, shape.hidden, shape.normalize_features};
  OptimizerState st;
  st.m1 = zero_gain_network(gc);
  st.m2 = zero_gain_network(gc);
  st.cfg = cfg;
  return st;
}

inline std::vector<Mat*> tensor_list(GainNetworkParams& p) {
  std::vector<Mat*> out;
  out.reserve(13);
  visit_params(p, [&](const std::string&, Mat& t) { out.push_back(&t); });
  return out;
}

inline std::vector<const Mat*> tensor_list(const GainNetworkParams& p) {
  std::vector<const Mat*> out;
  out.reserve(13);
  visit_params(const_cast<GainNetworkParams&>(p),
               [&](const std::string&, Mat& t) { out.push_back(&t); });
  return out;
}

// Bias-corrected adaptive moment update (Adam).
inline void optimizer_step(GainNetworkParams& params,
                           const GainNetworkParams& grads,
                           OptimizerState& state) {
  state.step += 1;
  const auto& c = state.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));

  auto ts = tensor_list(params);
  auto gs = tensor_list(grads);
  auto m1s = tensor_list(state.m1);
  auto m2s = tensor_list(state.m2);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    Mat& m1 = *m1s[i];
    Mat& m2 = *m2s[i];
    const Mat& g = *gs[i];
    m1 = c.beta1 * m1 + (1.0 - c.beta1) * g;
    m2 = c.beta2 * m2 + (1.0 - c.beta2) * g.cwiseProduct(g);
    *ts[i] -=
        (c.lr * (m1 / bc1).array() / ((m2 / bc2).array().sqrt() + c.eps))
            .matrix();
  }
}

inline double gradient_norm(const GainNetworkParams& grads) {
  double sq = 0.0;
  for (const Mat* t : tensor_list(grads)) sq += t->squaredNorm();
  return std::sqrt(sq);
}

inline void clip_gradient_norm(GainNetworkParams& grads, double max_norm) {
  const double norm = gradient_norm(grads);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (Mat* t : tensor_list(grads)) *t *= scale;
  }
}

inline void accumulate(GainNetworkParams& into, const GainNetworkParams& from,
                       double weight = 1.0) {
  auto dst = tensor_list(into);
  auto src = tensor_list(from);
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] += weight * *src[i];
}

inline void scale_params(GainNetworkParams& p, double factor) {
  for (Mat* t : tensor_list(p)) *t *= factor;
}

}  // namespace knetuq
