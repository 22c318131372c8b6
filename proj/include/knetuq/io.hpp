#pragma once

#include "knetuq/common.hpp"
#include "knetuq/gainnet.hpp"
#include "knetuq/knet.hpp"
#include "knetuq/metrics.hpp"
#include "knetuq/ssmodel.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace knetuq {

using nlohmann::json;

inline constexpr const char* kCheckpointMagic = "knetuq-gainnet-v1";

// 17 significant digits: doubles survive the round trip exactly.
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot open for writing: " + path);
  return out;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open for reading: " + path);
  return in;
}

// ---- matrices <-> json -----------------------------------------------------

inline json matrix_to_json(const Mat& m) {
  json rows = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Mat matrix_from_json(const json& j) {
  require(j.is_array() && !j.empty(), "matrix_from_json: expected array");
  const std::size_t rows = j.size();
  const std::size_t cols = j[0].size();
  Mat m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    require(j[i].size() == cols, "matrix_from_json: ragged rows");
    for (std::size_t c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

inline json vector_to_json(const Vec& v) {
  json arr = json::array();
  for (int i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

inline Vec vector_from_json(const json& j) {
  Vec v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v(i) = j[i].get<double>();
  return v;
}

// ---- model descriptor -------------------------------------------------------

inline json model_to_json(const StateSpaceModel& model) {
  json j;
  if (model.evolution.linear()) {
    j["type"] = "linear";
    j["F"] = matrix_to_json(model.evolution.F);
  } else {
    j["type"] = "lorenz";
    j["sigma"] = model.evolution.lorenz.sigma;
    j["rho"] = model.evolution.lorenz.rho;
    j["beta"] = model.evolution.lorenz.beta;
    j["dt"] = model.evolution.dt;
    j["taylor_order"] = model.evolution.taylor_order;
  }
  j["H"] = matrix_to_json(model.H);
  j["Q"] = matrix_to_json(model.Q);
  j["R"] = matrix_to_json(model.R);
  return j;
}

inline StateSpaceModel model_from_json(const json& j) {
  Evolution ev;
  const std::string type = j.at("type").get<std::string>();
  if (type == "linear") {
    ev = linear_evolution(matrix_from_json(j.at("F")));
  } else if (type == "lorenz") {
    LorenzParams p;
    p.sigma = j.value("sigma", p.sigma);
    p.rho = j.value("rho", p.rho);
    p.beta = j.value("beta", p.beta);
    ev = lorenz_evolution(j.value("dt", 0.02), j.value("taylor_order", 5), p);
  } else {
    throw ContractError("model_from_json: unknown evolution type " + type);
  }
  return make_model(ev, matrix_from_json(j.at("H")), matrix_from_json(j.at("Q")),
                    matrix_from_json(j.at("R")));
}

// ---- dataset persistence -----------------------------------------------------

// One CSV per split (traj,t,x_0..,y_0..) plus a sidecar JSON descriptor with
// the generating model, dimensions, seed, and per-trajectory initial states.
inline void save_dataset(const Dataset& ds, const std::string& csv_path,
                         const std::string& json_path) {
  std::ofstream csv = open_out(csv_path);
  const int m = ds.model.m(), n = ds.model.n();
  csv << "traj,t";
  for (int i = 0; i < m; ++i) csv << ",x_" << i;
  for (int i = 0; i < n; ++i) csv << ",y_" << i;
  csv << "\n";
  for (int k = 0; k < ds.size(); ++k) {
    const Trajectory& traj = ds.trajectories[k];
    for (int t = 0; t < traj.length(); ++t) {
      csv << k << ',' << (t + 1);
      for (int i = 0; i < m; ++i) csv << ',' << fmt17(traj.states(t, i));
      for (int i = 0; i < n; ++i) csv << ',' << fmt17(traj.observations(t, i));
      csv << "\n";
    }
  }
  csv.close();

  json j;
  j["model"] = model_to_json(ds.model);
  j["T"] = ds.T;
  j["N"] = ds.size();
  j["seed"] = ds.seed;
  j["split"] = ds.split;
  j["x0_mean"] = vector_to_json(ds.x0_law.mean);
  j["x0_cov"] = matrix_to_json(ds.x0_law.cov);
  json inits = json::array();
  for (const auto& traj : ds.trajectories) {
    inits.push_back(vector_to_json(traj.init_state));
  }
  j["init_states"] = std::move(inits);
  std::ofstream meta = open_out(json_path);
  meta << j.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& csv_path,
                            const std::string& json_path) {
  json j = json::parse(open_in(json_path));
  Dataset ds;
  ds.model = model_from_json(j.at("model"));
  ds.T = j.at("T").get<int>();
  ds.seed = j.at("seed").get<std::uint64_t>();
  ds.split = j.value("split", "");
  ds.x0_law.mean = vector_from_json(j.at("x0_mean"));
  ds.x0_law.cov = matrix_from_json(j.at("x0_cov"));
  const int n_traj = j.at("N").get<int>();
  const int m = ds.model.m(), n = ds.model.n();

  ds.trajectories.assign(n_traj, Trajectory{});
  for (int k = 0; k < n_traj; ++k) {
    Trajectory& traj = ds.trajectories[k];
    traj.init_state = vector_from_json(j.at("init_states")[k]);
    traj.seed = ds.seed ^ static_cast<std::uint64_t>(k);
    traj.states.resize(ds.T, m);
    traj.observations.resize(ds.T, n);
  }

  std::ifstream csv = open_in(csv_path);
  std::string line;
  std::getline(csv, line);  // header
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(std::stod(cell));
    require(cells.size() == static_cast<std::size_t>(2 + m + n),
            "load_dataset: wrong column count");
    const int k = static_cast<int>(cells[0]);
    const int t = static_cast<int>(cells[1]) - 1;
    require(k >= 0 && k < n_traj && t >= 0 && t < ds.T,
            "load_dataset: row out of range");
    for (int i = 0; i < m; ++i) ds.trajectories[k].states(t, i) = cells[2 + i];
    for (int i = 0; i < n; ++i) {
      ds.trajectories[k].observations(t, i) = cells[2 + m + i];
    }
  }
  return ds;
}

// ---- network checkpoints -----------------------------------------------------

inline void save_checkpoint(const GainNetworkParams& params,
                            const std::string& path) {
  json j;
  j["magic"] = kCheckpointMagic;
  j["m"] = params.m;
  j["n"] = params.n;
  j["hidden"] = params.hidden;
  j["feature_dim"] = params.feature_dim;
  j["normalize_features"] = params.normalize_features;
  json layers = json::array();
  visit_params(const_cast<GainNetworkParams&>(params),
               [&](const std::string& name, Mat& t) {
                 json layer;
                 layer["name"] = name;
                 layer["rows"] = t.rows();
                 layer["cols"] = t.cols();
                 json data = json::array();
                 for (int i = 0; i < t.rows(); ++i) {
                   for (int c = 0; c < t.cols(); ++c) data.push_back(t(i, c));
                 }
                 layer["data"] = std::move(data);  // row-major
                 layers.push_back(std::move(layer));
               });
  j["layers"] = std::move(layers);
  std::ofstream out = open_out(path);
  out << j.dump() << "\n";
}

inline GainNetworkParams load_checkpoint(const std::string& path) {
  json j = json::parse(open_in(path));
  require(j.value("magic", "") == kCheckpointMagic,
          "load_checkpoint: bad or missing magic string");
  GainNetConfig cfg;
  cfg.m = j.at("m").get<int>();
  cfg.n = j.at("n").get<int>();
  cfg.hidden = j.at("hidden").get<int>();
  cfg.normalize_features = j.at("normalize_features").get<bool>();
  GainNetworkParams params = zero_gain_network(cfg);
  std::size_t idx = 0;
  const json& layers = j.at("layers");
  visit_params(params, [&](const std::string& name, Mat& t) {
    require(idx < layers.size(), "load_checkpoint: missing layer " + name);
    const json& layer = layers[idx++];
    require(layer.at("name") == name, "load_checkpoint: layer order mismatch");
    require(layer.at("rows").get<int>() == t.rows() &&
                layer.at("cols").get<int>() == t.cols(),
            "load_checkpoint: shape mismatch in " + name);
    const json& data = layer.at("data");
    std::size_t p = 0;
    for (int i = 0; i < t.rows(); ++i) {
      for (int c = 0; c < t.cols(); ++c) t(i, c) = data[p++].get<double>();
    }
  });
  return params;
}

// ---- metric outputs ----------------------------------------------------------

inline void save_loss_curves(const std::vector<EpochStats>& curve,
                             const std::string& path) {
  std::ofstream out = open_out(path);
  out << "epoch,train_db,val_db\n";
  for (std::size_t e = 0; e < curve.size(); ++e) {
    out << e << ',' << fmt17(curve[e].train_db) << ','
        << fmt17(curve[e].val_db) << "\n";
  }
}

inline void save_metrics_csv(const std::vector<MetricSeries>& series,
                             const std::string& path) {
  std::ofstream out = open_out(path);
  out << "t,filter,empirical_db,predicted_db\n";
  if (series.empty()) return;
  const int T = series.front().length();
  for (int t = 0; t < T; ++t) {
    for (const MetricSeries& ms : series) {
      out << (t + 1) << ',' << ms.label << ',' << fmt17(ms.empirical_db[t])
          << ',' << fmt17(ms.predicted_db[t]) << "\n";
    }
  }
}

}  // namespace knetuq
