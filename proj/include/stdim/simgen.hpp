// Copyright 2026 The stdim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Stable VAR(1) graphs, VAR / undersampled-VAR series, and the pre-training
// and downstream corpora built from them.

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "stdim/random.hpp"
#include "stdim/tensor_file.hpp"
#include "stdim/types.hpp"

namespace stdim {

struct TransitionMatrix {
  MatrixD entries;
  int graph_id = 0;

  Index n() const { return entries.rows(); }
};

enum class SeriesLabel : int { VAR = 0, SVAR = 1 };

inline const char* label_name(SeriesLabel l) { return l == SeriesLabel::VAR ? "VAR" : "SVAR"; }

struct SimSeries {
  MatrixD values;  // channels x time
  SeriesLabel label = SeriesLabel::VAR;
  int graph_id = 0;
  std::uint64_t seed = 0;
  Index offset = 0;  // first time index within the parent series
};

struct SimSplits {
  std::vector<SimSeries> train, val, test;
};

struct SimCorpusConfig {
  Index n_nodes = 10;
  Index pretrain_series = 50;
  Index pretrain_length = 20000;
  std::array<Index, 3> pretrain_split{14000, 4000, 2000};
  Index n_graphs_downstream = 400;
  Index samples_per_graph = 5;
  Index downstream_length = 4000;
  std::array<Index, 3> downstream_split{1600, 200, 200};
  double noise_std = 1.0;
  double spectral_radius_target = 0.8;
  int svar_rate = 2;
  std::uint64_t master_seed = 0;
  // false: graph g labels all its samples VAR (even g) or SVAR (odd g).
  // true: sample s of graph g is SVAR when (g + s) is odd, so every graph
  // contributes both classes.
  bool mixed_graph_labels = false;

  void validate() const {
    if (n_nodes < 1) throw ConfigError("n_nodes must be >= 1");
    if (!(noise_std > 0.0)) throw ConfigError("noise_std must be > 0");
    if (!(spectral_radius_target > 0.0 && spectral_radius_target < 1.0))
      throw ConfigError("spectral_radius_target must lie in (0,1)");
    if (svar_rate < 1) throw ConfigError("svar_rate must be >= 1");
    if (pretrain_series < 0 || pretrain_length < 1)
      throw ConfigError("pretrain_series must be >= 0 and pretrain_length >= 1");
    for (auto s : pretrain_split)
      if (s < 0) throw ConfigError("pretrain_split entries must be >= 0");
    if (pretrain_split[0] + pretrain_split[1] + pretrain_split[2] != pretrain_length)
      throw ConfigError("pretrain_split must sum to pretrain_length");
    if (n_graphs_downstream < 0 || samples_per_graph < 1 || downstream_length < 1)
      throw ConfigError("downstream graph/sample/length settings must be positive");
    for (auto s : downstream_split)
      if (s < 0 || s % samples_per_graph != 0)
        throw ConfigError("downstream_split entries must be non-negative multiples of samples_per_graph");
    if (downstream_split[0] + downstream_split[1] + downstream_split[2] !=
        n_graphs_downstream * samples_per_graph)
      throw ConfigError("downstream_split must sum to n_graphs_downstream * samples_per_graph");
  }
};

inline void to_json(nlohmann::json& j, const SimCorpusConfig& c) {
  j = {{"n_nodes", c.n_nodes},
       {"pretrain_series", c.pretrain_series},
       {"pretrain_length", c.pretrain_length},
       {"pretrain_split", c.pretrain_split},
       {"n_graphs_downstream", c.n_graphs_downstream},
       {"samples_per_graph", c.samples_per_graph},
       {"downstream_length", c.downstream_length},
       {"downstream_split", c.downstream_split},
       {"noise_std", c.noise_std},
       {"spectral_radius_target", c.spectral_radius_target},
       {"svar_rate", c.svar_rate},
       {"master_seed", c.master_seed},
       {"mixed_graph_labels", c.mixed_graph_labels}};
}

inline void from_json(const nlohmann::json& j, SimCorpusConfig& c) {
  c.n_nodes = j.value("n_nodes", c.n_nodes);
  c.pretrain_series = j.value("pretrain_series", c.pretrain_series);
  c.pretrain_length = j.value("pretrain_length", c.pretrain_length);
  c.pretrain_split = j.value("pretrain_split", c.pretrain_split);
  c.n_graphs_downstream = j.value("n_graphs_downstream", c.n_graphs_downstream);
  c.samples_per_graph = j.value("samples_per_graph", c.samples_per_graph);
  c.downstream_length = j.value("downstream_length", c.downstream_length);
  c.downstream_split = j.value("downstream_split", c.downstream_split);
  c.noise_std = j.value("noise_std", c.noise_std);
  c.spectral_radius_target = j.value("spectral_radius_target", c.spectral_radius_target);
  c.svar_rate = j.value("svar_rate", c.svar_rate);
  c.master_seed = j.value("master_seed", c.master_seed);
  c.mixed_graph_labels = j.value("mixed_graph_labels", c.mixed_graph_labels);
}

inline double spectral_radius(const MatrixD& m) {
  if (m.rows() != m.cols()) throw DimensionError("spectral radius of non-square matrix");
  if (m.rows() == 1) return std::abs(m(0, 0));
  Eigen::EigenSolver<MatrixD> es(m, /*computeEigenvectors=*/false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

inline MatrixD standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  MatrixD out(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) out(r, c) = dist(rng);
  return out;
}

/// Draws i.i.d. N(0,1) entries and rescales them so the spectral radius equals
/// `target_radius`. All-zero (radius 0) draws are discarded and redrawn.
inline TransitionMatrix random_stable_transition(Index n, double target_radius, Rng& rng,
                                                 int graph_id = 0) {
  if (n < 1) throw ConfigError("node count must be >= 1");
  if (!(target_radius > 0.0 && target_radius < 1.0))
    throw ConfigError("target spectral radius must lie in (0,1)");
  for (;;) {
    MatrixD raw = standard_normal(n, n, rng);
    const double rho = spectral_radius(raw);
    if (!(rho > 0.0) || !std::isfinite(rho)) continue;
    TransitionMatrix a{raw * (target_radius / rho), graph_id};
    if (n == 1) a.entries(0, 0) = std::copysign(target_radius, raw(0, 0));
    return a;
  }
}

/// x_0 = eps_0 (or `x0` if given), x_t = A x_{t-1} + eps_t, eps ~ N(0, noise_std^2 I).
/// The full innovation matrix is drawn up front, column by column.
inline MatrixD generate_var(const TransitionMatrix& a, Index length, double noise_std, Rng& rng,
                            const std::optional<VectorD>& x0 = std::nullopt) {
  if (length < 1) throw ConfigError("series length must be >= 1");
  if (noise_std < 0.0 || !std::isfinite(noise_std)) throw ConfigError("noise_std must be >= 0");
  const Index n = a.n();
  if (x0 && x0->size() != n) throw DimensionError("initial state has wrong dimension");
  const MatrixD eps = standard_normal(n, length, rng) * noise_std;
  MatrixD x(n, length);
  x.col(0) = x0 ? *x0 : VectorD(eps.col(0));
  for (Index t = 1; t < length; ++t) x.col(t).noalias() = a.entries * x.col(t - 1) + eps.col(t);
  return x;
}

/// A VAR of length rate*T observed at every rate-th step.
inline MatrixD generate_svar(const TransitionMatrix& a, Index length, int rate, double noise_std,
                             Rng& rng, const std::optional<VectorD>& x0 = std::nullopt) {
  if (rate < 1) throw ConfigError("undersampling rate must be >= 1");
  if (length < 1) throw ConfigError("series length must be >= 1");
  MatrixD full = generate_var(a, length * rate, noise_std, rng, x0);
  if (rate == 1) return full;
  MatrixD out(full.rows(), length);
  for (Index t = 0; t < length; ++t) out.col(t) = full.col(t * rate);
  return out;
}

inline SimSplits build_pretrain_corpus(const SimCorpusConfig& cfg) {
  cfg.validate();
  SimSplits out;
  for (Index i = 0; i < cfg.pretrain_series; ++i) {
    const auto id = static_cast<std::uint64_t>(i);
    Rng graph_rng = make_rng(cfg.master_seed, "pretrain/graph", {id});
    const auto a = random_stable_transition(cfg.n_nodes, cfg.spectral_radius_target, graph_rng,
                                            static_cast<int>(i));
    const std::uint64_t seed = derive_seed(cfg.master_seed, "pretrain/series", {id});
    Rng rng(seed);
    const MatrixD x = generate_var(a, cfg.pretrain_length, cfg.noise_std, rng);
    Index start = 0;
    std::vector<SimSeries>* parts[3] = {&out.train, &out.val, &out.test};
    for (int s = 0; s < 3; ++s) {
      const Index len = cfg.pretrain_split[static_cast<std::size_t>(s)];
      parts[s]->push_back(SimSeries{x.middleCols(start, len), SeriesLabel::VAR, a.graph_id, seed, start});
      start += len;
    }
  }
  return out;
}

/// Graph g yields `samples_per_graph` series, all VAR for even g and all SVAR
/// for odd g (or alternating within the graph, see mixed_graph_labels).
/// Graphs are assigned to train/val/test in contiguous blocks, so splits never
/// share a graph.
inline SimSplits build_downstream_corpus(const SimCorpusConfig& cfg) {
  cfg.validate();
  SimSplits out;
  const Index train_graphs = cfg.downstream_split[0] / cfg.samples_per_graph;
  const Index val_graphs = cfg.downstream_split[1] / cfg.samples_per_graph;
  for (Index g = 0; g < cfg.n_graphs_downstream; ++g) {
    const auto gid = static_cast<std::uint64_t>(g);
    Rng graph_rng = make_rng(cfg.master_seed, "downstream/graph", {gid});
    const auto a = random_stable_transition(cfg.n_nodes, cfg.spectral_radius_target, graph_rng,
                                            static_cast<int>(g));
    auto& dest = g < train_graphs ? out.train : (g < train_graphs + val_graphs ? out.val : out.test);
    for (Index s = 0; s < cfg.samples_per_graph; ++s) {
      const Index parity = cfg.mixed_graph_labels ? g + s : g;
      const SeriesLabel label = parity % 2 == 0 ? SeriesLabel::VAR : SeriesLabel::SVAR;
      const std::uint64_t seed =
          derive_seed(cfg.master_seed, "downstream/series", {gid, static_cast<std::uint64_t>(s)});
      Rng rng(seed);
      MatrixD x = label == SeriesLabel::VAR
                      ? generate_var(a, cfg.downstream_length, cfg.noise_std, rng)
                      : generate_svar(a, cfg.downstream_length, cfg.svar_rate, cfg.noise_std, rng);
      dest.push_back(SimSeries{std::move(x), label, a.graph_id, seed, 0});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk corpus: <dir>/{train,val,test}.ntc plus <dir>/manifest.json.

inline constexpr const char* kSplitNames[3] = {"train", "val", "test"};

inline TensorFile split_to_tensors(const std::vector<SimSeries>& split) {
  TensorFile f;
  const std::int64_t count = static_cast<std::int64_t>(split.size());
  const std::int64_t n = split.empty() ? 0 : split.front().values.rows();
  const std::int64_t t = split.empty() ? 0 : split.front().values.cols();
  NamedTensor values{"values", DType::f64, {count, n, t}, {}};
  NamedTensor labels{"labels", DType::f64, {count}, {}};
  NamedTensor graphs{"graph_ids", DType::f64, {count}, {}};
  NamedTensor offsets{"offsets", DType::f64, {count}, {}};
  values.data.reserve(static_cast<std::size_t>(count * n * t));
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : split) {
    if (s.values.rows() != n || s.values.cols() != t)
      throw DimensionError("series in one split must share a shape");
    for (Index r = 0; r < n; ++r)
      for (Index c = 0; c < t; ++c) values.data.push_back(s.values(r, c));
    labels.data.push_back(static_cast<double>(s.label));
    graphs.data.push_back(s.graph_id);
    offsets.data.push_back(static_cast<double>(s.offset));
    seeds.push_back(s.seed);
  }
  f.metadata["seeds"] = seeds;
  f.add(std::move(values));
  f.add(std::move(labels));
  f.add(std::move(graphs));
  f.add(std::move(offsets));
  return f;
}

inline std::vector<SimSeries> tensors_to_split(const TensorFile& f) {
  const auto& values = f.at("values");
  const auto& labels = f.at("labels");
  const auto& graphs = f.at("graph_ids");
  const auto& offsets = f.at("offsets");
  if (values.shape.size() != 3) throw SchemaError("corpus 'values' must be rank 3");
  const auto count = values.shape[0], n = values.shape[1], t = values.shape[2];
  const auto seeds = f.metadata.value("seeds", nlohmann::json::array());
  std::vector<SimSeries> out;
  out.reserve(static_cast<std::size_t>(count));
  std::size_t k = 0;
  for (std::int64_t i = 0; i < count; ++i) {
    SimSeries s;
    s.values.resize(n, t);
    for (Index r = 0; r < n; ++r)
      for (Index c = 0; c < t; ++c) s.values(r, c) = values.data[k++];
    const double lab = labels.data[static_cast<std::size_t>(i)];
    if (lab != 0.0 && lab != 1.0) throw SchemaError("unknown series label");
    s.label = static_cast<SeriesLabel>(static_cast<int>(lab));
    s.graph_id = static_cast<int>(graphs.data[static_cast<std::size_t>(i)]);
    s.offset = static_cast<Index>(offsets.data[static_cast<std::size_t>(i)]);
    if (static_cast<std::size_t>(i) < seeds.size()) s.seed = seeds[static_cast<std::size_t>(i)].get<std::uint64_t>();
    out.push_back(std::move(s));
  }
  return out;
}

inline void write_corpus(const std::filesystem::path& dir, const SimSplits& splits,
                         const std::string& kind, const SimCorpusConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  nlohmann::json manifest;
  manifest["kind"] = kind;
  manifest["config"] = cfg;
  const std::vector<SimSeries>* parts[3] = {&splits.train, &splits.val, &splits.test};
  for (int s = 0; s < 3; ++s) {
    const auto& split = *parts[s];
    write_tensor_file(dir / (std::string(kSplitNames[s]) + ".ntc"), split_to_tensors(split));
    nlohmann::json entry;
    entry["file"] = std::string(kSplitNames[s]) + ".ntc";
    entry["count"] = split.size();
    entry["shape"] = split.empty() ? std::vector<Index>{0, 0, 0}
                                   : std::vector<Index>{static_cast<Index>(split.size()),
                                                        split.front().values.rows(),
                                                        split.front().values.cols()};
    nlohmann::json labels = nlohmann::json::array(), graphs = nlohmann::json::array(),
                   seeds = nlohmann::json::array();
    for (const auto& x : split) {
      labels.push_back(label_name(x.label));
      graphs.push_back(x.graph_id);
      seeds.push_back(x.seed);
    }
    entry["labels"] = labels;
    entry["graph_ids"] = graphs;
    entry["seeds"] = seeds;
    manifest["splits"][kSplitNames[s]] = entry;
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in '" + dir.string() + "'");
  out << manifest.dump(2) << '\n';
}

inline SimSplits read_corpus(const std::filesystem::path& dir) {
  SimSplits out;
  std::vector<SimSeries>* parts[3] = {&out.train, &out.val, &out.test};
  for (int s = 0; s < 3; ++s)
    *parts[s] = tensors_to_split(read_tensor_file(dir / (std::string(kSplitNames[s]) + ".ntc")));
  return out;
}

}  // namespace stdim
