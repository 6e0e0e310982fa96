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

// Learning-curve experiments: for every (mode, training size, trial) cell a
// class-balanced training subset is drawn from the pool, a model is trained,
// and it is scored on one fixed held-out test set shared by all cells.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "stdim/metrics.hpp"
#include "stdim/model.hpp"
#include "stdim/training.hpp"
#include "stdim/types.hpp"

namespace stdim {

struct CurveConfig {
  std::vector<TrainMode> modes{TrainMode::NPT, TrainMode::FPT, TrainMode::UFPT};
  std::vector<Index> train_sizes{10, 20, 40, 80, 160};  // per class
  Index n_trials = 10;
  Index test_size = 64;  // subject-style datasets only
  Index val_size = 32;   // subject-style datasets only
  StopMetric metric = StopMetric::accuracy;
  std::uint64_t master_seed = 0;
  Hyperparams hyper = Hyperparams::downstream_defaults();
  ClassifierConfig classifier;
  std::optional<EncoderConfig> npt_encoder;  // defaults to the variant matching the data
  Index window_hop = 0;
  Index workers = 1;
  std::string data;  // corpus or subject-dataset directory

  void validate(bool have_pretrained) const {
    if (modes.empty()) throw ConfigError("curve needs at least one mode");
    if (train_sizes.empty()) throw ConfigError("curve needs at least one training size");
    for (std::size_t i = 0; i < train_sizes.size(); ++i) {
      if (train_sizes[i] < 1) throw ConfigError("training sizes must be >= 1");
      if (i > 0 && train_sizes[i] <= train_sizes[i - 1]) throw ConfigError("training sizes must be strictly ascending");
    }
    if (n_trials < 1) throw ConfigError("n_trials must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    for (auto m : modes)
      if (m != TrainMode::NPT && !have_pretrained)
        throw ConfigError(std::string(mode_name(m)) + " in curve modes requires a pre-trained checkpoint");
    hyper.validate();
  }
};

inline void to_json(nlohmann::json& j, const CurveConfig& c) {
  std::vector<std::string> modes;
  for (auto m : c.modes) modes.push_back(mode_name(m));
  j = {{"modes", modes},         {"train_sizes", c.train_sizes},      {"n_trials", c.n_trials},
       {"test_size", c.test_size}, {"val_size", c.val_size},            {"metric", metric_name(c.metric)},
       {"master_seed", c.master_seed}, {"hyper", c.hyper},             {"classifier", c.classifier},
       {"window_hop", c.window_hop}, {"data", c.data}};
  if (c.npt_encoder) j["npt_encoder"] = *c.npt_encoder;
}

inline void from_json(const nlohmann::json& j, CurveConfig& c) {
  if (j.contains("modes")) {
    c.modes.clear();
    for (const auto& m : j.at("modes")) c.modes.push_back(parse_mode(m.get<std::string>()));
  }
  c.train_sizes = j.value("train_sizes", c.train_sizes);
  c.n_trials = j.value("n_trials", c.n_trials);
  c.test_size = j.value("test_size", c.test_size);
  c.val_size = j.value("val_size", c.val_size);
  if (j.contains("metric")) c.metric = parse_metric(j.at("metric").get<std::string>());
  c.master_seed = j.value("master_seed", c.master_seed);
  if (j.contains("hyper")) {
    c.hyper = Hyperparams::downstream_defaults();
    from_json(j.at("hyper"), c.hyper);
  }
  if (j.contains("classifier")) c.classifier = j.at("classifier").get<ClassifierConfig>();
  if (j.contains("npt_encoder")) c.npt_encoder = j.at("npt_encoder").get<EncoderConfig>();
  c.window_hop = j.value("window_hop", c.window_hop);
  c.workers = j.value("workers", c.workers);
  c.data = j.value("data", c.data);
}

struct CurveRecord {
  TrainMode mode = TrainMode::NPT;
  Index train_size = 0;
  Index trial = 0;
  std::string metric;
  double value = 0;
  std::uint64_t seed = 0;
  double accuracy = 0;
  double auc = 0;
};

struct CurveResult {
  std::vector<CurveRecord> records;
  nlohmann::json config;
};

/// Pool, validation and fixed test series for a learning curve.
struct CurveData {
  std::vector<LabeledSeries> pool;
  std::vector<LabeledSeries> val;
  std::vector<LabeledSeries> test;
};

/// Stratified, seeded split of a subject dataset into pool / val / test.
inline CurveData split_subjects(const std::vector<LabeledSeries>& all, Index test_size, Index val_size,
                                std::uint64_t seed) {
  if (test_size + val_size >= static_cast<Index>(all.size()))
    throw ConfigError("test_size + val_size leaves no training pool");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < all.size(); ++i) by_class[all[i].label].push_back(i);
  Rng rng = make_rng(seed, "subject-split");
  // Interleave classes after shuffling so taking a prefix is class-balanced.
  std::vector<std::vector<std::size_t>> queues;
  for (auto& [label, idx] : by_class) {
    detail::shuffle_in_place(idx, rng);
    queues.push_back(idx);
  }
  std::vector<std::size_t> order;
  for (std::size_t k = 0; order.size() < all.size(); ++k)
    for (const auto& q : queues)
      if (k < q.size()) order.push_back(q[k]);
  CurveData d;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& s = all[order[i]];
    if (static_cast<Index>(i) < test_size) d.test.push_back(s);
    else if (static_cast<Index>(i) < test_size + val_size) d.val.push_back(s);
    else d.pool.push_back(s);
  }
  return d;
}

inline std::uint64_t cell_seed(std::uint64_t master, TrainMode mode, Index size, Index trial) {
  return derive_seed(master, "curve/cell",
                     {static_cast<std::uint64_t>(mode), static_cast<std::uint64_t>(size), static_cast<std::uint64_t>(trial)});
}

/// `size` series of every class drawn without replacement from `pool`.
/// Shared by all modes for a given (size, trial) so modes are compared on
/// identical training subsets.
inline std::vector<std::size_t> resample_pool(const std::vector<LabeledSeries>& pool, Index size, Index trial,
                                              std::uint64_t master) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool[i].label].push_back(i);
  Rng rng = make_rng(master, "curve/resample", {static_cast<std::uint64_t>(size), static_cast<std::uint64_t>(trial)});
  std::vector<std::size_t> chosen;
  for (auto& [label, idx] : by_class) {
    if (static_cast<Index>(idx.size()) < size)
      throw ConfigError("training size " + std::to_string(size) + " per class exceeds pool (" +
                        std::to_string(idx.size()) + " of class " + std::to_string(label) + ")");
    detail::shuffle_in_place(idx, rng);
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + size);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

template <typename Scalar>
CurveResult run_learning_curve(const CurveConfig& cfg, const CurveData& data, const Checkpoint* pretrained,
                               const std::function<void(const CurveRecord&)>& on_record = {}) {
  cfg.validate(pretrained != nullptr);
  {
    std::set<std::string> test_ids;
    for (const auto& s : data.test) test_ids.insert(s.id);
    for (const auto* set : {&data.pool, &data.val})
      for (const auto& s : *set)
        if (test_ids.count(s.id)) throw ConfigError("series '" + s.id + "' appears in the test set and a training pool");
  }
  for (auto size : cfg.train_sizes) resample_pool(data.pool, size, 0, cfg.master_seed);  // size check up front

  EncoderConfig npt = cfg.npt_encoder.value_or(
      pretrained ? checkpoint_encoder_config(*pretrained)
                 : (data.pool.front().values.rows() == 53 ? EncoderConfig::real() : EncoderConfig::sim(data.pool.front().values.rows())));
  ClassifierConfig clf = cfg.classifier;
  clf.input_dim = npt.latent_dim;

  struct Cell {
    TrainMode mode;
    Index size;
    Index trial;
  };
  std::vector<Cell> cells;
  for (auto m : cfg.modes)
    for (auto size : cfg.train_sizes)
      for (Index t = 0; t < cfg.n_trials; ++t) cells.push_back({m, size, t});

  CurveResult result;
  result.config = cfg;
  result.records.resize(cells.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto work = [&]() {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= cells.size()) return;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (failure) return;
      }
      try {
        const Cell& c = cells[k];
        const auto seed = cell_seed(cfg.master_seed, c.mode, c.size, c.trial);
        DownstreamData d;
        for (auto i : resample_pool(data.pool, c.size, c.trial, cfg.master_seed)) d.train.push_back(data.pool[i]);
        d.val = data.val;
        d.test = data.test;
        Hyperparams hp = cfg.hyper;
        hp.seed = seed;
        DownstreamOptions opts;
        opts.window_hop = cfg.window_hop;
        opts.stop_metric = cfg.metric;
        const auto r = train_downstream<Scalar>(c.mode, c.mode == TrainMode::NPT ? nullptr : pretrained, npt, d, clf, hp, opts);
        CurveRecord rec{c.mode, c.size, c.trial, metric_name(cfg.metric), r.test.metric(cfg.metric), seed,
                        r.test.accuracy, r.test.auc};
        std::lock_guard<std::mutex> lock(mu);
        result.records[k] = rec;
        if (on_record) on_record(rec);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  if (cfg.workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (Index w = 0; w < cfg.workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return result;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct CellSummary {
  double mean = 0, std = 0, min = 0, max = 0;
  double accuracy_mean = 0, auc_mean = 0;
  Index n = 0;
};

inline std::map<std::pair<std::string, Index>, CellSummary> summarize(const CurveResult& r) {
  std::map<std::pair<std::string, Index>, std::vector<const CurveRecord*>> cells;
  for (const auto& rec : r.records) cells[{mode_name(rec.mode), rec.train_size}].push_back(&rec);
  std::map<std::pair<std::string, Index>, CellSummary> out;
  for (const auto& [key, recs] : cells) {
    CellSummary s;
    s.n = static_cast<Index>(recs.size());
    s.min = s.max = recs.front()->value;
    for (const auto* rec : recs) {
      s.mean += rec->value;
      s.accuracy_mean += rec->accuracy;
      s.auc_mean += rec->auc;
      s.min = std::min(s.min, rec->value);
      s.max = std::max(s.max, rec->value);
    }
    s.mean /= static_cast<double>(s.n);
    s.accuracy_mean /= static_cast<double>(s.n);
    s.auc_mean /= static_cast<double>(s.n);
    double ss = 0;
    for (const auto* rec : recs) ss += (rec->value - s.mean) * (rec->value - s.mean);
    s.std = s.n > 1 ? std::sqrt(ss / static_cast<double>(s.n - 1)) : 0.0;
    out[key] = s;
  }
  return out;
}

inline void emit_report(const CurveResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  {
    std::ofstream out(dir / "curve.csv", std::ios::trunc);
    if (!out) throw IoError("cannot write '" + (dir / "curve.csv").string() + "'");
    out << "mode,train_size,trial,metric,value,seed\n";
    for (const auto& rec : r.records)
      out << mode_name(rec.mode) << ',' << rec.train_size << ',' << rec.trial << ',' << rec.metric << ','
          << format_double(rec.value) << ',' << rec.seed << '\n';
    if (!out) throw IoError("write failed for '" + (dir / "curve.csv").string() + "'");
  }
  {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& [key, s] : summarize(r))
      cells.push_back({{"mode", key.first},       {"train_size", key.second}, {"n", s.n},
                       {"mean", s.mean},          {"std", s.std},             {"min", s.min},
                       {"max", s.max},            {"accuracy_mean", s.accuracy_mean},
                       {"auc_mean", std::isnan(s.auc_mean) ? nlohmann::json(nullptr) : nlohmann::json(s.auc_mean)}});
    std::ofstream out(dir / "curve_summary.json", std::ios::trunc);
    if (!out) throw IoError("cannot write '" + (dir / "curve_summary.json").string() + "'");
    out << nlohmann::json{{"cells", cells}}.dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "config.json", std::ios::trunc);
    if (!out) throw IoError("cannot write '" + (dir / "config.json").string() + "'");
    out << r.config.dump(2) << '\n';
  }
}

inline std::vector<CurveRecord> read_curve_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != "mode,train_size,trial,metric,value,seed")
    throw SchemaError("'" + path.string() + "' lacks the curve.csv header");
  std::vector<CurveRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 6) throw SchemaError("curve.csv row has " + std::to_string(f.size()) + " fields");
    CurveRecord r;
    r.mode = parse_mode(f[0]);
    r.train_size = std::stoll(f[1]);
    r.trial = std::stoll(f[2]);
    r.metric = f[3];
    std::from_chars(f[4].data(), f[4].data() + f[4].size(), r.value);
    r.seed = std::stoull(f[5]);
    out.push_back(r);
  }
  return out;
}

}  // namespace stdim
