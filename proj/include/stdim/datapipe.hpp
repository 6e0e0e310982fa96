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

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stdim/random.hpp"
#include "stdim/types.hpp"

namespace stdim {

struct Window {
  MatrixD values;  // channels x width
  Index series_id = 0;
  Index start = 0;
};

struct WindowSequence {
  std::vector<Window> windows;
  Index hop = 1;
  Index width = 1;
};

inline Index window_count(Index length, Index width, Index hop) {
  if (width < 1 || hop < 1) throw ConfigError("window width and hop must be >= 1");
  if (length < width) return 0;
  return (length - width) / hop + 1;
}

inline WindowSequence slide_windows(const MatrixD& series, Index width, Index hop,
                                    Index series_id = 0) {
  const Index count = window_count(series.cols(), width, hop);
  if (count == 0)
    throw EmptySequenceError("series of length " + std::to_string(series.cols()) +
                             " is shorter than window width " + std::to_string(width));
  WindowSequence seq{{}, hop, width};
  seq.windows.reserve(static_cast<std::size_t>(count));
  for (Index k = 0; k < count; ++k)
    seq.windows.push_back(Window{series.middleCols(k * hop, width), series_id, k * hop});
  return seq;
}

/// anchors[i] and positives[i] are consecutive non-overlapping windows of the
/// same series; positives[j], j != i, act as negatives for anchors[i].
struct ContrastiveBatch {
  std::vector<Window> anchors;
  std::vector<Window> positives;

  Index size() const { return static_cast<Index>(anchors.size()); }
};

struct AnchorRef {
  Index series = 0;
  Index start = 0;
};

/// Every anchor start on a grid of step `stride` (default: the window width)
/// whose successor window [start + width, start + 2*width) is in bounds.
inline std::vector<AnchorRef> enumerate_anchors(std::span<const MatrixD> corpus, Index width,
                                                Index stride = 0) {
  if (width < 1) throw ConfigError("window width must be >= 1");
  if (stride <= 0) stride = width;
  std::vector<AnchorRef> refs;
  for (std::size_t s = 0; s < corpus.size(); ++s)
    for (Index start = 0; start + 2 * width <= corpus[s].cols(); start += stride)
      refs.push_back(AnchorRef{static_cast<Index>(s), start});
  return refs;
}

inline ContrastiveBatch make_contrastive_batch(std::span<const MatrixD> corpus,
                                               std::span<const AnchorRef> refs, Index width) {
  ContrastiveBatch b;
  b.anchors.reserve(refs.size());
  b.positives.reserve(refs.size());
  for (const auto& r : refs) {
    const auto& series = corpus[static_cast<std::size_t>(r.series)];
    if (r.start + 2 * width > series.cols())
      throw ConfigError("anchor at " + std::to_string(r.start) + " has no successor window");
    b.anchors.push_back(Window{series.middleCols(r.start, width), r.series, r.start});
    b.positives.push_back(Window{series.middleCols(r.start + width, width), r.series, r.start + width});
  }
  return b;
}

/// Uniformly samples `batch_size` distinct anchor positions.
inline ContrastiveBatch sample_contrastive_batch(std::span<const MatrixD> corpus, Index batch_size,
                                                 Index width, Rng& rng) {
  if (batch_size < 2) throw ConfigError("contrastive batch size must be >= 2");
  auto refs = enumerate_anchors(corpus, width);
  if (refs.empty()) throw EmptySequenceError("corpus cannot host any consecutive window pair");
  if (static_cast<Index>(refs.size()) < batch_size)
    throw ConfigError("corpus hosts only " + std::to_string(refs.size()) +
                      " anchor positions, fewer than batch size " + std::to_string(batch_size));
  for (Index i = 0; i < batch_size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), refs.size() - 1);
    std::swap(refs[static_cast<std::size_t>(i)], refs[pick(rng)]);
  }
  return make_contrastive_batch(corpus, std::span(refs).first(static_cast<std::size_t>(batch_size)),
                                width);
}

inline constexpr double kZscoreEpsilon = 1e-8;

/// Per-channel (row) standardization with population std. Channels whose std
/// is below kZscoreEpsilon become all zeros.
inline MatrixD zscore_normalize(const MatrixD& series) {
  MatrixD out(series.rows(), series.cols());
  const double n = static_cast<double>(series.cols());
  for (Index r = 0; r < series.rows(); ++r) {
    const double mean = series.row(r).sum() / n;
    const double var = (series.row(r).array() - mean).square().sum() / n;
    const double sd = std::sqrt(var);
    if (sd < kZscoreEpsilon) out.row(r).setZero();
    else out.row(r) = (series.row(r).array() - mean) / sd;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subject datasets: manifest.json + one headerless CSV per subject
// (rows = components, columns = time points).

struct SubjectRecord {
  std::string id;
  int label = 0;
  MatrixD values;  // components x time
};

struct SubjectDataset {
  Index n_components = 0;
  std::map<std::string, int> label_names;
  std::vector<SubjectRecord> subjects;
};

inline MatrixD read_csv_matrix(const std::filesystem::path& path, const std::string& subject) {
  std::ifstream in(path);
  if (!in) throw IoError("missing data file '" + path.string() + "' for subject '" + subject + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    while (p < end) {
      while (p < end && *p == ' ') ++p;
      double v = 0.0;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc())
        throw SchemaError("subject '" + subject + "': non-numeric CSV field in row " +
                          std::to_string(rows.size()));
      row.push_back(v);
      p = next;
      while (p < end && *p == ' ') ++p;
      if (p < end) {
        if (*p != ',')
          throw SchemaError("subject '" + subject + "': malformed CSV row " + std::to_string(rows.size()));
        ++p;
      }
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw SchemaError("subject '" + subject + "': ragged CSV rows");
    rows.push_back(std::move(row));
  }
  MatrixD m(static_cast<Index>(rows.size()), rows.empty() ? 0 : static_cast<Index>(rows.front().size()));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) m(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
  return m;
}

inline void write_csv_matrix(const std::filesystem::path& path, const MatrixD& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  char buf[64];
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      if (c) out.put(',');
      auto res = std::to_chars(buf, buf + sizeof buf, m(r, c));  // shortest round-trip form
      out.write(buf, res.ptr - buf);
    }
    out.put('\n');
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline SubjectDataset load_subject_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest '" + manifest_path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("manifest '" + manifest_path.string() + "' is not valid JSON: " + e.what());
  }
  SubjectDataset ds;
  try {
    ds.n_components = j.at("n_components").get<Index>();
    ds.label_names = j.value("label_names", std::map<std::string, int>{});
    for (const auto& e : j.at("subjects")) {
      SubjectRecord rec;
      rec.id = e.at("id").get<std::string>();
      rec.label = e.at("label").get<int>();
      const auto file = e.at("file").get<std::string>();
      const bool known = std::any_of(ds.label_names.begin(), ds.label_names.end(),
                                     [&](const auto& kv) { return kv.second == rec.label; });
      if (!known)
        throw SchemaError("subject '" + rec.id + "' has unknown label " + std::to_string(rec.label));
      rec.values = read_csv_matrix(manifest_path.parent_path() / file, rec.id);
      if (rec.values.rows() != ds.n_components)
        throw SchemaError("subject '" + rec.id + "' has " + std::to_string(rec.values.rows()) +
                          " components, manifest declares " + std::to_string(ds.n_components));
      ds.subjects.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("manifest '" + manifest_path.string() + "': " + e.what());
  }
  return ds;
}

inline void save_subject_dataset(const std::filesystem::path& dir, const SubjectDataset& ds) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  nlohmann::json j;
  j["n_components"] = ds.n_components;
  j["label_names"] = ds.label_names;
  j["subjects"] = nlohmann::json::array();
  for (const auto& s : ds.subjects) {
    if (s.values.rows() != ds.n_components)
      throw SchemaError("subject '" + s.id + "' component count mismatch");
    const std::string file = s.id + ".csv";
    write_csv_matrix(dir / file, s.values);
    j["subjects"].push_back({{"id", s.id}, {"file", file}, {"label", s.label}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest in '" + dir.string() + "'");
  out << j.dump(2) << '\n';
}

}  // namespace stdim
