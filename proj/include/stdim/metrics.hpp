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
#include <numeric>
#include <span>
#include <vector>

#include "stdim/types.hpp"

namespace stdim {

/// ROC AUC as the normalized Mann-Whitney statistic: the share of
/// (positive, negative) pairs ranked correctly, ties counting one half.
/// O(n log n); the pair count is accumulated exactly.
inline double compute_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double n_pos = 0, n_neg = 0, u = 0, neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double p = 0, n = 0;
    for (; j < order.size() && scores[order[j]] == scores[order[i]]; ++j) {
      const int l = labels[order[j]];
      if (l == 1) ++p;
      else if (l == 0) ++n;
      else throw UndefinedMetricError("auc: labels must be 0 or 1");
    }
    u += p * neg_below + 0.5 * p * n;
    neg_below += n;
    n_pos += p;
    n_neg += n;
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("auc needs both classes present");
  return u / (n_pos * n_neg);
}

inline double compute_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size())
    throw DimensionError("accuracy: predictions and labels differ in length");
  if (labels.empty()) throw UndefinedMetricError("accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace stdim
