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

#include <cmath>
#include <vector>

#include "stdim/layers.hpp"

namespace stdim {

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar, typename Module>
void collect_params(Module& m, std::vector<Param<Scalar>*>& out) {
  m.for_each_param([&](Param<Scalar>& p) { out.push_back(&p); });
}

template <typename Scalar>
void zero_grads(const std::vector<Param<Scalar>*>& params) {
  for (auto* p : params) p->zero_grad();
}

/// Adam with bias-corrected moments. Only the registered parameters carry
/// optimizer state; the referenced parameters must outlive the optimizer.
template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Param<Scalar>*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
    const auto lr = static_cast<Scalar>(cfg_.learning_rate);
    const auto eps = static_cast<Scalar>(cfg_.eps);
    const auto c1 = static_cast<Scalar>(bc1), c2 = static_cast<Scalar>(bc2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& g = params_[i]->grad;
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
      params_[i]->value.array() -=
          lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    }
  }

  void zero_grad() { zero_grads(params_); }

  const std::vector<Param<Scalar>*>& params() const { return params_; }
  long steps() const { return t_; }

 private:
  std::vector<Param<Scalar>*> params_;
  AdamConfig cfg_;
  std::vector<Matrix<Scalar>> m_, v_;
  long t_ = 0;
};

}  // namespace stdim
