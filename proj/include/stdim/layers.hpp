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

// Differentiable building blocks with hand-written backward passes.
//
// Batched activations are column matrices. A batch of B sequences of length L
// with C channels is stored as a (C, L*B) matrix whose column b*L + t holds
// time step t of item b, so the (C, L) block of each item is contiguous and
// flattens (column-major) to a C*L vector without copying.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "stdim/random.hpp"
#include "stdim/types.hpp"

namespace stdim {

template <typename Scalar>
struct Param {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Glorot/Xavier uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)),
/// i.e. variance 2 / (fan_in + fan_out).
template <typename Scalar>
Matrix<Scalar> xavier_init(Index rows, Index cols, Index fan_in, Index fan_out, Rng& rng) {
  if (fan_in + fan_out <= 0) throw ConfigError("xavier_init needs fan_in + fan_out > 0");
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Matrix<Scalar> w(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) w(r, c) = static_cast<Scalar>(dist(rng));
  return w;
}

template <typename Scalar>
Param<Scalar> zero_param(std::string name, Index rows, Index cols) {
  Param<Scalar> p{std::move(name), Matrix<Scalar>::Zero(rows, cols), Matrix<Scalar>::Zero(rows, cols)};
  return p;
}

template <typename Scalar>
Matrix<Scalar> relu(const Matrix<Scalar>& x) {
  return x.cwiseMax(Scalar(0));
}

// dx = dy where the forward output was positive.
template <typename Scalar>
void relu_backward_inplace(const Matrix<Scalar>& out, Matrix<Scalar>& grad) {
  grad = (out.array() > Scalar(0)).select(grad, Scalar(0));
}

template <typename Scalar>
struct Linear {
  Param<Scalar> weight;  // (out, in)
  Param<Scalar> bias;    // (out, 1)

  Linear() = default;
  Linear(const std::string& name, Index in, Index out)
      : weight(zero_param<Scalar>(name + ".weight", out, in)),
        bias(zero_param<Scalar>(name + ".bias", out, 1)) {}

  Index in_features() const { return weight.value.cols(); }
  Index out_features() const { return weight.value.rows(); }

  void init(Rng& rng) {
    weight.value = xavier_init<Scalar>(out_features(), in_features(), in_features(), out_features(), rng);
    bias.value.setZero();
  }

  Matrix<Scalar> forward(const Matrix<Scalar>& x) const {
    if (x.rows() != in_features())
      throw DimensionError(weight.name + ": expected input dim " + std::to_string(in_features()) +
                           ", got " + std::to_string(x.rows()));
    Matrix<Scalar> y = weight.value * x;
    y.colwise() += bias.value.col(0);
    return y;
  }

  // Accumulates parameter gradients; returns dL/dx when `need_dx`.
  Matrix<Scalar> backward(const Matrix<Scalar>& x, const Matrix<Scalar>& dy, bool need_dx = true) {
    weight.grad.noalias() += dy * x.transpose();
    bias.grad.col(0) += dy.rowwise().sum();
    if (!need_dx) return {};
    return weight.value.transpose() * dy;
  }

  template <typename F>
  void for_each_param(F&& f) {
    f(weight);
    f(bias);
  }
  template <typename F>
  void for_each_param(F&& f) const {
    f(weight);
    f(bias);
  }
};

/// Valid (unpadded), stride-1 1D convolution over im2col patches.
/// Weight layout: (out_channels, kernel*in_channels), column j*in_channels + c
/// multiplies channel c at offset j.
template <typename Scalar>
struct Conv1d {
  Index in_channels = 0;
  Index kernel = 0;
  Param<Scalar> weight;
  Param<Scalar> bias;

  Conv1d() = default;
  Conv1d(const std::string& name, Index in_ch, Index out_ch, Index k)
      : in_channels(in_ch), kernel(k),
        weight(zero_param<Scalar>(name + ".weight", out_ch, k * in_ch)),
        bias(zero_param<Scalar>(name + ".bias", out_ch, 1)) {}

  Index out_channels() const { return weight.value.rows(); }
  Index out_length(Index in_length) const { return in_length - kernel + 1; }

  void init(Rng& rng) {
    weight.value = xavier_init<Scalar>(out_channels(), kernel * in_channels, kernel * in_channels,
                                       kernel * out_channels(), rng);
    bias.value.setZero();
  }

  Matrix<Scalar> im2col(const Matrix<Scalar>& x, Index batch) const {
    const Index in_len = x.cols() / batch;
    const Index out_len = out_length(in_len);
    if (x.rows() != in_channels || in_len * batch != x.cols() || out_len < 1)
      throw DimensionError(weight.name + ": input " + shape_str(x.rows(), x.cols()) +
                           " incompatible with batch " + std::to_string(batch));
    Matrix<Scalar> cols(kernel * in_channels, out_len * batch);
    for (Index b = 0; b < batch; ++b)
      for (Index j = 0; j < kernel; ++j)
        cols.block(j * in_channels, b * out_len, in_channels, out_len) =
            x.block(0, b * in_len + j, in_channels, out_len);
    return cols;
  }

  Matrix<Scalar> forward_cols(const Matrix<Scalar>& cols) const {
    Matrix<Scalar> y = weight.value * cols;
    y.colwise() += bias.value.col(0);
    return y;
  }

  Matrix<Scalar> forward(const Matrix<Scalar>& x, Index batch) const {
    return forward_cols(im2col(x, batch));
  }

  Matrix<Scalar> backward(const Matrix<Scalar>& cols, const Matrix<Scalar>& dy, Index batch,
                          bool need_dx = true) {
    weight.grad.noalias() += dy * cols.transpose();
    bias.grad.col(0) += dy.rowwise().sum();
    if (!need_dx) return {};
    const Matrix<Scalar> dcols = weight.value.transpose() * dy;
    const Index out_len = dy.cols() / batch;
    const Index in_len = out_len + kernel - 1;
    Matrix<Scalar> dx = Matrix<Scalar>::Zero(in_channels, in_len * batch);
    for (Index b = 0; b < batch; ++b)
      for (Index j = 0; j < kernel; ++j)
        dx.block(0, b * in_len + j, in_channels, out_len) +=
            dcols.block(j * in_channels, b * out_len, in_channels, out_len);
    return dx;
  }

  template <typename F>
  void for_each_param(F&& f) {
    f(weight);
    f(bias);
  }
  template <typename F>
  void for_each_param(F&& f) const {
    f(weight);
    f(bias);
  }
};

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

/// Single-direction LSTM, gate order (input, forget, cell, output).
template <typename Scalar>
struct Lstm {
  Param<Scalar> w_ih;  // (4H, D)
  Param<Scalar> w_hh;  // (4H, H)
  Param<Scalar> bias;  // (4H, 1)

  struct Cache {
    Index batch = 0;
    Index steps = 0;
    bool reverse = false;
    std::vector<Matrix<Scalar>> gates;  // post-activation (4H, B) per processed step
    std::vector<Matrix<Scalar>> cell;   // c after each processed step
    std::vector<Matrix<Scalar>> hidden; // h after each processed step
  };

  Lstm() = default;
  Lstm(const std::string& name, Index input, Index hidden)
      : w_ih(zero_param<Scalar>(name + ".w_ih", 4 * hidden, input)),
        w_hh(zero_param<Scalar>(name + ".w_hh", 4 * hidden, hidden)),
        bias(zero_param<Scalar>(name + ".bias", 4 * hidden, 1)) {}

  Index input_size() const { return w_ih.value.cols(); }
  Index hidden_size() const { return w_hh.value.cols(); }

  void init(Rng& rng) {
    const Index h4 = w_ih.value.rows();
    w_ih.value = xavier_init<Scalar>(h4, input_size(), input_size(), h4, rng);
    w_hh.value = xavier_init<Scalar>(h4, hidden_size(), hidden_size(), h4, rng);
    bias.value.setZero();
  }

  /// `x` is (D, steps*B) with step t at columns [t*B, (t+1)*B). With `reverse`
  /// the steps are consumed from last to first. Returns the final hidden state.
  Matrix<Scalar> forward(const Matrix<Scalar>& x, Index batch, bool reverse, Cache* cache) const {
    if (x.rows() != input_size() || batch < 1 || x.cols() % batch != 0)
      throw DimensionError(w_ih.name + ": input " + shape_str(x.rows(), x.cols()) +
                           " incompatible with batch " + std::to_string(batch));
    const Index steps = x.cols() / batch;
    if (steps < 1) throw EmptySequenceError(w_ih.name + ": empty sequence");
    const Index h = hidden_size();
    Matrix<Scalar> pre_in = w_ih.value * x;
    pre_in.colwise() += bias.value.col(0);
    Matrix<Scalar> hs = Matrix<Scalar>::Zero(h, batch);
    Matrix<Scalar> cs = Matrix<Scalar>::Zero(h, batch);
    if (cache) {
      *cache = Cache{batch, steps, reverse, {}, {}, {}};
      cache->gates.reserve(static_cast<std::size_t>(steps));
      cache->cell.reserve(static_cast<std::size_t>(steps));
      cache->hidden.reserve(static_cast<std::size_t>(steps));
    }
    Matrix<Scalar> a(4 * h, batch);
    for (Index k = 0; k < steps; ++k) {
      const Index t = reverse ? steps - 1 - k : k;
      a = pre_in.middleCols(t * batch, batch);
      a.noalias() += w_hh.value * hs;
      a.topRows(2 * h) = a.topRows(2 * h).unaryExpr([](Scalar v) { return sigmoid(v); });
      a.middleRows(2 * h, h) = a.middleRows(2 * h, h).array().tanh().matrix();
      a.bottomRows(h) = a.bottomRows(h).unaryExpr([](Scalar v) { return sigmoid(v); });
      cs = (a.middleRows(h, h).array() * cs.array() +
            a.topRows(h).array() * a.middleRows(2 * h, h).array()).matrix();
      hs = (a.bottomRows(h).array() * cs.array().tanh()).matrix();
      if (cache) {
        cache->gates.push_back(a);
        cache->cell.push_back(cs);
        cache->hidden.push_back(hs);
      }
    }
    return hs;
  }

  /// Backpropagates dL/dh_final through time. Returns dL/dx laid out like the
  /// forward input when `need_dx`.
  Matrix<Scalar> backward(const Matrix<Scalar>& x, const Cache& cache, const Matrix<Scalar>& dh_final,
                          bool need_dx = true) {
    const Index h = hidden_size();
    const Index batch = cache.batch;
    const Index steps = cache.steps;
    Matrix<Scalar> da_all(4 * h, steps * batch);
    Matrix<Scalar> dh = dh_final;
    Matrix<Scalar> dc = Matrix<Scalar>::Zero(h, batch);
    Matrix<Scalar> da(4 * h, batch);
    for (Index k = steps - 1; k >= 0; --k) {
      const Index t = cache.reverse ? steps - 1 - k : k;
      const auto& g = cache.gates[static_cast<std::size_t>(k)];
      const auto& c = cache.cell[static_cast<std::size_t>(k)];
      const Matrix<Scalar> c_prev = k > 0 ? cache.cell[static_cast<std::size_t>(k - 1)]
                                          : Matrix<Scalar>::Zero(h, batch);
      const auto i_g = g.topRows(h).array();
      const auto f_g = g.middleRows(h, h).array();
      const auto c_g = g.middleRows(2 * h, h).array();
      const auto o_g = g.bottomRows(h).array();
      const auto tc = c.array().tanh();
      dc.array() += dh.array() * o_g * (Scalar(1) - tc.square());
      da.topRows(h) = (dc.array() * c_g * i_g * (Scalar(1) - i_g)).matrix();
      da.middleRows(h, h) = (dc.array() * c_prev.array() * f_g * (Scalar(1) - f_g)).matrix();
      da.middleRows(2 * h, h) = (dc.array() * i_g * (Scalar(1) - c_g.square())).matrix();
      da.bottomRows(h) = (dh.array() * tc * o_g * (Scalar(1) - o_g)).matrix();
      dc.array() *= f_g;
      da_all.middleCols(t * batch, batch) = da;
      if (k > 0) w_hh.grad.noalias() += da * cache.hidden[static_cast<std::size_t>(k - 1)].transpose();
      dh.noalias() = w_hh.value.transpose() * da;
    }
    w_ih.grad.noalias() += da_all * x.transpose();
    bias.grad.col(0) += da_all.rowwise().sum();
    if (!need_dx) return {};
    return w_ih.value.transpose() * da_all;
  }

  template <typename F>
  void for_each_param(F&& f) {
    f(w_ih);
    f(w_hh);
    f(bias);
  }
  template <typename F>
  void for_each_param(F&& f) const {
    f(w_ih);
    f(w_hh);
    f(bias);
  }
};

}  // namespace stdim
