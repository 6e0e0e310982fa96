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

// Windowed 1D-convolutional encoder, separable critic heads, and the
// bidirectional LSTM sequence classifier.

#include <filesystem>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "stdim/datapipe.hpp"
#include "stdim/layers.hpp"
#include "stdim/random.hpp"
#include "stdim/tensor_file.hpp"
#include "stdim/types.hpp"

namespace stdim {

struct ConvSpec {
  Index out_channels = 0;
  Index kernel = 0;
  Index stride = 1;
};

struct EncoderConfig {
  std::string variant = "sim";
  Index in_channels = 10;
  Index width = 20;
  std::vector<ConvSpec> convs;
  Index latent_dim = 256;
  Index tap_layer = 3;  // 1-based conv layer whose output is the spatial state
  Index embed_dim = 128;

  /// 4 conv layers (32,64,128,64), kernels (4,4,3,2), ReLU after each.
  static EncoderConfig sim(Index channels = 10, Index width = 20) {
    return {"sim", channels, width, {{32, 4, 1}, {64, 4, 1}, {128, 3, 1}, {64, 2, 1}}, 256, 3, 128};
  }
  /// 3 conv layers (64,128,200), kernels (4,4,3).
  static EncoderConfig real(Index channels = 53, Index width = 20) {
    return {"real", channels, width, {{64, 4, 1}, {128, 4, 1}, {200, 3, 1}}, 256, 3, 128};
  }

  /// Downstream window hop when none is configured: half-overlapping windows
  /// for subject data, back-to-back windows for simulated series.
  Index default_hop() const { return variant == "real" ? std::max<Index>(1, width / 2) : width; }

  std::vector<Index> lengths() const {
    std::vector<Index> l{width};
    for (const auto& c : convs) l.push_back(l.back() - c.kernel + 1);
    return l;
  }

  Index spatial_dim() const {
    return convs[static_cast<std::size_t>(tap_layer - 1)].out_channels *
           lengths()[static_cast<std::size_t>(tap_layer)];
  }

  Index flat_dim() const { return convs.back().out_channels * lengths().back(); }

  void validate() const {
    if (in_channels < 1 || width < 1) throw ConfigError("encoder needs in_channels, width >= 1");
    if (convs.empty()) throw ConfigError("encoder needs at least one conv layer");
    Index len = width;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      const auto& c = convs[i];
      if (c.stride != 1) throw ConfigError("only stride-1 convolutions are supported");
      if (c.out_channels < 1 || c.kernel < 1) throw ConfigError("conv layer sizes must be >= 1");
      if (c.kernel > len)
        throw ConfigError("conv layer " + std::to_string(i + 1) + " kernel exceeds running length");
      len = len - c.kernel + 1;
    }
    if (tap_layer < 1 || tap_layer > static_cast<Index>(convs.size()))
      throw ConfigError("tap_layer out of range");
    if (latent_dim < 1 || embed_dim < 1) throw ConfigError("latent_dim and embed_dim must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const ConvSpec& c) {
  j = {{"out_channels", c.out_channels}, {"kernel", c.kernel}, {"stride", c.stride}};
}
inline void from_json(const nlohmann::json& j, ConvSpec& c) {
  c.out_channels = j.at("out_channels").get<Index>();
  c.kernel = j.at("kernel").get<Index>();
  c.stride = j.value("stride", Index{1});
}
inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"variant", c.variant},         {"in_channels", c.in_channels}, {"width", c.width},
       {"convs", c.convs},             {"latent_dim", c.latent_dim},   {"tap_layer", c.tap_layer},
       {"embed_dim", c.embed_dim}};
}
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  const auto variant = j.value("variant", std::string("sim"));
  if (variant == "sim") c = EncoderConfig::sim();
  else if (variant == "real") c = EncoderConfig::real();
  else c.variant = variant;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.width = j.value("width", c.width);
  if (j.contains("convs")) c.convs = j.at("convs").get<std::vector<ConvSpec>>();
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.tap_layer = j.value("tap_layer", c.tap_layer);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
}

template <typename Scalar>
struct EncoderOutput {
  Vector<Scalar> z;   // latent state
  Vector<Scalar> c3;  // flattened spatial state of the tap layer
};

/// Latent and spatial states of B windows, one column per window.
template <typename Scalar>
struct EncoderBatch {
  Matrix<Scalar> z;
  Matrix<Scalar> spatial;
};

template <typename Scalar>
struct Encoder {
  EncoderConfig config;
  std::vector<Conv1d<Scalar>> convs;
  Linear<Scalar> latent;

  struct Cache {
    Index batch = 0;
    std::vector<Matrix<Scalar>> cols;  // im2col input of each conv
    std::vector<Matrix<Scalar>> outs;  // post-ReLU output of each conv
  };

  Encoder() = default;
  explicit Encoder(EncoderConfig cfg) : config(std::move(cfg)) {
    config.validate();
    Index ch = config.in_channels;
    for (std::size_t i = 0; i < config.convs.size(); ++i) {
      convs.emplace_back("encoder.conv" + std::to_string(i + 1), ch, config.convs[i].out_channels,
                         config.convs[i].kernel);
      ch = config.convs[i].out_channels;
    }
    latent = Linear<Scalar>("encoder.latent", config.flat_dim(), config.latent_dim);
  }

  void init(Rng& rng) {
    for (auto& c : convs) c.init(rng);
    latent.init(rng);
  }

  /// `x` is (in_channels, width*B): B windows side by side.
  EncoderBatch<Scalar> forward(const Matrix<Scalar>& x, Index batch, Cache* cache = nullptr) const {
    if (x.rows() != config.in_channels || batch < 1 || x.cols() != config.width * batch)
      throw DimensionError("encoder expects " + shape_str(config.in_channels, config.width) +
                           " windows, got input " + shape_str(x.rows(), x.cols()) + " for batch " +
                           std::to_string(batch));
    Cache local;
    Cache& c = cache ? *cache : local;
    c.batch = batch;
    c.cols.assign(convs.size(), {});
    c.outs.assign(convs.size(), {});
    const Matrix<Scalar>* in = &x;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      c.cols[i] = convs[i].im2col(*in, batch);
      c.outs[i] = relu<Scalar>(convs[i].forward_cols(c.cols[i]));
      in = &c.outs[i];
      if (!cache && i > 0) c.cols[i - 1].resize(0, 0);
    }
    EncoderBatch<Scalar> out;
    out.z = latent.forward(flatten(c.outs.back(), batch));
    out.spatial = flatten(c.outs[static_cast<std::size_t>(config.tap_layer - 1)], batch);
    return out;
  }

  /// Backpropagates dL/dz and dL/d(spatial) into parameter gradients.
  /// `dspatial` may be empty (no spatial gradient).
  void backward(const Cache& cache, const Matrix<Scalar>& dz, const Matrix<Scalar>& dspatial) {
    const Index batch = cache.batch;
    const std::size_t last = convs.size() - 1;
    const std::size_t tap = static_cast<std::size_t>(config.tap_layer - 1);
    Matrix<Scalar> dflat = latent.backward(flatten(cache.outs[last], batch), dz);
    Matrix<Scalar> dout = unflatten(dflat, convs[last].out_channels(), batch);
    for (std::size_t k = convs.size(); k-- > 0;) {
      if (k == tap && dspatial.size() > 0) dout += unflatten(dspatial, convs[k].out_channels(), batch);
      relu_backward_inplace<Scalar>(cache.outs[k], dout);
      dout = convs[k].backward(cache.cols[k], dout, batch, /*need_dx=*/k > 0);
    }
  }

  static Matrix<Scalar> flatten(const Matrix<Scalar>& m, Index batch) {
    return Eigen::Map<const Matrix<Scalar>>(m.data(), m.size() / batch, batch);
  }
  static Matrix<Scalar> unflatten(const Matrix<Scalar>& m, Index channels, Index batch) {
    return Eigen::Map<const Matrix<Scalar>>(m.data(), channels, m.size() / channels);
  }

  template <typename F>
  void for_each_param(F&& f) {
    for (auto& c : convs) c.for_each_param(f);
    latent.for_each_param(f);
  }
  template <typename F>
  void for_each_param(F&& f) const {
    for (const auto& c : convs) c.for_each_param(f);
    latent.for_each_param(f);
  }
};

/// Stacks windows (channels x width each) side by side into one batch matrix.
template <typename Scalar>
Matrix<Scalar> stack_windows(const std::vector<Window>& windows) {
  if (windows.empty()) throw EmptySequenceError("no windows to stack");
  const Index ch = windows.front().values.rows();
  const Index w = windows.front().values.cols();
  Matrix<Scalar> x(ch, w * static_cast<Index>(windows.size()));
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (windows[i].values.rows() != ch || windows[i].values.cols() != w)
      throw DimensionError("windows in one batch must share a shape");
    x.middleCols(static_cast<Index>(i) * w, w) = windows[i].values.template cast<Scalar>();
  }
  return x;
}

template <typename Scalar>
EncoderOutput<Scalar> encode(const Encoder<Scalar>& encoder, const Window& window) {
  if (window.values.rows() != encoder.config.in_channels || window.values.cols() != encoder.config.width)
    throw DimensionError("window " + shape_str(window.values.rows(), window.values.cols()) +
                         " does not match encoder input " +
                         shape_str(encoder.config.in_channels, encoder.config.width));
  auto out = encoder.forward(window.values.template cast<Scalar>(), 1);
  return {out.z.col(0), out.spatial.col(0)};
}

/// phi embeds latent states, psi embeds spatial states; both affine.
template <typename Scalar>
struct CriticHeads {
  Linear<Scalar> phi;
  Linear<Scalar> psi;

  CriticHeads() = default;
  explicit CriticHeads(const EncoderConfig& cfg)
      : phi("critic.phi", cfg.latent_dim, cfg.embed_dim),
        psi("critic.psi", cfg.spatial_dim(), cfg.embed_dim) {}

  void init(Rng& rng) {
    phi.init(rng);
    psi.init(rng);
  }

  template <typename F>
  void for_each_param(F&& f) {
    phi.for_each_param(f);
    psi.for_each_param(f);
  }
  template <typename F>
  void for_each_param(F&& f) const {
    phi.for_each_param(f);
    psi.for_each_param(f);
  }
};

template <typename Scalar>
Vector<Scalar> critic_embed(const Linear<Scalar>& head, const Vector<Scalar>& input) {
  if (input.size() != head.in_features())
    throw DimensionError(head.weight.name + ": expected input dim " +
                         std::to_string(head.in_features()) + ", got " + std::to_string(input.size()));
  return head.forward(Matrix<Scalar>(input)).col(0);
}

struct ClassifierConfig {
  Index input_dim = 256;
  Index hidden = 200;       // per direction
  Index head_hidden = 200;
  Index n_classes = 2;
};

inline void to_json(nlohmann::json& j, const ClassifierConfig& c) {
  j = {{"input_dim", c.input_dim}, {"hidden", c.hidden}, {"head_hidden", c.head_hidden},
       {"n_classes", c.n_classes}};
}
inline void from_json(const nlohmann::json& j, ClassifierConfig& c) {
  c.input_dim = j.value("input_dim", c.input_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.n_classes = j.value("n_classes", c.n_classes);
}

/// biLSTM over a latent sequence; the two final hidden states are concatenated
/// and mapped through affine -> ReLU -> affine to class logits.
template <typename Scalar>
struct SequenceClassifier {
  ClassifierConfig config;
  Lstm<Scalar> forward_lstm;
  Lstm<Scalar> backward_lstm;
  Linear<Scalar> head1;
  Linear<Scalar> head2;

  struct Cache {
    Index batch = 0;
    typename Lstm<Scalar>::Cache fwd, bwd;
    Matrix<Scalar> joined;
    Matrix<Scalar> hidden;
  };

  SequenceClassifier() = default;
  explicit SequenceClassifier(ClassifierConfig cfg)
      : config(cfg),
        forward_lstm("classifier.lstm_fwd", cfg.input_dim, cfg.hidden),
        backward_lstm("classifier.lstm_bwd", cfg.input_dim, cfg.hidden),
        head1("classifier.head1", 2 * cfg.hidden, cfg.head_hidden),
        head2("classifier.head2", cfg.head_hidden, cfg.n_classes) {}

  void init(Rng& rng) {
    forward_lstm.init(rng);
    backward_lstm.init(rng);
    head1.init(rng);
    head2.init(rng);
  }

  /// `z` is (input_dim, steps*B), step t of all B sequences at columns [t*B, (t+1)*B).
  Matrix<Scalar> forward(const Matrix<Scalar>& z, Index batch, Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    c.batch = batch;
    const Matrix<Scalar> hf = forward_lstm.forward(z, batch, false, cache ? &c.fwd : nullptr);
    const Matrix<Scalar> hb = backward_lstm.forward(z, batch, true, cache ? &c.bwd : nullptr);
    c.joined.resize(2 * config.hidden, batch);
    c.joined.topRows(config.hidden) = hf;
    c.joined.bottomRows(config.hidden) = hb;
    c.hidden = relu<Scalar>(head1.forward(c.joined));
    return head2.forward(c.hidden);
  }

  Matrix<Scalar> backward(const Matrix<Scalar>& z, const Cache& c, const Matrix<Scalar>& dlogits,
                          bool need_dz) {
    Matrix<Scalar> dh = head2.backward(c.hidden, dlogits);
    relu_backward_inplace<Scalar>(c.hidden, dh);
    const Matrix<Scalar> dj = head1.backward(c.joined, dh);
    Matrix<Scalar> dz1 = forward_lstm.backward(z, c.fwd, dj.topRows(config.hidden), need_dz);
    Matrix<Scalar> dz2 = backward_lstm.backward(z, c.bwd, dj.bottomRows(config.hidden), need_dz);
    if (!need_dz) return {};
    return dz1 + dz2;
  }

  template <typename F>
  void for_each_param(F&& f) {
    forward_lstm.for_each_param(f);
    backward_lstm.for_each_param(f);
    head1.for_each_param(f);
    head2.for_each_param(f);
  }
  template <typename F>
  void for_each_param(F&& f) const {
    forward_lstm.for_each_param(f);
    backward_lstm.for_each_param(f);
    head1.for_each_param(f);
    head2.for_each_param(f);
  }
};

/// `z_sequence` is (input_dim, steps), one latent state per column in time order.
template <typename Scalar>
Vector<Scalar> classify_sequence(const SequenceClassifier<Scalar>& clf, const Matrix<Scalar>& z_sequence) {
  if (z_sequence.cols() < 1) throw EmptySequenceError("cannot classify an empty sequence");
  if (z_sequence.rows() != clf.config.input_dim)
    throw DimensionError("latent dim " + std::to_string(z_sequence.rows()) + " != classifier input " +
                         std::to_string(clf.config.input_dim));
  return clf.forward(z_sequence, 1).col(0);
}

// ---------------------------------------------------------------------------
// Checkpoints: named-tensor container with configs echoed in the metadata.

using Checkpoint = TensorFile;

template <typename Scalar>
constexpr DType checkpoint_dtype() {
  return std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
}

template <typename Scalar, typename Module>
void append_params(Checkpoint& ckpt, const Module& m) {
  m.for_each_param([&](const Param<Scalar>& p) {
    ckpt.add(make_tensor(p.name, p.value, checkpoint_dtype<Scalar>()));
  });
}

template <typename Scalar>
Checkpoint make_checkpoint(const Encoder<Scalar>& encoder, const CriticHeads<Scalar>* heads,
                           const SequenceClassifier<Scalar>* classifier) {
  Checkpoint ckpt;
  ckpt.metadata["encoder_config"] = encoder.config;
  append_params<Scalar>(ckpt, encoder);
  if (heads) append_params<Scalar>(ckpt, *heads);
  if (classifier) {
    ckpt.metadata["classifier_config"] = classifier->config;
    append_params<Scalar>(ckpt, *classifier);
  }
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_tensor_file(path, ckpt);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Checkpoint ckpt = read_tensor_file(path);
  if (!ckpt.metadata.contains("encoder_config"))
    throw FormatError("'" + path.string() + "' is not a model checkpoint (no encoder_config)");
  return ckpt;
}

inline EncoderConfig checkpoint_encoder_config(const Checkpoint& ckpt) {
  return ckpt.metadata.at("encoder_config").get<EncoderConfig>();
}

/// Copies every tensor under `prefix` into `module`. Tensors under the prefix
/// with no matching parameter raise UnknownTensorError; shape mismatches raise
/// DimensionError naming the tensor. Nothing is modified unless all checks pass.
template <typename Scalar, typename Module>
void restore_params(const Checkpoint& ckpt, Module& module, const std::string& prefix) {
  std::vector<std::pair<Param<Scalar>*, const NamedTensor*>> plan;
  module.for_each_param([&](Param<Scalar>& p) {
    const NamedTensor* t = ckpt.find(p.name);
    if (t == nullptr) throw SchemaError("checkpoint is missing tensor '" + p.name + "'");
    if (t->shape.size() != 2 || t->shape[0] != p.value.rows() || t->shape[1] != p.value.cols())
      throw DimensionError("tensor '" + p.name + "' has shape " +
                           (t->shape.size() == 2 ? shape_str(t->shape[0], t->shape[1]) : std::string("?")) +
                           ", model expects " + shape_str(p.value.rows(), p.value.cols()));
    plan.emplace_back(&p, t);
  });
  for (const auto& t : ckpt.tensors) {
    if (t.name.rfind(prefix, 0) != 0) continue;
    const bool known = std::any_of(plan.begin(), plan.end(), [&](const auto& e) { return e.second == &t; });
    if (!known) throw UnknownTensorError("checkpoint tensor '" + t.name + "' has no matching parameter");
  }
  for (auto& [p, t] : plan) p->value = tensor_to_matrix<Scalar>(*t);
}

}  // namespace stdim
