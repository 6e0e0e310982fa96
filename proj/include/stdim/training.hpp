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

// Self-supervised pre-training, downstream sequence classification in the
// NPT / FPT / UFPT regimes, the single-window supervised baseline, and
// finite-difference gradient checking.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stdim/datapipe.hpp"
#include "stdim/metrics.hpp"
#include "stdim/model.hpp"
#include "stdim/objective.hpp"
#include "stdim/optim.hpp"
#include "stdim/random.hpp"
#include "stdim/simgen.hpp"
#include "stdim/types.hpp"

namespace stdim {

struct Hyperparams {
  double learning_rate = 3e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Index batch_size = 64;
  Index max_epochs = 100;
  Index patience = 10;
  std::uint64_t seed = 0;

  static Hyperparams pretrain_defaults() { return {}; }
  static Hyperparams downstream_defaults() {
    Hyperparams h;
    h.batch_size = 16;
    return h;
  }

  AdamConfig adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_eps}; }

  void validate() const {
    if (!(learning_rate > 0) || !(adam_beta1 > 0 && adam_beta1 < 1) ||
        !(adam_beta2 > 0 && adam_beta2 < 1) || !(adam_eps > 0))
      throw ConfigError("learning rate, Adam moments and eps must be positive (betas below 1)");
    if (batch_size < 1 || max_epochs < 1 || patience < 1)
      throw ConfigError("batch_size, max_epochs and patience must be >= 1");
    if (patience > max_epochs) throw ConfigError("patience must not exceed max_epochs");
  }
};

inline void to_json(nlohmann::json& j, const Hyperparams& h) {
  j = {{"learning_rate", h.learning_rate}, {"adam_beta1", h.adam_beta1}, {"adam_beta2", h.adam_beta2},
       {"adam_eps", h.adam_eps},           {"batch_size", h.batch_size}, {"max_epochs", h.max_epochs},
       {"patience", h.patience},           {"seed", h.seed}};
}
inline void from_json(const nlohmann::json& j, Hyperparams& h) {
  h.learning_rate = j.value("learning_rate", h.learning_rate);
  h.adam_beta1 = j.value("adam_beta1", h.adam_beta1);
  h.adam_beta2 = j.value("adam_beta2", h.adam_beta2);
  h.adam_eps = j.value("adam_eps", h.adam_eps);
  h.batch_size = j.value("batch_size", h.batch_size);
  h.max_epochs = j.value("max_epochs", h.max_epochs);
  h.patience = j.value("patience", h.patience);
  h.seed = j.value("seed", h.seed);
}

enum class TrainMode { NPT, FPT, UFPT };

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::NPT: return "NPT";
    case TrainMode::FPT: return "FPT";
    case TrainMode::UFPT: return "UFPT";
  }
  return "?";
}

inline TrainMode parse_mode(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (s == "NPT") return TrainMode::NPT;
  if (s == "FPT") return TrainMode::FPT;
  if (s == "UFPT") return TrainMode::UFPT;
  throw ConfigError("unknown training mode '" + s + "'");
}

struct EpochRecord {
  Index epoch = 0;
  double train_loss = 0;
  double val_metric = 0;
  double wall_seconds = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  Index best_epoch = -1;  // index into `epochs`

  // Equality of everything except wall-clock.
  bool same_values(const TrainHistory& o) const {
    if (best_epoch != o.best_epoch || epochs.size() != o.epochs.size()) return false;
    for (std::size_t i = 0; i < epochs.size(); ++i)
      if (epochs[i].epoch != o.epochs[i].epoch || epochs[i].train_loss != o.epochs[i].train_loss ||
          epochs[i].val_metric != o.epochs[i].val_metric)
        return false;
    return true;
  }

  void write_jsonl(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    for (const auto& e : epochs)
      out << nlohmann::json{{"epoch", e.epoch},
                            {"train_loss", e.train_loss},
                            {"val_metric", e.val_metric},
                            {"wall_seconds", e.wall_seconds},
                            {"best", static_cast<Index>(&e - epochs.data()) == best_epoch}}
                 .dump()
          << '\n';
  }
};

using EpochCallback = std::function<void(const EpochRecord&)>;

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  // Explicit Fisher-Yates so the permutation does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

/// (C, W*2B) matrix: B anchors then their B successors.
template <typename Scalar>
Matrix<Scalar> gather_pairs(std::span<const MatrixD> corpus, std::span<const AnchorRef> refs, Index width) {
  const Index b = static_cast<Index>(refs.size());
  const Index ch = corpus.front().rows();
  Matrix<Scalar> x(ch, 2 * b * width);
  for (Index i = 0; i < b; ++i) {
    const auto& r = refs[static_cast<std::size_t>(i)];
    const auto& s = corpus[static_cast<std::size_t>(r.series)];
    x.middleCols(i * width, width) = s.middleCols(r.start, width).template cast<Scalar>();
    x.middleCols((b + i) * width, width) = s.middleCols(r.start + width, width).template cast<Scalar>();
  }
  return x;
}

template <typename Scalar>
void check_finite_loss(Scalar loss, Index epoch, Index step) {
  if (!std::isfinite(static_cast<double>(loss)))
    throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch + 1) +
                       ", step " + std::to_string(step));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Contrastive evaluation and pre-training

struct ContrastiveEval {
  double ls_accuracy = 0;  // latent -> next spatial critic
  double ss_accuracy = 0;  // spatial -> next spatial critic
  double loss = 0;
  Index batches = 0;

  double accuracy() const { return ls_accuracy; }
};

/// Accuracy of picking the true successor among `batch_size` candidates,
/// averaged over full batches drawn (without replacement within a round)
/// from all anchor positions. Fully determined by `seed`.
template <typename Scalar>
ContrastiveEval evaluate_contrastive(const Encoder<Scalar>& encoder, const CriticHeads<Scalar>& heads,
                                     std::span<const MatrixD> series, Index batch_size, std::uint64_t seed,
                                     Index rounds = 4) {
  auto refs = enumerate_anchors(series, encoder.config.width);
  if (static_cast<Index>(refs.size()) < 2) throw EmptySequenceError("evaluation corpus hosts fewer than 2 anchors");
  const Index b = std::min<Index>(batch_size, static_cast<Index>(refs.size()));
  ContrastiveEval ev;
  for (Index r = 0; r < rounds; ++r) {
    Rng rng = make_rng(seed, "contrastive-eval", {static_cast<std::uint64_t>(r)});
    detail::shuffle_in_place(refs, rng);
    for (Index start = 0; start + b <= static_cast<Index>(refs.size()); start += b) {
      const auto chunk = std::span<const AnchorRef>(refs).subspan(static_cast<std::size_t>(start),
                                                                  static_cast<std::size_t>(b));
      const auto pass = stdim_forward(encoder, heads, detail::gather_pairs<Scalar>(series, chunk, encoder.config.width),
                                      b, false);
      ev.ls_accuracy += contrastive_accuracy(pass.scores.ls);
      ev.ss_accuracy += contrastive_accuracy(pass.scores.ss);
      ev.loss += static_cast<double>(infonce_loss(pass.scores.ls) + infonce_loss(pass.scores.ss));
      ++ev.batches;
    }
  }
  ev.ls_accuracy /= static_cast<double>(ev.batches);
  ev.ss_accuracy /= static_cast<double>(ev.batches);
  ev.loss /= static_cast<double>(ev.batches);
  return ev;
}

struct PretrainOptions {
  Index anchor_stride = 1;  // offset step between candidate training anchors
  Index eval_batch_size = 32;
  Index eval_rounds = 4;
  EpochCallback on_epoch;
};

template <typename Scalar>
struct PretrainResult {
  Encoder<Scalar> encoder;
  CriticHeads<Scalar> heads;
  TrainHistory history;

  Checkpoint checkpoint() const { return make_checkpoint<Scalar>(encoder, &heads, nullptr); }
};

/// Minimizes the summed InfoNCE loss with Adam over shuffled consecutive-window
/// pairs. Early-stops on validation contrastive accuracy and returns the
/// parameters of the best validation epoch.
template <typename Scalar>
PretrainResult<Scalar> pretrain(const EncoderConfig& cfg, std::span<const MatrixD> train,
                                std::span<const MatrixD> val, const Hyperparams& hp,
                                const PretrainOptions& opts = {}) {
  hp.validate();
  if (hp.batch_size < 2) throw ConfigError("pre-training batch size must be >= 2");
  if (train.empty() || val.empty()) throw ConfigError("pre-training needs train and val series");
  auto refs = enumerate_anchors(train, cfg.width, opts.anchor_stride);
  if (static_cast<Index>(refs.size()) < 2) throw EmptySequenceError("training corpus hosts fewer than 2 anchors");

  Encoder<Scalar> encoder(cfg);
  CriticHeads<Scalar> heads(cfg);
  Rng init_rng = make_rng(hp.seed, "init/encoder");
  encoder.init(init_rng);
  Rng head_rng = make_rng(hp.seed, "init/critic");
  heads.init(head_rng);

  std::vector<Param<Scalar>*> params;
  collect_params<Scalar>(encoder, params);
  collect_params<Scalar>(heads, params);
  Adam<Scalar> adam(params, hp.adam());

  PretrainResult<Scalar> best{encoder, heads, {}};
  double best_metric = -1;
  Index since_best = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (Index epoch = 0; epoch < hp.max_epochs; ++epoch) {
    Rng rng = make_rng(hp.seed, "pretrain/shuffle", {static_cast<std::uint64_t>(epoch)});
    detail::shuffle_in_place(refs, rng);
    double loss_sum = 0;
    Index steps = 0;
    for (std::size_t start = 0; start + 2 <= refs.size(); start += static_cast<std::size_t>(hp.batch_size)) {
      const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(hp.batch_size), refs.size() - start);
      if (n < 2) break;
      const auto chunk = std::span<const AnchorRef>(refs).subspan(start, n);
      adam.zero_grad();
      const auto v = stdim_loss_backward(encoder, heads, detail::gather_pairs<Scalar>(train, chunk, cfg.width),
                                         static_cast<Index>(n));
      detail::check_finite_loss(v.total, epoch, steps);
      adam.step();
      loss_sum += static_cast<double>(v.total);
      ++steps;
    }
    const auto ev = evaluate_contrastive(encoder, heads, val, opts.eval_batch_size,
                                         derive_seed(hp.seed, "pretrain/val"), opts.eval_rounds);
    EpochRecord rec{epoch + 1, loss_sum / static_cast<double>(steps), ev.accuracy(), detail::seconds_since(t0)};
    best.history.epochs.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);
    if (rec.val_metric > best_metric) {
      best_metric = rec.val_metric;
      best.encoder = encoder;
      best.heads = heads;
      best.history.best_epoch = static_cast<Index>(best.history.epochs.size()) - 1;
      since_best = 0;
    } else if (++since_best >= hp.patience) {
      break;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Downstream sequence classification

struct LabeledSeries {
  std::string id;
  int label = 0;
  MatrixD values;  // channels x time, already normalized
};

struct DownstreamData {
  std::vector<LabeledSeries> train, val, test;
};

inline std::vector<LabeledSeries> to_labeled(const std::vector<SimSeries>& split) {
  std::vector<LabeledSeries> out;
  out.reserve(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto& s = split[i];
    out.push_back({"g" + std::to_string(s.graph_id) + "_s" + std::to_string(s.seed), static_cast<int>(s.label),
                   zscore_normalize(s.values)});
  }
  return out;
}

inline std::vector<LabeledSeries> to_labeled(const std::vector<SubjectRecord>& subjects) {
  std::vector<LabeledSeries> out;
  out.reserve(subjects.size());
  for (const auto& s : subjects) out.push_back({s.id, s.label, zscore_normalize(s.values)});
  return out;
}

inline std::vector<MatrixD> normalized_values(const std::vector<SimSeries>& split) {
  std::vector<MatrixD> out;
  out.reserve(split.size());
  for (const auto& s : split) out.push_back(zscore_normalize(s.values));
  return out;
}

enum class StopMetric { accuracy, auc };

inline const char* metric_name(StopMetric m) { return m == StopMetric::accuracy ? "accuracy" : "auc"; }

inline StopMetric parse_metric(const std::string& s) {
  if (s == "accuracy") return StopMetric::accuracy;
  if (s == "auc") return StopMetric::auc;
  throw ConfigError("unknown metric '" + s + "' (expected accuracy or auc)");
}

struct DownstreamOptions {
  Index window_hop = 0;  // 0 = EncoderConfig::default_hop()
  StopMetric stop_metric = StopMetric::accuracy;
  Index eval_chunk = 32;
  EpochCallback on_epoch;
};

struct EvalMetrics {
  double accuracy = 0;
  double auc = std::numeric_limits<double>::quiet_NaN();  // NaN when only one class is present
  double loss = 0;
  std::vector<double> scores;  // P(class 1)
  std::vector<int> predictions;

  double metric(StopMetric m) const { return m == StopMetric::accuracy ? accuracy : auc; }
};

namespace detail {

/// Windows of one series stacked side by side, (C, W*n).
template <typename Scalar>
struct WindowedSeries {
  Matrix<Scalar> stack;
  Index count = 0;
  int label = 0;
};

template <typename Scalar>
std::vector<WindowedSeries<Scalar>> window_all(const std::vector<LabeledSeries>& set, Index width, Index hop) {
  std::vector<WindowedSeries<Scalar>> out;
  out.reserve(set.size());
  for (const auto& s : set) {
    const auto seq = slide_windows(s.values, width, hop);
    out.push_back({stack_windows<Scalar>(seq.windows), static_cast<Index>(seq.windows.size()), s.label});
  }
  return out;
}

/// Interleaves the windows of equally long series so step t of series s sits
/// at batch position t*S + s.
template <typename Scalar>
Matrix<Scalar> interleave(const std::vector<const Matrix<Scalar>*>& items, Index block, Index steps) {
  const Index s_count = static_cast<Index>(items.size());
  const Index rows = items.front()->rows();
  Matrix<Scalar> x(rows, block * steps * s_count);
  for (Index t = 0; t < steps; ++t)
    for (Index s = 0; s < s_count; ++s)
      x.middleCols((t * s_count + s) * block, block) = items[static_cast<std::size_t>(s)]->middleCols(t * block, block);
  return x;
}

template <typename Scalar>
std::map<Index, std::vector<std::size_t>> group_by_length(const std::vector<WindowedSeries<Scalar>>& set,
                                                          std::span<const std::size_t> idx) {
  std::map<Index, std::vector<std::size_t>> groups;
  for (auto i : idx) groups[set[i].count].push_back(i);
  return groups;
}

/// Softmax cross-entropy over columns. Adds (p - onehot) * scale to `dlogits`
/// and returns the summed loss.
template <typename Scalar>
double cross_entropy(const Matrix<Scalar>& logits, std::span<const int> labels, Matrix<Scalar>* dlogits,
                     Scalar scale, std::vector<double>* p1 = nullptr) {
  double loss = 0;
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  for (Index c = 0; c < logits.cols(); ++c) {
    const Scalar m = logits.col(c).maxCoeff();
    const Vector<Scalar> e = (logits.col(c).array() - m).exp().matrix();
    const Scalar z = e.sum();
    const int y = labels[static_cast<std::size_t>(c)];
    loss += static_cast<double>(m + std::log(z) - logits(y, c));
    if (dlogits) {
      dlogits->col(c) = e / z * scale;
      (*dlogits)(y, c) -= scale;
    }
    if (p1) p1->push_back(static_cast<double>(e(1) / z));
  }
  return loss;
}

inline EvalMetrics finish_metrics(std::vector<double> scores, const std::vector<int>& labels, double loss_sum) {
  EvalMetrics m;
  m.predictions.reserve(scores.size());
  for (double p : scores) m.predictions.push_back(p > 0.5 ? 1 : 0);
  m.accuracy = compute_accuracy(m.predictions, labels);
  const bool both = std::find(labels.begin(), labels.end(), 0) != labels.end() &&
                    std::find(labels.begin(), labels.end(), 1) != labels.end();
  if (both) m.auc = compute_auc(scores, labels);
  m.loss = loss_sum / static_cast<double>(labels.size());
  m.scores = std::move(scores);
  return m;
}

}  // namespace detail

template <typename Scalar>
struct DownstreamResult {
  Encoder<Scalar> encoder;
  SequenceClassifier<Scalar> classifier;
  TrainHistory history;
  EvalMetrics val;   // at the best epoch
  EvalMetrics test;  // of the best-epoch parameters

  Checkpoint checkpoint() const { return make_checkpoint<Scalar>(encoder, nullptr, &classifier); }
};

/// Encoder + biLSTM classifier trained with softmax cross-entropy.
///   NPT:  encoder starts from Xavier init (`init` must be null)
///   FPT:  encoder restored from `init` and never updated
///   UFPT: encoder restored from `init` and fine-tuned
/// `npt_encoder` is only used in NPT mode; the other modes take the encoder
/// configuration from the checkpoint.
template <typename Scalar>
class DownstreamTrainer {
 public:
  DownstreamTrainer(TrainMode mode, const Checkpoint* init, const EncoderConfig& npt_encoder,
                    ClassifierConfig clf_cfg, const Hyperparams& hp, DownstreamOptions opts)
      : mode_(mode), hp_(hp), opts_(std::move(opts)) {
    hp_.validate();
    if (mode == TrainMode::NPT && init) throw ConfigError("NPT mode must not be given a pre-trained checkpoint");
    if (mode != TrainMode::NPT && !init)
      throw ConfigError(std::string(mode_name(mode)) + " mode requires a pre-trained checkpoint");
    const EncoderConfig enc_cfg = init ? checkpoint_encoder_config(*init) : npt_encoder;
    encoder_ = Encoder<Scalar>(enc_cfg);
    if (init) {
      restore_params<Scalar>(*init, encoder_, "encoder.");
    } else {
      Rng rng = make_rng(hp.seed, "init/encoder");
      encoder_.init(rng);
    }
    if (clf_cfg.input_dim != enc_cfg.latent_dim)
      throw DimensionError("classifier input_dim " + std::to_string(clf_cfg.input_dim) +
                           " != encoder latent_dim " + std::to_string(enc_cfg.latent_dim));
    classifier_ = SequenceClassifier<Scalar>(clf_cfg);
    Rng rng = make_rng(hp.seed, "init/classifier");
    classifier_.init(rng);
    hop_ = opts_.window_hop > 0 ? opts_.window_hop : enc_cfg.default_hop();
  }

  Encoder<Scalar>& encoder() { return encoder_; }
  SequenceClassifier<Scalar>& classifier() { return classifier_; }
  bool frozen() const { return mode_ == TrainMode::FPT; }

  DownstreamResult<Scalar> run(const DownstreamData& data) {
    if (data.train.empty() || data.val.empty() || data.test.empty())
      throw ConfigError("downstream training needs non-empty train, val and test sets");
    const auto train = windowed(data.train);
    const auto val = windowed(data.val);
    const auto test = windowed(data.test);

    std::vector<Param<Scalar>*> params;
    collect_params<Scalar>(classifier_, params);
    if (!frozen()) collect_params<Scalar>(encoder_, params);
    Adam<Scalar> adam(params, hp_.adam());

    DownstreamResult<Scalar> best{encoder_, classifier_, {}, {}, {}};
    double best_metric = -std::numeric_limits<double>::infinity();
    double best_loss = std::numeric_limits<double>::infinity();
    Index since_best = 0;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto t0 = std::chrono::steady_clock::now();
    for (Index epoch = 0; epoch < hp_.max_epochs; ++epoch) {
      Rng rng = make_rng(hp_.seed, "downstream/shuffle", {static_cast<std::uint64_t>(epoch)});
      detail::shuffle_in_place(order, rng);
      double loss_sum = 0;
      Index steps = 0;
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp_.batch_size)) {
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(hp_.batch_size), order.size() - start);
        adam.zero_grad();
        const double loss = accumulate_batch(train, std::span<const std::size_t>(order).subspan(start, n));
        detail::check_finite_loss(loss, epoch, steps);
        adam.step();
        loss_sum += loss;
        ++steps;
      }
      const EvalMetrics v = evaluate_windowed(val);
      double metric = v.metric(opts_.stop_metric);
      if (std::isnan(metric)) metric = v.accuracy;
      EpochRecord rec{epoch + 1, loss_sum / static_cast<double>(steps), metric, detail::seconds_since(t0)};
      best.history.epochs.push_back(rec);
      if (opts_.on_epoch) opts_.on_epoch(rec);
      if (metric > best_metric || (metric == best_metric && v.loss < best_loss)) {
        best_metric = metric;
        best_loss = v.loss;
        best.encoder = encoder_;
        best.classifier = classifier_;
        best.val = v;
        best.history.best_epoch = static_cast<Index>(best.history.epochs.size()) - 1;
        since_best = 0;
      } else if (++since_best >= hp_.patience) {
        break;
      }
    }
    encoder_ = best.encoder;
    classifier_ = best.classifier;
    cached_latents_.clear();
    best.test = evaluate_windowed(test);
    return best;
  }

  EvalMetrics evaluate(const std::vector<LabeledSeries>& set) {
    const auto w = windowed(set);
    EvalMetrics m = evaluate_windowed(w);
    cached_latents_.clear();
    return m;
  }

  /// Gradient of the mean cross-entropy over `idx`, accumulated into the
  /// parameter grads (encoder grads untouched when frozen). Returns the loss.
  double accumulate_batch(const std::vector<detail::WindowedSeries<Scalar>>& set,
                          std::span<const std::size_t> idx) {
    const auto scale = Scalar(1) / static_cast<Scalar>(idx.size());
    double loss = 0;
    for (const auto& [steps, members] : detail::group_by_length(set, idx)) {
      const Index s_count = static_cast<Index>(members.size());
      std::vector<int> labels;
      for (auto i : members) labels.push_back(set[i].label);
      Matrix<Scalar> dlogits;
      if (frozen()) {
        const Matrix<Scalar> z = latents(set, members, steps);
        typename SequenceClassifier<Scalar>::Cache cc;
        const Matrix<Scalar> logits = classifier_.forward(z, s_count, &cc);
        loss += detail::cross_entropy<Scalar>(logits, labels, &dlogits, scale);
        classifier_.backward(z, cc, dlogits, false);
      } else {
        typename Encoder<Scalar>::Cache ec;
        const Matrix<Scalar> x = gather_windows(set, members, steps);
        const auto enc = encoder_.forward(x, steps * s_count, &ec);
        typename SequenceClassifier<Scalar>::Cache cc;
        const Matrix<Scalar> logits = classifier_.forward(enc.z, s_count, &cc);
        loss += detail::cross_entropy<Scalar>(logits, labels, &dlogits, scale);
        const Matrix<Scalar> dz = classifier_.backward(enc.z, cc, dlogits, true);
        encoder_.backward(ec, dz, Matrix<Scalar>());
      }
    }
    return loss / static_cast<double>(idx.size());
  }

  std::vector<detail::WindowedSeries<Scalar>> windowed(const std::vector<LabeledSeries>& set) const {
    return detail::window_all<Scalar>(set, encoder_.config.width, hop_);
  }

 private:
  Matrix<Scalar> gather_windows(const std::vector<detail::WindowedSeries<Scalar>>& set,
                                const std::vector<std::size_t>& members, Index steps) const {
    std::vector<const Matrix<Scalar>*> items;
    for (auto i : members) items.push_back(&set[i].stack);
    return detail::interleave<Scalar>(items, encoder_.config.width, steps);
  }

  // Frozen encoder: latent sequences are computed once per series and reused.
  Matrix<Scalar> latents(const std::vector<detail::WindowedSeries<Scalar>>& set,
                         const std::vector<std::size_t>& members, Index steps) {
    std::vector<const Matrix<Scalar>*> items;
    for (auto i : members) {
      const auto* key = &set[i];
      auto it = cached_latents_.find(key);
      if (it == cached_latents_.end())
        it = cached_latents_.emplace(key, encoder_.forward(set[i].stack, set[i].count).z).first;
      items.push_back(&it->second);
    }
    return detail::interleave<Scalar>(items, 1, steps);
  }

  EvalMetrics evaluate_windowed(const std::vector<detail::WindowedSeries<Scalar>>& set) {
    std::vector<std::size_t> all(set.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::vector<double> scores(set.size());
    std::vector<int> labels(set.size());
    double loss = 0;
    const std::size_t chunk = static_cast<std::size_t>(std::max<Index>(1, opts_.eval_chunk));
    for (std::size_t start = 0; start < all.size(); start += chunk) {
      const auto idx = std::span<const std::size_t>(all).subspan(start, std::min(chunk, all.size() - start));
      for (const auto& [steps, members] : detail::group_by_length(set, idx)) {
        const Index s_count = static_cast<Index>(members.size());
        Matrix<Scalar> z = frozen() ? latents(set, members, steps)
                                    : encoder_.forward(gather_windows(set, members, steps), steps * s_count).z;
        const Matrix<Scalar> logits = classifier_.forward(z, s_count);
        std::vector<int> lab;
        for (auto i : members) lab.push_back(set[i].label);
        std::vector<double> p1;
        loss += detail::cross_entropy<Scalar>(logits, lab, nullptr, Scalar(1), &p1);
        for (std::size_t k = 0; k < members.size(); ++k) {
          scores[members[k]] = p1[k];
          labels[members[k]] = lab[k];
        }
      }
    }
    return detail::finish_metrics(std::move(scores), labels, loss);
  }

  TrainMode mode_;
  Hyperparams hp_;
  DownstreamOptions opts_;
  Index hop_ = 0;
  Encoder<Scalar> encoder_;
  SequenceClassifier<Scalar> classifier_;
  std::map<const void*, Matrix<Scalar>> cached_latents_;
};

template <typename Scalar>
DownstreamResult<Scalar> train_downstream(TrainMode mode, const Checkpoint* init, const EncoderConfig& npt_encoder,
                                          const DownstreamData& data, const ClassifierConfig& clf_cfg,
                                          const Hyperparams& hp, const DownstreamOptions& opts = {}) {
  DownstreamTrainer<Scalar> trainer(mode, init, npt_encoder, clf_cfg, hp, opts);
  return trainer.run(data);
}

// ---------------------------------------------------------------------------
// Single-window supervised baseline

struct WindowBaselineOptions {
  Index window_hop = 0;  // 0 = EncoderConfig::default_hop()
  bool shuffle_labels = false;  // permute training/validation window labels (control run)
  EpochCallback on_epoch;
};

struct WindowBaselineResult {
  double test_accuracy = 0;
  double val_accuracy = 0;
  Index test_windows = 0;
  TrainHistory history;
};

/// Encoder + affine head classifying single windows; each window inherits the
/// label of its series. Reports window-level test accuracy.
template <typename Scalar>
WindowBaselineResult window_supervised_baseline(const EncoderConfig& cfg, const DownstreamData& data,
                                                const Hyperparams& hp, const WindowBaselineOptions& opts = {}) {
  hp.validate();
  const Index width = cfg.width;
  const Index hop = opts.window_hop > 0 ? opts.window_hop : cfg.default_hop();
  struct Item {
    const MatrixD* series;
    Index start;
    int label;
  };
  auto items_of = [&](const std::vector<LabeledSeries>& set) {
    std::vector<Item> items;
    for (const auto& s : set) {
      const Index n = window_count(s.values.cols(), width, hop);
      if (n == 0) throw EmptySequenceError("series '" + s.id + "' shorter than window width");
      for (Index k = 0; k < n; ++k) items.push_back({&s.values, k * hop, s.label});
    }
    return items;
  };
  auto train = items_of(data.train), val = items_of(data.val), test = items_of(data.test);
  if (train.empty() || val.empty() || test.empty()) throw ConfigError("window baseline needs non-empty splits");
  if (opts.shuffle_labels) {
    for (auto* set : {&train, &val}) {
      std::vector<int> labels;
      for (const auto& it : *set) labels.push_back(it.label);
      Rng rng = make_rng(hp.seed, "window-baseline/label-shuffle", {set == &train ? 0u : 1u});
      detail::shuffle_in_place(labels, rng);
      for (std::size_t i = 0; i < set->size(); ++i) (*set)[i].label = labels[i];
    }
  }

  Encoder<Scalar> encoder(cfg);
  Linear<Scalar> head("window_head", cfg.latent_dim, 2);
  Rng rng_e = make_rng(hp.seed, "init/encoder");
  encoder.init(rng_e);
  Rng rng_h = make_rng(hp.seed, "init/window_head");
  head.init(rng_h);
  std::vector<Param<Scalar>*> params;
  collect_params<Scalar>(encoder, params);
  collect_params<Scalar>(head, params);
  Adam<Scalar> adam(params, hp.adam());

  auto gather = [&](const std::vector<Item>& set, std::span<const std::size_t> idx) {
    Matrix<Scalar> x(cfg.in_channels, width * static_cast<Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& it = set[idx[k]];
      x.middleCols(static_cast<Index>(k) * width, width) = it.series->middleCols(it.start, width).template cast<Scalar>();
    }
    return x;
  };
  auto accuracy_of = [&](const Encoder<Scalar>& enc, const Linear<Scalar>& h, const std::vector<Item>& set) {
    std::vector<std::size_t> all(set.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::vector<int> preds, labels;
    for (std::size_t start = 0; start < all.size(); start += 256) {
      const auto idx = std::span<const std::size_t>(all).subspan(start, std::min<std::size_t>(256, all.size() - start));
      const Matrix<Scalar> logits = h.forward(enc.forward(gather(set, idx), static_cast<Index>(idx.size())).z);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        preds.push_back(logits(1, static_cast<Index>(k)) > logits(0, static_cast<Index>(k)) ? 1 : 0);
        labels.push_back(set[idx[k]].label);
      }
    }
    return compute_accuracy(preds, labels);
  };

  WindowBaselineResult result;
  Encoder<Scalar> best_enc = encoder;
  Linear<Scalar> best_head = head;
  double best_metric = -1;
  Index since_best = 0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto t0 = std::chrono::steady_clock::now();
  for (Index epoch = 0; epoch < hp.max_epochs; ++epoch) {
    Rng rng = make_rng(hp.seed, "window-baseline/shuffle", {static_cast<std::uint64_t>(epoch)});
    detail::shuffle_in_place(order, rng);
    double loss_sum = 0;
    Index steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp.batch_size)) {
      const auto idx = std::span<const std::size_t>(order).subspan(
          start, std::min<std::size_t>(static_cast<std::size_t>(hp.batch_size), order.size() - start));
      adam.zero_grad();
      typename Encoder<Scalar>::Cache ec;
      const auto enc = encoder.forward(gather(train, idx), static_cast<Index>(idx.size()), &ec);
      const Matrix<Scalar> logits = head.forward(enc.z);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train[i].label);
      Matrix<Scalar> dlogits;
      const double loss = detail::cross_entropy<Scalar>(logits, labels, &dlogits,
                                                        Scalar(1) / static_cast<Scalar>(idx.size())) /
                          static_cast<double>(idx.size());
      detail::check_finite_loss(loss, epoch, steps);
      encoder.backward(ec, head.backward(enc.z, dlogits), Matrix<Scalar>());
      adam.step();
      loss_sum += loss;
      ++steps;
    }
    const double val_acc = accuracy_of(encoder, head, val);
    EpochRecord rec{epoch + 1, loss_sum / static_cast<double>(steps), val_acc, detail::seconds_since(t0)};
    result.history.epochs.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);
    if (val_acc > best_metric) {
      best_metric = val_acc;
      best_enc = encoder;
      best_head = head;
      result.history.best_epoch = static_cast<Index>(result.history.epochs.size()) - 1;
      since_best = 0;
    } else if (++since_best >= hp.patience) {
      break;
    }
  }
  result.val_accuracy = best_metric;
  result.test_accuracy = accuracy_of(best_enc, best_head, test);
  result.test_windows = static_cast<Index>(test.size());
  return result;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst_param;
  Index worst_index = -1;
  Index coordinates = 0;
};

/// Compares the gradients already stored in `params[i]->grad` against central
/// differences of `loss`. Per-coordinate error is |a - n| / max(|a|, |n|, floor).
template <typename Scalar>
GradCheckResult gradient_check(const std::function<Scalar()>& loss, const std::vector<Param<Scalar>*>& params,
                               double epsilon = 1e-4, double floor = 1e-6) {
  GradCheckResult r;
  for (auto* p : params) {
    for (Index k = 0; k < p->value.size(); ++k) {
      Scalar& w = p->value.data()[k];
      const Scalar saved = w;
      w = saved + static_cast<Scalar>(epsilon);
      const double up = static_cast<double>(loss());
      w = saved - static_cast<Scalar>(epsilon);
      const double down = static_cast<double>(loss());
      w = saved;
      const double numeric = (up - down) / (2 * epsilon);
      const double analytic = static_cast<double>(p->grad.data()[k]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      const double err = std::abs(analytic - numeric) / denom;
      if (err > r.max_rel_error || r.worst_index < 0) {
        r.max_rel_error = err;
        r.worst_param = p->name;
        r.worst_index = k;
      }
      ++r.coordinates;
    }
  }
  return r;
}

/// 2 channels, width 8, two conv layers; small enough for exhaustive checks.
inline EncoderConfig tiny_encoder_config() {
  return {"tiny", 2, 8, {{4, 3, 1}, {3, 2, 1}}, 6, 2, 5};
}

/// Gradient check of the summed InfoNCE loss w.r.t. every encoder and critic
/// parameter of the tiny configuration, in double precision.
inline GradCheckResult stdim_gradient_check(std::uint64_t seed, Index batch = 4, double epsilon = 1e-4) {
  const EncoderConfig cfg = tiny_encoder_config();
  Encoder<double> encoder(cfg);
  CriticHeads<double> heads(cfg);
  Rng rng = make_rng(seed, "gradcheck/init");
  encoder.init(rng);
  heads.init(rng);
  // Non-zero biases so every parameter path is exercised.
  std::normal_distribution<double> nd(0.0, 0.1);
  encoder.for_each_param([&](Param<double>& p) {
    if (p.name.ends_with(".bias")) p.value = p.value.unaryExpr([&](double) { return nd(rng); });
  });
  heads.for_each_param([&](Param<double>& p) {
    if (p.name.ends_with(".bias")) p.value = p.value.unaryExpr([&](double) { return nd(rng); });
  });
  const MatrixD windows = standard_normal(cfg.in_channels, cfg.width * 2 * batch, rng);

  std::vector<Param<double>*> params;
  collect_params<double>(encoder, params);
  collect_params<double>(heads, params);
  zero_grads(params);
  stdim_loss_backward(encoder, heads, windows, batch);
  auto loss = [&]() {
    const auto p = stdim_forward(encoder, heads, windows, batch, false);
    return infonce_loss(p.scores.ls) + infonce_loss(p.scores.ss);
  };
  return gradient_check<double>(loss, params, epsilon);
}

}  // namespace stdim
