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

// InfoNCE with separable critics: the latent-to-spatial pairing
// f_LS(t, s) = phi(z_t) . psi(c_s) and the spatial-to-spatial pairing
// f_SS(t, s) = psi(c_t) . psi(c_s), summed into one loss.

#include <cmath>
#include <string>

#include "stdim/datapipe.hpp"
#include "stdim/model.hpp"
#include "stdim/types.hpp"

namespace stdim {

template <typename Scalar>
void check_score_matrix(const Matrix<Scalar>& scores) {
  if (scores.rows() != scores.cols())
    throw DimensionError("score matrix must be square, got " + shape_str(scores.rows(), scores.cols()));
  if (scores.rows() < 2) throw DimensionError("score matrix needs at least 2 candidates");
  if (!scores.allFinite()) throw NumericError("score matrix has non-finite entries");
}

/// Mean over rows of -(s_ii - logsumexp_j s_ij). The positive sits on the
/// diagonal and is part of the normalizer. When `grad` is given it receives
/// dL/ds = (softmax(s) - I) / B.
template <typename Scalar>
Scalar infonce_loss(const Matrix<Scalar>& scores, Matrix<Scalar>* grad = nullptr) {
  check_score_matrix(scores);
  const Index b = scores.rows();
  if (grad) grad->resize(b, b);
  Scalar total = 0;
  for (Index i = 0; i < b; ++i) {
    const Scalar m = scores.row(i).maxCoeff();
    const auto shifted = (scores.row(i).array() - m).exp();
    const Scalar z = shifted.sum();
    total += m + std::log(z) - scores(i, i);
    if (grad) {
      grad->row(i) = shifted / (z * static_cast<Scalar>(b));
      (*grad)(i, i) -= Scalar(1) / static_cast<Scalar>(b);
    }
  }
  return total / static_cast<Scalar>(b);
}

/// Fraction of rows whose diagonal entry strictly exceeds every other entry.
template <typename Scalar>
double contrastive_accuracy(const Matrix<Scalar>& scores) {
  if (scores.rows() != scores.cols() || scores.rows() < 2)
    throw DimensionError("contrastive accuracy needs a square score matrix with B >= 2");
  Index hits = 0;
  for (Index i = 0; i < scores.rows(); ++i) {
    bool best = true;
    for (Index j = 0; j < scores.cols() && best; ++j)
      if (j != i && !(scores(i, i) > scores(i, j))) best = false;
    hits += best ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(scores.rows());
}

template <typename Scalar>
struct StdimScores {
  Matrix<Scalar> ls;
  Matrix<Scalar> ss;
};

template <typename Scalar>
struct StdimLossValue {
  Scalar total = 0;
  Scalar ls_term = 0;
  Scalar ss_term = 0;
};

/// Intermediate state of one ST-DIM evaluation, kept for the backward pass.
template <typename Scalar>
struct StdimPass {
  Index batch = 0;
  typename Encoder<Scalar>::Cache cache;
  EncoderBatch<Scalar> enc;        // columns [0,B) anchors, [B,2B) positives
  Matrix<Scalar> latent_embed;     // phi(z) of anchors, (E, B)
  Matrix<Scalar> spatial_embed;    // psi(c) of anchors and positives, (E, 2B)
  StdimScores<Scalar> scores;
};

/// `windows` is (C, W*2B): B anchors followed by their B positives.
template <typename Scalar>
StdimPass<Scalar> stdim_forward(const Encoder<Scalar>& encoder, const CriticHeads<Scalar>& heads,
                                const Matrix<Scalar>& windows, Index batch, bool keep_cache) {
  StdimPass<Scalar> p;
  p.batch = batch;
  p.enc = encoder.forward(windows, 2 * batch, keep_cache ? &p.cache : nullptr);
  p.latent_embed = heads.phi.forward(p.enc.z.leftCols(batch));
  p.spatial_embed = heads.psi.forward(p.enc.spatial);
  const auto anchors_s = p.spatial_embed.leftCols(batch);
  const auto positives_s = p.spatial_embed.rightCols(batch);
  p.scores.ls = p.latent_embed.transpose() * positives_s;
  p.scores.ss = anchors_s.transpose() * positives_s;
  return p;
}

template <typename Scalar>
Matrix<Scalar> batch_windows(const ContrastiveBatch& batch) {
  std::vector<Window> all = batch.anchors;
  all.insert(all.end(), batch.positives.begin(), batch.positives.end());
  return stack_windows<Scalar>(all);
}

template <typename Scalar>
StdimScores<Scalar> stdim_scores(const ContrastiveBatch& batch, const Encoder<Scalar>& encoder,
                                 const CriticHeads<Scalar>& heads) {
  if (batch.anchors.size() != batch.positives.size() || batch.size() < 2)
    throw DimensionError("contrastive batch needs B >= 2 matched anchor/positive pairs");
  return stdim_forward(encoder, heads, batch_windows<Scalar>(batch), batch.size(), false).scores;
}

template <typename Scalar>
StdimLossValue<Scalar> stdim_loss(const ContrastiveBatch& batch, const Encoder<Scalar>& encoder,
                                  const CriticHeads<Scalar>& heads) {
  const auto s = stdim_scores(batch, encoder, heads);
  StdimLossValue<Scalar> v;
  v.ls_term = infonce_loss(s.ls);
  v.ss_term = infonce_loss(s.ss);
  v.total = v.ls_term + v.ss_term;
  return v;
}

/// Loss plus gradient accumulation into encoder and head parameters.
/// With `encoder_grads` false the encoder backward pass is skipped.
template <typename Scalar>
StdimLossValue<Scalar> stdim_loss_backward(Encoder<Scalar>& encoder, CriticHeads<Scalar>& heads,
                                           const Matrix<Scalar>& windows, Index batch,
                                           StdimScores<Scalar>* scores_out = nullptr,
                                           bool encoder_grads = true) {
  auto p = stdim_forward(encoder, heads, windows, batch, true);
  Matrix<Scalar> dls, dss;
  StdimLossValue<Scalar> v;
  v.ls_term = infonce_loss(p.scores.ls, &dls);
  v.ss_term = infonce_loss(p.scores.ss, &dss);
  v.total = v.ls_term + v.ss_term;

  const auto sa = p.spatial_embed.leftCols(batch);
  const auto sp = p.spatial_embed.rightCols(batch);
  Matrix<Scalar> dlatent_embed = sp * dls.transpose();
  Matrix<Scalar> dspatial_embed(p.spatial_embed.rows(), 2 * batch);
  dspatial_embed.leftCols(batch) = sp * dss.transpose();
  dspatial_embed.rightCols(batch) = p.latent_embed * dls + sa * dss;

  const Matrix<Scalar> dspatial = heads.psi.backward(p.enc.spatial, dspatial_embed, encoder_grads);
  const Matrix<Scalar> za = p.enc.z.leftCols(batch);
  const Matrix<Scalar> dza = heads.phi.backward(za, dlatent_embed, encoder_grads);
  if (encoder_grads) {
    Matrix<Scalar> dz = Matrix<Scalar>::Zero(p.enc.z.rows(), 2 * batch);
    dz.leftCols(batch) = dza;
    encoder.backward(p.cache, dz, dspatial);
  }
  if (scores_out) *scores_out = std::move(p.scores);
  return v;
}

}  // namespace stdim
