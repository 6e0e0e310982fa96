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

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "stdim/objective.hpp"
#include "stdim/training.hpp"

namespace stdim {
namespace {

MatrixD random_scores(Index b, Rng& rng, double scale = 3.0) { return standard_normal(b, b, rng) * scale; }

TEST(InfoNce, UniformFourIsLogFour) {
  EXPECT_NEAR(infonce_loss(MatrixD(MatrixD::Zero(4, 4))), std::log(4.0), 1e-12);
}

TEST(InfoNce, TwoCandidatesMarginTen) {
  MatrixD s = MatrixD::Zero(2, 2);
  s(0, 0) = s(1, 1) = 10;
  EXPECT_NEAR(infonce_loss(s), std::log1p(std::exp(-10.0)), 1e-12);
}

TEST(InfoNce, MatchesNaiveSoftmaxOracle) {
  Rng rng(1);
  for (int k = 0; k < 50; ++k) {
    const MatrixD s = random_scores(3, rng);
    EXPECT_NEAR(infonce_loss(s), oracle::infonce(s), 1e-10);
  }
}

TEST(InfoNce, RejectsBadInput) {
  EXPECT_THROW(infonce_loss(MatrixD(MatrixD::Zero(2, 3))), DimensionError);
  EXPECT_THROW(infonce_loss(MatrixD(MatrixD::Zero(1, 1))), DimensionError);
  MatrixD s = MatrixD::Zero(2, 2);
  s(0, 1) = NAN;
  EXPECT_THROW(infonce_loss(s), NumericError);
  s(0, 1) = INFINITY;
  EXPECT_THROW(infonce_loss(s), NumericError);
}

TEST(InfoNce, RowShiftInvariance) {
  Rng rng(2);
  const MatrixD s = random_scores(5, rng);
  MatrixD shifted = s;
  for (Index i = 0; i < 5; ++i) shifted.row(i).array() += 17.0 * (i - 2);
  EXPECT_NEAR(infonce_loss(s), infonce_loss(shifted), 1e-9);
}

TEST(InfoNce, DiagonalIncreaseStrictlyDecreasesLoss) {
  Rng rng(3);
  MatrixD s = random_scores(6, rng);
  double prev = infonce_loss(s);
  for (int step = 0; step < 10; ++step) {
    s.diagonal().array() += 0.5;
    const double now = infonce_loss(s);
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(InfoNce, GradientMatchesCentralDifferences) {
  Rng rng(4);
  for (int k = 0; k < 10; ++k) {
    const MatrixD s = random_scores(4, rng);
    MatrixD g;
    infonce_loss(s, &g);
    const MatrixD n = oracle::central_difference([](const MatrixD& x) { return infonce_loss(x); }, s, 1e-4);
    EXPECT_LT(oracle::max_relative_error(g, n), 1e-5);
  }
}

TEST(ContrastiveAccuracy, DiagonallyDominantIsOne) {
  MatrixD s = MatrixD::Constant(5, 5, 0.1);
  s.diagonal().setConstant(1.0);
  EXPECT_EQ(contrastive_accuracy(s), 1.0);
}

TEST(ContrastiveAccuracy, AllEqualIsZero) {
  EXPECT_EQ(contrastive_accuracy(MatrixD(MatrixD::Constant(4, 4, 2.0))), 0.0);
}

TEST(ContrastiveAccuracy, MatchesArgmaxOracle) {
  Rng rng(5);
  std::uniform_int_distribution<int> coarse(0, 3);
  for (int k = 0; k < 200; ++k) {
    MatrixD s(6, 6);
    for (Index i = 0; i < s.size(); ++i) s.data()[i] = coarse(rng);  // frequent ties
    EXPECT_EQ(contrastive_accuracy(s), oracle::argmax_accuracy(s));
  }
}

TEST(ContrastiveAccuracy, GrowingMarginsApproachOne) {
  Rng rng(6);
  const MatrixD noise = random_scores(16, rng, 1.0);
  double prev = -1;
  for (double margin : {0.0, 1.0, 2.0, 4.0, 8.0}) {
    MatrixD s = noise;
    s.diagonal().array() += margin;
    const double acc = contrastive_accuracy(s);
    EXPECT_GE(acc, prev);
    prev = acc;
  }
  EXPECT_EQ(prev, 1.0);
}

struct TinySetup {
  EncoderConfig cfg = tiny_encoder_config();
  Encoder<double> encoder{cfg};
  CriticHeads<double> heads{cfg};
  ContrastiveBatch batch;

  explicit TinySetup(Index b, std::uint64_t seed = 7) {
    Rng rng(seed);
    encoder.init(rng);
    heads.init(rng);
    encoder.for_each_param([&](Param<double>& p) {
      if (p.name.ends_with(".bias")) p.value = standard_normal(p.value.rows(), 1, rng) * 0.1;
    });
    std::vector<MatrixD> corpus{standard_normal(cfg.in_channels, 200, rng)};
    batch = sample_contrastive_batch(corpus, b, cfg.width, rng);
  }
};

TEST(StdimScores, MatchesHandComputedDotProducts) {
  TinySetup t(2);
  const auto s = stdim_scores(t.batch, t.encoder, t.heads);
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 2; ++j) {
      const auto a = encode(t.encoder, t.batch.anchors[static_cast<std::size_t>(i)]);
      const auto p = encode(t.encoder, t.batch.positives[static_cast<std::size_t>(j)]);
      const VectorD phi_a = critic_embed(t.heads.phi, a.z);
      const VectorD psi_a = critic_embed(t.heads.psi, a.c3);
      const VectorD psi_p = critic_embed(t.heads.psi, p.c3);
      double ls = 0, ss = 0;
      for (Index k = 0; k < phi_a.size(); ++k) {
        ls += phi_a(k) * psi_p(k);
        ss += psi_a(k) * psi_p(k);
      }
      EXPECT_NEAR(s.ls(i, j), ls, 1e-12);
      EXPECT_NEAR(s.ss(i, j), ss, 1e-12);
    }
}

TEST(StdimScores, ZeroHeadsGiveZeroScores) {
  TinySetup t(4);
  t.heads.for_each_param([](Param<double>& p) { p.value.setZero(); });
  const auto s = stdim_scores(t.batch, t.encoder, t.heads);
  EXPECT_TRUE(s.ls.isZero(0));
  EXPECT_TRUE(s.ss.isZero(0));
  EXPECT_NEAR(stdim_loss(t.batch, t.encoder, t.heads).total, 2 * std::log(4.0), 1e-12);
}

TEST(StdimScores, SpatialPairingSharesPsi) {
  TinySetup t(3);
  const auto before = stdim_scores(t.batch, t.encoder, t.heads);
  t.heads.phi.weight.value.array() += 0.3;
  const auto phi_moved = stdim_scores(t.batch, t.encoder, t.heads);
  EXPECT_TRUE(phi_moved.ss == before.ss);
  EXPECT_FALSE(phi_moved.ls == before.ls);
  // With zero bias, doubling psi doubles ls and quadruples ss: psi sits on
  // both sides of the spatial pairing.
  t.heads.psi.bias.value.setZero();
  const auto base = stdim_scores(t.batch, t.encoder, t.heads);
  t.heads.psi.weight.value *= 2.0;
  const auto scaled = stdim_scores(t.batch, t.encoder, t.heads);
  EXPECT_TRUE(scaled.ls.isApprox(2.0 * base.ls, 1e-12));
  EXPECT_TRUE(scaled.ss.isApprox(4.0 * base.ss, 1e-12));
}

TEST(StdimLoss, TotalIsSumOfTerms) {
  TinySetup t(5);
  const auto v = stdim_loss(t.batch, t.encoder, t.heads);
  const auto s = stdim_scores(t.batch, t.encoder, t.heads);
  EXPECT_NEAR(v.total, oracle::infonce(s.ls) + oracle::infonce(s.ss), 1e-10);
  EXPECT_EQ(v.total, v.ls_term + v.ss_term);
}

TEST(StdimLoss, IdenticalScoreMatricesDoubleTheTerm) {
  Rng rng(8);
  const MatrixD s = random_scores(4, rng);
  EXPECT_NEAR(infonce_loss(s) + infonce_loss(s), 2 * infonce_loss(s), 1e-15);
}

TEST(StdimLoss, GradientCheckOnTinyEncoder) {
  const auto r = stdim_gradient_check(11);
  EXPECT_GT(r.coordinates, 0);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst_param << "[" << r.worst_index << "]";
}

}  // namespace
}  // namespace stdim
