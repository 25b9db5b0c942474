// Copyright 2026 The pcldcg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "pcldcg/gradcheck.hpp"
#include "pcldcg/model.hpp"
#include "support/random.hpp"

namespace pcldcg {
namespace {

using testing::random_tensor;

ModelConfig small_config() {
  ModelConfig c;
  c.n_items = 12;
  c.n_categories = 3;
  c.d = 6;
  c.d_e = 5;
  c.d_f = 4;
  c.K = 4;
  c.aisl_hidden = 7;
  c.tower_hidden = 9;
  c.n_max = 6;
  return c;
}

std::vector<std::size_t> categories(std::size_t n, std::size_t c) {
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i * c / n;
  return out;
}

TEST(ItemFeatures, LookupAndSharedCategory) {
  Rng rng(3);
  auto cfg = small_config();
  TwoTowerModel<float> model(cfg, categories(cfg.n_items, cfg.n_categories), rng);
  Tape<float> tape;
  auto v = model.bind(tape);
  std::vector<std::size_t> items = {0, 1};
  auto e = tape.value(model.embed_item_features(tape, v, items));
  const std::size_t D = cfg.feature_width();
  ASSERT_EQ(e.size(), 2 * D);
  for (std::size_t j = 0; j < cfg.d_e; ++j) {
    EXPECT_EQ(e[j], model.params().item_emb.at(0, j));
    // Items 0 and 1 share category 0.
    EXPECT_EQ(e[cfg.d_e + j], e[D + cfg.d_e + j]);
  }
  std::vector<std::size_t> bad = {cfg.n_items};
  EXPECT_THROW(model.embed_item_features(tape, v, bad), ContractError);
}

TEST(MultiInterest, AttentionRowsSumToOne) {
  Rng rng(5);
  auto cfg = small_config();
  TwoTowerModel<float> model(cfg, categories(cfg.n_items, cfg.n_categories), rng);
  Tape<float> tape;
  auto v = model.bind(tape);
  std::vector<std::size_t> hist = {1, 4, 7, 2, 9};
  auto out = model.user_interests(tape, v, hist);
  auto a = tape.value(out.attention);
  for (std::size_t k = 0; k < cfg.K; ++k) {
    double s = 0;
    for (std::size_t t = 0; t < hist.size(); ++t) s += a[k * hist.size() + t];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  auto u = tape.value(out.interests);
  for (std::size_t k = 0; k < cfg.K; ++k) {
    double n = 0;
    for (std::size_t j = 0; j < cfg.d; ++j) n += double(u[k * cfg.d + j]) * u[k * cfg.d + j];
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
  }
  std::vector<std::size_t> empty;
  EXPECT_THROW(model.user_interests(tape, v, empty), ContractError);
}

TEST(MultiInterest, SingleBehaviorIsProjectedDirectly) {
  Rng rng(7);
  auto cfg = small_config();
  TwoTowerModel<double> model(cfg, categories(cfg.n_items, cfg.n_categories), rng);
  Tape<double> tape;
  auto v = model.bind(tape);
  std::vector<std::size_t> hist = {3};
  auto out = model.user_interests(tape, v, hist);
  auto a = tape.value(out.attention);
  for (double x : a) EXPECT_DOUBLE_EQ(x, 1.0);
  auto u = tape.value(out.interests);
  for (std::size_t k = 1; k < cfg.K; ++k)
    for (std::size_t j = 0; j < cfg.d; ++j) EXPECT_DOUBLE_EQ(u[k * cfg.d + j], u[j]);
}

TEST(MultiInterest, PermutingIdenticalBehaviorsIsInvariant) {
  Rng rng(9);
  auto cfg = small_config();
  cfg.use_position = false;
  TwoTowerModel<double> model(cfg, categories(cfg.n_items, cfg.n_categories), rng);
  // Items 2 and 3 share category 0; give them identical id embeddings.
  auto& p = model.params();
  for (std::size_t j = 0; j < cfg.d_e; ++j) p.item_emb.at(3, j) = p.item_emb.at(2, j);
  Tape<double> tape;
  auto v = model.bind(tape);
  std::vector<std::size_t> h1 = {2, 8, 3, 1};
  std::vector<std::size_t> h2 = {3, 8, 2, 1};
  auto u1 = tape.to_tensor(model.user_interests(tape, v, h1).interests);
  auto u2 = tape.to_tensor(model.user_interests(tape, v, h2).interests);
  for (std::size_t i = 0; i < u1.size(); ++i) EXPECT_NEAR(u1[i], u2[i], 1e-12);
}

TEST(Aisl, ArgmaxAndTieRule) {
  Tape<float> tape;
  auto sel = select_interests(tape, tape.constant({1, 5}, {0, 0, 10, 0, 0}), 1.0f,
                              Relaxation::kTailCumsum);
  EXPECT_EQ(sel.k_u, (std::vector<std::size_t>{3}));
  EXPECT_EQ(sel.hard, (std::vector<float>{1, 1, 1, 0, 0}));
  auto m = tape.value(sel.mask);
  EXPECT_EQ(std::vector<float>(m.begin(), m.end()), (std::vector<float>{1, 1, 1, 0, 0}));

  auto tie = select_interests(tape, tape.constant({1, 5}, {2, 2, 2, 2, 2}), 1.0f,
                              Relaxation::kTailCumsum);
  EXPECT_EQ(tie.k_u, (std::vector<std::size_t>{1}));
  EXPECT_EQ(tie.hard, (std::vector<float>{1, 0, 0, 0, 0}));
  EXPECT_THROW(select_interests(tape, tape.constant({1, 2}, {0, 1}), 0.0f, Relaxation::kSoftmax),
               ParameterError);
}

TEST(Aisl, TailCumsumOfKnownProbabilities) {
  Tape<double> tape;
  // softmax(log p) = p.
  std::vector<double> logp = {std::log(0.1), std::log(0.2), std::log(0.3), std::log(0.4)};
  auto sel = select_interests(tape, tape.constant({1, 4}, logp), 1.0, Relaxation::kTailCumsum);
  auto s = tape.value(sel.soft);
  const double expect[] = {1.0, 0.9, 0.7, 0.4};
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(s[k], expect[k], 1e-12);
  EXPECT_EQ(sel.k_u[0], 4u);
}

TEST(Aisl, SteContractOnRandomInputs) {
  std::mt19937_64 rng(11);
  const std::size_t B = 1000, K = 5;
  for (Relaxation mode : {Relaxation::kTailCumsum, Relaxation::kSoftmax}) {
    auto h = random_tensor<float>({B, K}, rng, -4, 4);
    auto w = random_tensor<float>({B, K}, rng, -1, 1);
    Tape<float> tape;
    Var logits = tape.param(h);
    h.zero_grad();
    auto sel = select_interests(tape, logits, 0.7f, mode);
    auto m = tape.value(sel.mask);
    for (std::size_t b = 0; b < B; ++b) {
      ASSERT_GE(sel.k_u[b], 1u);
      ASSERT_LE(sel.k_u[b], K);
      for (std::size_t k = 0; k < K; ++k) {
        const float want = k < sel.k_u[b] ? 1.0f : 0.0f;
        ASSERT_EQ(m[b * K + k], want);
      }
    }
    if (mode == Relaxation::kTailCumsum) {
      auto s = tape.value(sel.soft);
      for (std::size_t b = 0; b < B; ++b) {
        EXPECT_NEAR(s[b * K], 1.0f, 1e-6);
        for (std::size_t k = 1; k < K; ++k) EXPECT_LE(s[b * K + k], s[b * K + k - 1] + 1e-7f);
      }
    }
    tape.backward(tape.sum(tape.mul(sel.mask, tape.constant(w))));
    std::vector<float> via_mask(h.grad().begin(), h.grad().end());

    Tape<float> tape2;
    h.zero_grad();
    auto sel2 = select_interests(tape2, tape2.param(h), 0.7f, mode);
    tape2.backward(tape2.sum(tape2.mul(sel2.soft, tape2.constant(w))));
    for (std::size_t i = 0; i < via_mask.size(); ++i) ASSERT_EQ(via_mask[i], h.grad()[i]);
  }
}

TEST(Aisl, PositiveScalingKeepsSelection) {
  std::mt19937_64 rng(13);
  auto h = random_tensor<double>({50, 5}, rng, -3, 3);
  Tape<double> tape;
  auto a = select_interests(tape, tape.constant(h), 1.0, Relaxation::kTailCumsum);
  for (double c : {0.01, 3.0, 100.0}) {
    auto b = select_interests(tape, tape.scale(tape.constant(h), c), 1.0, Relaxation::kTailCumsum);
    EXPECT_EQ(a.k_u, b.k_u);
    EXPECT_EQ(a.hard, b.hard);
  }
}

TEST(ItemTower, UnitNormAndDegenerateWeights) {
  Rng rng(17);
  auto cfg = small_config();
  cfg.tower_hidden = 64;  // a narrow ReLU layer can be fully dead for some inputs
  TwoTowerModel<float> model(cfg, categories(cfg.n_items, cfg.n_categories), rng);
  std::mt19937_64 g(1);
  auto x = random_tensor<float>({20, cfg.feature_width()}, g, -2, 2);
  Tape<float> tape;
  auto tv = TwoTowerModel<float>::bind_tower(tape, model.params().tower);
  auto out = tape.value(TwoTowerModel<float>::item_tower(tape, tv, tape.constant(x)));
  for (std::size_t r = 0; r < 20; ++r) {
    double n = 0;
    for (std::size_t j = 0; j < cfg.d; ++j) n += double(out[r * cfg.d + j]) * out[r * cfg.d + j];
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
  }
  TowerWeights<float> zero{Tensor<float>({cfg.feature_width(), cfg.tower_hidden}),
                           Tensor<float>({cfg.tower_hidden}), Tensor<float>({cfg.tower_hidden, cfg.d}),
                           Tensor<float>({cfg.d})};
  Tape<float> t2;
  auto zv = TwoTowerModel<float>::bind_tower(t2, zero);
  auto z = t2.value(TwoTowerModel<float>::item_tower(t2, zv, t2.constant(x)));
  for (float v : z) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_EQ(v, 0.0f);
  }
}

TEST(ItemTower, Gradcheck) {
  Rng rng(19);
  auto cfg = small_config();
  TwoTowerModel<double> model(cfg, categories(cfg.n_items, cfg.n_categories), rng);
  std::mt19937_64 g(2);
  auto x = random_tensor<double>({4, cfg.feature_width()}, g, -1, 1);
  auto w = random_tensor<double>({4, cfg.d}, g, -1, 1);
  auto params = model.tower_parameters();
  auto res = gradcheck_parameters<double>(
      [&](Tape<double>& t) {
        auto tv = TwoTowerModel<double>::bind_tower(t, model.params().tower);
        return t.sum(t.mul(TwoTowerModel<double>::item_tower(t, tv, t.constant(x)), t.constant(w)));
      },
      params, {1e-5});
  EXPECT_TRUE(res.passed(1e-3)) << res.worst_parameter << " " << res.max_rel_error;
}

TEST(Score, AllActiveOneAlignedInterest) {
  for (CombineMode mode : {CombineMode::kTelescoped, CombineMode::kPenalty}) {
    Tape<double> tape;
    Var ue = tape.constant({3, 2}, {1, 0, 0, 1, 0, 1});
    Var ie = tape.constant({1, 2}, {1, 0});
    Var mask = tape.constant({1, 3}, {1, 1, 1});
    Var sims = tape.matmul(ue, ie, true);
    Var logit = tape.mul_scalar(tape.masked_combine(sims, mask, mode), tape.constant(Tensor<double>::scalar(5)));
    EXPECT_NEAR(Tape<double>::stable_sigmoid(tape.item(logit)), 0.99331, 1e-5);
  }
}

TEST(Score, MaskedInterestNeverWins) {
  for (CombineMode mode : {CombineMode::kTelescoped, CombineMode::kPenalty}) {
    Tape<double> tape;
    Var sims = tape.constant({3, 1}, {0.9, -0.2, 0.99});
    Var mask = tape.constant({1, 3}, {1, 1, 0});
    // The penalty form loses a few ulps to the 1e4 offset.
    EXPECT_NEAR(tape.item(tape.masked_combine(sims, mask, mode)), 0.9, 1e-9);
    Var single = tape.masked_combine(sims, tape.constant({1, 3}, {1, 0, 0}), mode);
    EXPECT_NEAR(tape.item(single), 0.9, 1e-9);
    Var first = tape.masked_combine(tape.constant({3, 1}, {-0.4, 0.5, 0.7}),
                                    tape.constant({1, 3}, {1, 0, 0}), mode);
    EXPECT_NEAR(tape.item(first), -0.4, 1e-9);
  }
}

TEST(Score, InvariantToItemScale) {
  Rng rng(23);
  auto cfg = small_config();
  TwoTowerModel<double> model(cfg, categories(cfg.n_items, cfg.n_categories), rng);
  std::mt19937_64 g(3);
  auto ue = random_tensor<double>({cfg.K, cfg.d}, g);
  auto ie = random_tensor<double>({3, cfg.d}, g);
  Tape<double> tape;
  auto v = model.bind(tape);
  Var u = tape.l2_normalize_rows(tape.constant(ue));
  Var m = tape.constant({1, cfg.K}, {1, 1, 0, 0});
  auto a = tape.to_tensor(model.score_logits(tape, v, u, m, tape.l2_normalize_rows(tape.constant(ie))));
  auto b = tape.to_tensor(
      model.score_logits(tape, v, u, m, tape.l2_normalize_rows(tape.scale(tape.constant(ie), 7.5))));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(MainLoss, ClosedForms) {
  Tape<double> tape;
  EXPECT_NEAR(tape.item(tape.bce_with_logits(tape.constant({1}, {0.0}), {1.0})), std::log(2.0), 1e-12);
  const double z = std::log((1 - 1e-7) / 1e-7);
  EXPECT_NEAR(tape.item(tape.bce_with_logits(tape.constant({1}, {z}), {1.0})), 1e-7, 1e-9);
  const double z1 = std::log(0.9 / 0.1), z2 = std::log(0.2 / 0.8);
  double l = tape.item(tape.bce_with_logits(tape.constant({2}, {z1, z2}), {1.0, 0.0}));
  EXPECT_NEAR(l, 0.16425, 1e-5);
  EXPECT_NEAR(l, (-std::log(0.9) - std::log(0.8)) / 2, 1e-12);
}

TEST(Model, CastPreservesParameters) {
  Rng rng(29);
  auto cfg = small_config();
  TwoTowerModel<float> model(cfg, categories(cfg.n_items, cfg.n_categories), rng);
  auto d = model.cast<double>();
  auto a = model.parameters();
  auto b = d.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    ASSERT_EQ(a[i].tensor->size(), b[i].tensor->size());
    for (std::size_t j = 0; j < a[i].tensor->size(); ++j)
      EXPECT_EQ(double((*a[i].tensor)[j]), (*b[i].tensor)[j]);
  }
}

}  // namespace
}  // namespace pcldcg
