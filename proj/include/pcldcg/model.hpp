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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pcldcg/errors.hpp"
#include "pcldcg/rng.hpp"
#include "pcldcg/tape.hpp"
#include "pcldcg/tensor.hpp"

namespace pcldcg {

/// Soft relaxation of the prefix interest mask used for straight-through
/// gradients.
enum class Relaxation {
  kTailCumsum,  // soft_k = sum_{j >= k} softmax(h / T)_j = P(K_u >= k)
  kSoftmax,     // soft = softmax(h / T)
};

struct ModelConfig {
  std::size_t n_items = 0;
  std::size_t n_categories = 0;  // the embedding table gets one extra "none" row
  std::size_t n_buckets = 8;
  std::size_t n_demographic_values = 0;  // 0 disables f_b
  std::size_t d = 32;
  std::size_t d_e = 16;
  std::size_t d_f = 8;
  std::size_t K = 5;
  std::size_t L = 2;
  std::size_t aisl_hidden = 32;
  std::size_t tower_hidden = 64;
  std::size_t n_max = 50;
  double T_aisl = 1.0;
  double gamma_init = 5.0;
  Relaxation relaxation = Relaxation::kTailCumsum;
  CombineMode combine = CombineMode::kTelescoped;
  bool use_position = true;

  std::size_t feature_width() const { return 2 * d_e; }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ParameterError(what);
    };
    need(n_items >= 1, "model needs at least one item");
    need(d >= 1 && d_e >= 1 && d_f >= 1, "embedding widths must be positive");
    need(K >= 1, "K must be at least 1");
    need(L >= 1, "AISL needs at least one layer");
    need(aisl_hidden >= 1 && tower_hidden >= 1, "hidden widths must be positive");
    need(n_max >= 1, "n_max must be positive");
    need(n_buckets >= 1, "n_buckets must be positive");
    need(T_aisl > 0, "T_aisl must be positive");
  }
};

/// Item tower (query encoder G) weights. The key encoder keeps a second copy.
template <typename Real>
struct TowerWeights {
  Tensor<Real> w1, b1, w2, b2;
};

template <typename Real>
struct ModelParams {
  Tensor<Real> item_emb;          // n_items x d_e
  Tensor<Real> cat_emb;           // (n_categories + 1) x d_e
  Tensor<Real> pos_emb;           // n_max x d_e, row 0 = most recent behavior
  Tensor<Real> interest_queries;  // K x d_e
  Tensor<Real> interest_proj_w;   // d_e x d
  Tensor<Real> interest_proj_b;   // d
  Tensor<Real> activity_emb;      // n_buckets x d_f
  Tensor<Real> demo_emb;          // n_demographic_values x d_f (may be empty)
  std::vector<Tensor<Real>> aisl_w;  // L layers, last has width K
  std::vector<Tensor<Real>> aisl_b;
  TowerWeights<Real> tower;
  Tensor<Real> gamma;  // logit scale
};

/// Tape leaves for one pass.
struct TowerVars {
  Var w1, b1, w2, b2;
};

struct ModelVars {
  Var item_emb, cat_emb, pos_emb, interest_queries, interest_proj_w, interest_proj_b;
  Var activity_emb, demo_emb;
  std::vector<Var> aisl_w, aisl_b;
  TowerVars tower;
  Var gamma;
};

/// Output of the user tower for a single history.
struct InterestOutput {
  Var interests;  // K x d, rows L2-normalized
  Var attention;  // K x n, rows sum to 1
};

/// Output of the interest selection layer for a batch of users.
struct SelectionOutput {
  Var logits;  // h_L, B x K
  Var probs;   // p_u = softmax(h_L)
  Var soft;    // soft mask
  Var mask;    // soft + stop_gradient(hard - soft); forward values are exactly hard
  std::vector<std::size_t> k_u;  // 1-based selected interest counts
  std::vector<float> hard;       // B x K prefix masks
};

template <typename Real>
SelectionOutput select_interests(Tape<Real>& tape, Var logits, Real temperature, Relaxation mode);

template <typename Real>
class TwoTowerModel {
 public:
  TwoTowerModel() = default;

  /// `item_category[i]` is a category index or anything >= n_categories for
  /// "none".
  TwoTowerModel(ModelConfig config, std::vector<std::size_t> item_category, Rng& rng)
      : config_(std::move(config)), item_category_(std::move(item_category)) {
    config_.validate();
    if (item_category_.size() != config_.n_items) {
      throw DimensionError("item_category has " + std::to_string(item_category_.size()) +
                           " entries for " + std::to_string(config_.n_items) + " items");
    }
    for (auto& c : item_category_) c = std::min(c, config_.n_categories);
    initialize(rng);
  }

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  ModelParams<Real>& params() { return params_; }
  const ModelParams<Real>& params() const { return params_; }
  const std::vector<std::size_t>& item_category() const { return item_category_; }

  /// All learnable tensors with stable names, in a fixed order.
  std::vector<Parameter<Real>> parameters() {
    auto& p = params_;
    std::vector<Parameter<Real>> out = {
        {"item_emb", &p.item_emb},
        {"cat_emb", &p.cat_emb},
        {"pos_emb", &p.pos_emb},
        {"interest_queries", &p.interest_queries},
        {"interest_proj_w", &p.interest_proj_w},
        {"interest_proj_b", &p.interest_proj_b},
        {"activity_emb", &p.activity_emb},
    };
    if (config_.n_demographic_values > 0) out.push_back({"demo_emb", &p.demo_emb});
    for (std::size_t l = 0; l < p.aisl_w.size(); ++l) {
      out.push_back({"aisl_w" + std::to_string(l + 1), &p.aisl_w[l]});
      out.push_back({"aisl_b" + std::to_string(l + 1), &p.aisl_b[l]});
    }
    auto tower = tower_parameters();
    out.insert(out.end(), tower.begin(), tower.end());
    out.push_back({"gamma", &p.gamma});
    return out;
  }

  std::vector<Parameter<Real>> tower_parameters() {
    auto& t = params_.tower;
    return {{"tower_w1", &t.w1}, {"tower_b1", &t.b1}, {"tower_w2", &t.w2}, {"tower_b2", &t.b2}};
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor->zero_grad();
  }

  template <typename Other>
  TwoTowerModel<Other> cast() const {
    TwoTowerModel<Other> out;
    out.config_ = config_;
    out.item_category_ = item_category_;
    auto& src = const_cast<TwoTowerModel&>(*this);
    auto from = src.parameters();
    auto& dst_params = out.params_;
    dst_params.aisl_w.resize(params_.aisl_w.size());
    dst_params.aisl_b.resize(params_.aisl_b.size());
    auto to = out.parameters();
    for (std::size_t i = 0; i < from.size(); ++i) *to[i].tensor = from[i].tensor->template cast<Other>();
    return out;
  }

  ModelVars bind(Tape<Real>& tape) {
    auto& p = params_;
    ModelVars v;
    v.item_emb = tape.param(p.item_emb);
    v.cat_emb = tape.param(p.cat_emb);
    v.pos_emb = tape.param(p.pos_emb);
    v.interest_queries = tape.param(p.interest_queries);
    v.interest_proj_w = tape.param(p.interest_proj_w);
    v.interest_proj_b = tape.param(p.interest_proj_b);
    v.activity_emb = tape.param(p.activity_emb);
    if (config_.n_demographic_values > 0) v.demo_emb = tape.param(p.demo_emb);
    for (std::size_t l = 0; l < p.aisl_w.size(); ++l) {
      v.aisl_w.push_back(tape.param(p.aisl_w[l]));
      v.aisl_b.push_back(tape.param(p.aisl_b[l]));
    }
    v.tower = bind_tower(tape, p.tower);
    v.gamma = tape.param(p.gamma);
    return v;
  }

  static TowerVars bind_tower(Tape<Real>& tape, TowerWeights<Real>& w) {
    return {tape.param(w.w1), tape.param(w.b1), tape.param(w.w2), tape.param(w.b2)};
  }

  /// e_x = [item-id embedding | category embedding], one row per item.
  Var embed_item_features(Tape<Real>& tape, const ModelVars& v,
                          std::span<const std::size_t> items) const {
    std::vector<std::size_t> ids(items.begin(), items.end());
    std::vector<std::size_t> cats;
    cats.reserve(ids.size());
    for (std::size_t i : ids) {
      if (i >= config_.n_items) {
        throw ContractError("item index " + std::to_string(i) + " is outside the vocabulary of " +
                            std::to_string(config_.n_items));
      }
      cats.push_back(item_category_[i]);
    }
    return tape.concat_cols(tape.gather_rows(v.item_emb, std::move(ids)),
                            tape.gather_rows(v.cat_emb, std::move(cats)));
  }

  /// Two-layer MLP with ReLU hidden layer, L2-normalized output.
  static Var item_tower(Tape<Real>& tape, const TowerVars& g, Var features) {
    Var h = tape.relu(tape.add_row(tape.matmul(features, g.w1), g.b1));
    Var out = tape.add_row(tape.matmul(h, g.w2), g.b2);
    return tape.l2_normalize_rows(out);
  }

  /// Behavior embeddings: item + category + recency position.
  Var behavior_embeddings(Tape<Real>& tape, const ModelVars& v,
                          std::span<const std::size_t> history) const {
    if (history.empty()) throw ContractError("multi-interest extraction needs a non-empty history");
    if (history.size() > config_.n_max) {
      history = history.subspan(history.size() - config_.n_max);
    }
    std::vector<std::size_t> ids(history.begin(), history.end());
    std::vector<std::size_t> cats;
    std::vector<std::size_t> pos;
    for (std::size_t t = 0; t < ids.size(); ++t) {
      if (ids[t] >= config_.n_items) throw ContractError("history item outside the vocabulary");
      cats.push_back(item_category_[ids[t]]);
      pos.push_back(ids.size() - 1 - t);
    }
    Var b = tape.add(tape.gather_rows(v.item_emb, std::move(ids)),
                     tape.gather_rows(v.cat_emb, std::move(cats)));
    if (config_.use_position) b = tape.add(b, tape.gather_rows(v.pos_emb, std::move(pos)));
    return b;
  }

  /// K attention heads with learnable queries over the behaviors, projected
  /// to d and L2-normalized.
  InterestOutput multi_interest_extract(Tape<Real>& tape, const ModelVars& v, Var behaviors) const {
    if (tape.rows(behaviors) == 0) throw ContractError("multi-interest extraction on empty history");
    Var scores = tape.matmul(v.interest_queries, behaviors, /*transpose_b=*/true);
    Var attn = tape.softmax_rows(scores, Real(std::sqrt(double(config_.d_e))));
    Var pooled = tape.matmul(attn, behaviors);
    Var proj = tape.add_row(tape.matmul(pooled, v.interest_proj_w), v.interest_proj_b);
    return {tape.l2_normalize_rows(proj), attn};
  }

  InterestOutput user_interests(Tape<Real>& tape, const ModelVars& v,
                                std::span<const std::size_t> history) const {
    return multi_interest_extract(tape, v, behavior_embeddings(tape, v, history));
  }

  /// AISL MLP: h_0 = [f_b | f_a] embeddings, ReLU hidden layers, linear output
  /// of width K.
  Var aisl_logits(Tape<Real>& tape, const ModelVars& v, std::span<const std::size_t> buckets,
                  std::span<const std::vector<std::size_t>> demographics = {}) const {
    std::vector<std::size_t> b(buckets.begin(), buckets.end());
    for (auto x : b) {
      if (x >= config_.n_buckets) throw ContractError("activity bucket out of range");
    }
    Var h = tape.gather_rows(v.activity_emb, std::move(b));
    if (config_.n_demographic_values > 0) {
      if (demographics.size() != buckets.size()) {
        throw ContractError("demographic features required for every user");
      }
      std::vector<Var> rows;
      for (const auto& d : demographics) {
        if (d.empty()) throw ContractError("empty demographic feature list");
        const Real w = Real(1) / Real(d.size());
        rows.push_back(tape.matmul(tape.constant({1, d.size()}, std::vector<Real>(d.size(), w)),
                                   tape.gather_rows(v.demo_emb, d)));
      }
      h = tape.concat_cols(tape.concat_rows(rows), h);
    }
    for (std::size_t l = 0; l < v.aisl_w.size(); ++l) {
      h = tape.add_row(tape.matmul(h, v.aisl_w[l]), v.aisl_b[l]);
      if (l + 1 < v.aisl_w.size()) h = tape.relu(h);
    }
    return h;
  }

  SelectionOutput aisl_forward(Tape<Real>& tape, const ModelVars& v,
                               std::span<const std::size_t> buckets,
                               std::span<const std::vector<std::size_t>> demographics = {}) const {
    return select_interests(tape, aisl_logits(tape, v, buckets, demographics), Real(config_.T_aisl),
                            config_.relaxation);
  }

  /// Combined similarity logits for one user against m items (m x d):
  /// gamma * combine_k(mask_k, cos(ue_k, ie)). Returns a 1 x m row.
  Var score_logits(Tape<Real>& tape, const ModelVars& v, Var interests, Var mask_row,
                   Var items) const {
    Var sims = tape.matmul(interests, items, /*transpose_b=*/true);
    return tape.mul_scalar(tape.masked_combine(sims, mask_row, config_.combine), v.gamma);
  }

 private:
  template <typename>
  friend class TwoTowerModel;

  void initialize(Rng& rng) {
    const auto& c = config_;
    auto& p = params_;
    std::normal_distribution<double> emb(0.0, 0.1);
    auto fill_normal = [&](Tensor<Real>& t, Shape s) {
      t = Tensor<Real>(std::move(s));
      for (auto& x : t.values()) x = Real(emb(rng));
      t.set_requires_grad(true);
    };
    auto fill_xavier = [&](Tensor<Real>& t, std::size_t in, std::size_t out, double gain = 1.0) {
      t = Tensor<Real>({in, out});
      const double a = gain * std::sqrt(6.0 / double(in + out));
      std::uniform_real_distribution<double> u(-a, a);
      for (auto& x : t.values()) x = Real(u(rng));
      t.set_requires_grad(true);
    };
    auto zeros = [](Tensor<Real>& t, Shape s) {
      t = Tensor<Real>(std::move(s));
      t.set_requires_grad(true);
    };
    fill_normal(p.item_emb, {c.n_items, c.d_e});
    fill_normal(p.cat_emb, {c.n_categories + 1, c.d_e});
    fill_normal(p.pos_emb, {c.n_max, c.d_e});
    // Unit-scale queries give each head a distinct, non-uniform attention
    // pattern from the start; at the embedding scale every head mean-pools and
    // the interests collapse onto one vector.
    p.interest_queries = Tensor<Real>({c.K, c.d_e});
    std::normal_distribution<double> unit(0.0, 1.0);
    for (auto& x : p.interest_queries.values()) x = Real(unit(rng));
    p.interest_queries.set_requires_grad(true);
    fill_xavier(p.interest_proj_w, c.d_e, c.d);
    zeros(p.interest_proj_b, {c.d});
    fill_normal(p.activity_emb, {c.n_buckets, c.d_f});
    if (c.n_demographic_values > 0) fill_normal(p.demo_emb, {c.n_demographic_values, c.d_f});
    std::size_t in = c.d_f * (c.n_demographic_values > 0 ? 2 : 1);
    p.aisl_w.assign(c.L, {});
    p.aisl_b.assign(c.L, {});
    for (std::size_t l = 0; l < c.L; ++l) {
      const bool last = l + 1 == c.L;
      const std::size_t out = last ? c.K : c.aisl_hidden;
      // A small output layer starts the selection close to uniform.
      fill_xavier(p.aisl_w[l], in, out, last ? 0.1 : 1.0);
      zeros(p.aisl_b[l], {out});
      in = out;
    }
    fill_xavier(p.tower.w1, c.feature_width(), c.tower_hidden);
    zeros(p.tower.b1, {c.tower_hidden});
    fill_xavier(p.tower.w2, c.tower_hidden, c.d);
    zeros(p.tower.b2, {c.d});
    p.gamma = Tensor<Real>::scalar(Real(c.gamma_init));
    p.gamma.set_requires_grad(true);
  }

  ModelConfig config_;
  ModelParams<Real> params_;
  std::vector<std::size_t> item_category_;
};

/// Turns selection logits h_L (B x K) into prefix masks with a
/// straight-through estimator: K_u = 1 + argmax_k h_L (ties to the smallest
/// index), hard mask = K_u leading ones, returned mask = soft +
/// stop_gradient(hard - soft).
template <typename Real>
SelectionOutput select_interests(Tape<Real>& tape, Var logits, Real temperature, Relaxation mode) {
  if (!(temperature > Real(0))) {
    throw ParameterError("T_aisl must be positive, got " + std::to_string(double(temperature)));
  }
  SelectionOutput out;
  out.logits = logits;
  const std::size_t B = tape.rows(logits), K = tape.cols(logits);
  auto h = tape.value(logits);
  out.hard.assign(B * K, 0.0f);
  std::vector<Real> hard(B * K, Real(0));
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (h[b * K + k] > h[b * K + best]) best = k;
    out.k_u.push_back(best + 1);
    for (std::size_t k = 0; k <= best; ++k) {
      hard[b * K + k] = Real(1);
      out.hard[b * K + k] = 1.0f;
    }
  }
  out.probs = tape.softmax_rows(logits, Real(1));
  Var tempered = tape.softmax_rows(logits, temperature);
  out.soft = mode == Relaxation::kTailCumsum ? tape.suffix_sum_rows(tempered) : tempered;
  Var hard_v = tape.constant(tape.shape(logits), std::move(hard));
  out.mask = tape.add(out.soft, tape.stop_gradient(tape.sub(hard_v, out.soft)));
  return out;
}

}  // namespace pcldcg
