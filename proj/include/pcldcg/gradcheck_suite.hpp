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

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pcldcg/contrastive.hpp"
#include "pcldcg/gradcheck.hpp"
#include "pcldcg/model.hpp"
#include "pcldcg/tape.hpp"
#include "pcldcg/training.hpp"

namespace pcldcg {

struct SuiteCheck {
  std::string name;
  GradcheckResult result;
  bool passed = false;
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  std::size_t trials = 100;  // random points per primitive
  double step = 1e-6;
  double rtol = 1e-3;
  std::string inject_fault;  // check name whose analytic gradient gets corrupted
};

// Suite tape type: extended precision lets a small step sit above rounding noise.
using GReal = long double;

namespace suite_detail {

using T64 = Tensor<GReal>;

inline T64 uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  T64 t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

struct Primitive {
  std::string name;
  Shape input;
  std::function<Var(Tape<GReal>&, Var, std::mt19937_64&)> f;
};

inline std::vector<Primitive> primitives() {
  auto c = [](Tape<GReal>& t, Shape s, std::mt19937_64& g) { return t.constant(uniform(std::move(s), g)); };
  using G = std::mt19937_64;
  using Tp = Tape<GReal>;
  return {
      {"matmul", {3, 4}, [c](Tp& t, Var x, G& g) { return t.matmul(x, c(t, {4, 2}, g)); }},
      {"matmul_transposed", {2, 4}, [c](Tp& t, Var x, G& g) { return t.matmul(c(t, {3, 4}, g), x, true); }},
      {"add", {3, 4}, [c](Tp& t, Var x, G& g) { return t.add(x, c(t, {3, 4}, g)); }},
      {"sub", {3, 4}, [c](Tp& t, Var x, G& g) { return t.sub(c(t, {3, 4}, g), x); }},
      {"mul", {3, 4}, [c](Tp& t, Var x, G& g) { return t.mul(x, t.add(x, c(t, {3, 4}, g))); }},
      {"add_row", {4}, [c](Tp& t, Var x, G& g) { return t.add_row(c(t, {3, 4}, g), x); }},
      {"scale", {5}, [](Tp& t, Var x, G&) { return t.scale(x, -2.5); }},
      {"mul_scalar", {1}, [c](Tp& t, Var x, G& g) { return t.mul_scalar(c(t, {3, 4}, g), x); }},
      {"relu", {3, 4}, [](Tp& t, Var x, G&) { return t.relu(x); }},
      {"sigmoid", {3, 4}, [](Tp& t, Var x, G&) { return t.sigmoid(x); }},
      {"softmax_rows", {3, 4}, [](Tp& t, Var x, G&) { return t.softmax_rows(x, 0.7); }},
      {"suffix_sum_rows", {2, 5}, [](Tp& t, Var x, G&) { return t.suffix_sum_rows(x); }},
      {"l2_normalize_rows", {3, 4}, [](Tp& t, Var x, G&) { return t.l2_normalize_rows(x); }},
      {"cosine_similarity", {4}, [c](Tp& t, Var x, G& g) { return t.cosine_similarity(x, c(t, {4}, g)); }},
      {"stop_gradient", {3}, [](Tp& t, Var x, G&) { return t.add(x, t.stop_gradient(t.mul(x, x))); }},
      {"gather_rows", {5, 3}, [](Tp& t, Var x, G&) { return t.gather_rows(x, {4, 0, 4, 2}); }},
      {"slice_rows", {5, 3}, [](Tp& t, Var x, G&) { return t.slice_rows(x, 1, 3); }},
      {"concat_cols", {3, 2}, [c](Tp& t, Var x, G& g) { return t.concat_cols(x, c(t, {3, 4}, g)); }},
      {"concat_rows", {2, 4}, [c](Tp& t, Var x, G& g) { return t.concat_rows({x, c(t, {3, 4}, g), x}); }},
      {"select_per_row", {2, 5}, [](Tp& t, Var x, G&) { return t.select_per_row(x, {0, 3, 3, 4, 1, 0}, 3); }},
      {"sum", {6}, [](Tp& t, Var x, G&) { return t.sum(x); }},
      {"mean", {7}, [](Tp& t, Var x, G&) { return t.mean(x); }},
      {"masked_combine_telescoped", {3, 4},
       [](Tp& t, Var x, G&) { return t.masked_combine(x, t.constant({3}, {1.0, 0.6, 0.2}), CombineMode::kTelescoped); }},
      {"masked_combine_penalty", {3, 4},
       [](Tp& t, Var x, G&) { return t.masked_combine(x, t.constant({3}, {1.0, 1.0, 0.0}), CombineMode::kPenalty); }},
      {"masked_combine_mask", {3},
       [c](Tp& t, Var x, G& g) { return t.masked_combine(c(t, {3, 4}, g), x, CombineMode::kTelescoped); }},
      {"bce_with_logits", {6}, [](Tp& t, Var x, G&) { return t.bce_with_logits(t.scale(x, 3.0), {1, 0, 0, 1, 1, 0}); }},
      {"softmax_cross_entropy", {3, 4},
       [](Tp& t, Var x, G&) { return t.softmax_cross_entropy(t.scale(x, 4.0), {0, 3, 1}); }},
      {"interest_selection", {3, 4},
       [](Tp& t, Var x, G&) { return select_interests(t, t.scale(x, 2.0), GReal(0.8), Relaxation::kTailCumsum).mask; }},
      {"info_nce", {4, 3}, [c](Tp& t, Var x, G& g) { return info_nce_loss(t, x, c(t, {4, 3}, g), GReal(0.5)); }},
  };
}

/// A small model, key encoder, prototypes and batch for composite checks.
struct CompositeFixture {
  TwoTowerModel<GReal> model;
  KeyEncoderState<GReal> key;
  PrototypeSet protos;
  Batch batch;
  LossSettings settings;
  std::uint64_t seed = 0;

  explicit CompositeFixture(std::uint64_t s, bool contrastive) : seed(s) {
    ModelConfig cfg;
    cfg.n_items = 16;
    cfg.n_categories = 4;
    cfg.d = 6;
    cfg.d_e = 4;
    cfg.d_f = 3;
    cfg.K = 3;
    cfg.aisl_hidden = 5;
    cfg.tower_hidden = 8;
    cfg.n_max = 8;
    std::vector<std::size_t> cats(cfg.n_items);
    for (std::size_t i = 0; i < cfg.n_items; ++i) cats[i] = i % cfg.n_categories;
    Rng rng = make_rng(s, Stream::kInit);
    model = TwoTowerModel<GReal>(cfg, cats, rng);
    // Spread the AISL output so the selected count varies across users.
    std::normal_distribution<double> n(0.0, 0.5);
    for (auto& v : model.params().aisl_w.back().values()) v = n(rng);
    for (auto& v : model.params().activity_emb.values()) v = n(rng);
    // Nonzero biases keep tower outputs away from the clamped zero-norm point,
    // where the slope is 1 / kNormFloor and no finite difference can follow it.
    for (auto& v : model.params().tower.b1.values()) v = 0.2 + 0.1 * n(rng);
    for (auto& v : model.params().tower.b2.values()) v = n(rng);
    key = KeyEncoderState<GReal>::copy_of(model.params().tower, 0.9);
    for (auto* t : key.tensors())
      for (auto& v : t->values()) v += 0.05 * n(rng);

    Rng data = make_rng(s, Stream::kData);
    std::uniform_int_distribution<std::size_t> item(0, cfg.n_items - 1), len(1, 6), bucket(0, cfg.n_buckets - 1);
    batch.J = 2;
    for (std::size_t b = 0; b < 4; ++b) {
      std::vector<std::size_t> h(len(data));
      for (auto& x : h) x = item(data);
      batch.histories.push_back(h);
      batch.buckets.push_back(bucket(data));
      batch.demographics.emplace_back();
      const std::size_t pos = (b * 5 + s) % cfg.n_items;  // distinct positives
      batch.candidates.push_back(pos);
      for (std::size_t j = 0; j < batch.J; ++j) {
        std::size_t neg;
        do neg = item(data);
        while (neg == pos);
        batch.candidates.push_back(neg);
      }
    }
    settings.T_ssl = 0.5;
    settings.keep_ratio = 0.75;
    settings.r = 2;
    settings.alpha_self = contrastive ? 0.7 : 0.0;
    settings.beta_p = contrastive ? 0.6 : 0.0;
    if (contrastive) {
      // Prototypes from key-encoder outputs of all items, |C| = 4.
      Tape<GReal> tape;
      ModelVars v = model.bind(tape);
      std::vector<std::size_t> all(cfg.n_items);
      std::iota(all.begin(), all.end(), 0);
      Rng krng = make_rng(s, Stream::kKmeans);
      auto keys = tape.to_tensor(key_encoder_forward(tape, key, model.embed_item_features(tape, v, all)));
      protos = build_prototypes(keys.cast<float>(), all, cfg.n_items, 4, 50, 0.05, krng);
    }
  }

  Var loss(Tape<GReal>& t) {
    Rng aug = make_rng(seed, Stream::kAugment);
    Rng pr = make_rng(seed, Stream::kKmeans, 1);
    return compute_losses(t, model, key, batch, settings.beta_p > 0 ? &protos : nullptr, settings, aug, pr).total;
  }
};

}  // namespace suite_detail

/// Composite loss check: L_main alone, or L_main + L_self + L_p on a 4-sample
/// batch with 4 prototypes and r = 2, over every model parameter.
inline SuiteCheck composite_gradcheck(std::uint64_t seed, bool contrastive, const SuiteOptions& opt = {}) {
  suite_detail::CompositeFixture fx(seed, contrastive);
  SuiteCheck out;
  out.name = contrastive ? "composite_loss" : "main_loss_model";
  auto params = fx.model.parameters();
  GradcheckOptions go;
  go.step = opt.step;
  if (opt.inject_fault == out.name) go.inject_error = 1.0;
  out.result = gradcheck_parameters<GReal>([&](Tape<GReal>& t) { return fx.loss(t); }, params, go);
  out.passed = out.result.passed(opt.rtol);
  return out;
}

/// Every primitive at `trials` random points, then the item tower and the two
/// composite losses.
inline std::vector<SuiteCheck> run_gradcheck_suite(const SuiteOptions& opt) {
  std::vector<SuiteCheck> out;
  std::mt19937_64 rng(derive_seed(opt.seed, Stream::kInit, 77));
  for (const auto& p : suite_detail::primitives()) {
    SuiteCheck check;
    check.name = p.name;
    for (std::size_t trial = 0; trial < opt.trials; ++trial) {
      auto x = suite_detail::uniform(p.input, rng);
      x.set_requires_grad(true);
      const auto cseed = rng();
      auto w = suite_detail::uniform({64}, rng);
      Parameter<GReal> param{"x", &x};
      GradcheckOptions go;
      go.step = opt.step;
      if (opt.inject_fault == p.name && trial == 0) go.inject_error = 1.0;
      auto r = gradcheck_parameters<GReal>(
          [&](Tape<GReal>& t) {
            std::mt19937_64 g(cseed);
            Var y = p.f(t, t.param(x), g);
            const std::size_t n = t.value(y).size();
            std::vector<GReal> wv(w.values().begin(), w.values().begin() + std::ptrdiff_t(n));
            return t.sum(t.mul(y, t.constant(t.shape(y), std::move(wv))));
          },
          std::span<const Parameter<GReal>>(&param, 1), go);
      if (trial == 0 || r.max_rel_error > check.result.max_rel_error) check.result = r;
    }
    check.passed = check.result.passed(opt.rtol);
    out.push_back(std::move(check));
  }
  {
    ModelConfig cfg;
    cfg.n_items = 4;
    cfg.n_categories = 2;
    cfg.d = 5;
    cfg.d_e = 3;
    cfg.tower_hidden = 16;
    Rng r = make_rng(opt.seed, Stream::kInit, 3);
    TwoTowerModel<GReal> m(cfg, {0, 0, 1, 1}, r);
    auto x = suite_detail::uniform({4, cfg.feature_width()}, rng);
    auto w = suite_detail::uniform({4, cfg.d}, rng);
    auto params = m.tower_parameters();
    GradcheckOptions go;
    go.step = opt.step;
    if (opt.inject_fault == "item_tower") go.inject_error = 1.0;
    SuiteCheck check;
    check.name = "item_tower";
    check.result = gradcheck_parameters<GReal>(
        [&](Tape<GReal>& t) {
          auto tv = TwoTowerModel<GReal>::bind_tower(t, m.params().tower);
          return t.sum(t.mul(TwoTowerModel<GReal>::item_tower(t, tv, t.constant(x)), t.constant(w)));
        },
        params, go);
    check.passed = check.result.passed(opt.rtol);
    out.push_back(std::move(check));
  }
  out.push_back(composite_gradcheck(opt.seed, false, opt));
  out.push_back(composite_gradcheck(opt.seed, true, opt));
  return out;
}

}  // namespace pcldcg
