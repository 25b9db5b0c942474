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
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "pcldcg/adam.hpp"
#include "pcldcg/config.hpp"
#include "pcldcg/contrastive.hpp"
#include "pcldcg/data.hpp"
#include "pcldcg/errors.hpp"
#include "pcldcg/model.hpp"
#include "pcldcg/rng.hpp"
#include "pcldcg/tape.hpp"

namespace pcldcg {

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

/// Everything derived from an interaction log that training and evaluation
/// share.
struct Corpus {
  Vocab vocab;
  DatasetSplit split;
  std::vector<std::vector<std::size_t>> interacted;  // per user, sorted
  std::vector<std::size_t> item_category;            // vocab category index or n_categories
};

inline Corpus build_corpus(const InteractionLog& log, std::size_t n_max) {
  if (log.records.empty()) throw DataError("interaction log is empty");
  Corpus c;
  c.vocab = build_vocab(log);
  c.split = split_leave_last_out(build_sequences(log, c.vocab, n_max));
  c.interacted = interaction_sets(log, c.vocab);
  c.item_category.resize(c.vocab.n_items());
  for (std::size_t i = 0; i < c.vocab.n_items(); ++i) {
    const auto cat = c.vocab.item_category[i];
    c.item_category[i] = cat == Vocab::kNoCategory ? c.vocab.n_categories() : cat;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Batches and losses
// ---------------------------------------------------------------------------

/// B training examples. Sample b scores candidates[b * (1 + J) ...], the first
/// of which is the positive.
struct Batch {
  std::vector<std::vector<std::size_t>> histories;
  std::vector<std::size_t> buckets;
  std::vector<std::vector<std::size_t>> demographics;
  std::vector<std::size_t> candidates;
  std::size_t J = 0;

  std::size_t size() const { return histories.size(); }
  std::size_t positive(std::size_t b) const { return candidates[b * (1 + J)]; }
};

inline Batch make_batch(const DatasetSplit& split, std::span<const TrainPosition> positions,
                        std::size_t J, NegativeSampler& sampler, Rng& rng, std::size_t n_buckets) {
  Batch batch;
  batch.J = J;
  for (const auto& p : positions) {
    const auto& seq = split.train.at(p.sequence);
    batch.histories.emplace_back(seq.items.begin(), seq.items.begin() + std::ptrdiff_t(p.position));
    batch.buckets.push_back(activity_features(seq, n_buckets));
    batch.demographics.push_back(seq.demographics);
    const std::size_t item = seq.items.at(p.position);
    batch.candidates.push_back(item);
    for (std::size_t j = 0; j < J; ++j) batch.candidates.push_back(sampler.draw(item, rng));
  }
  return batch;
}

struct LossSettings {
  double T_ssl = 0.1;
  double alpha_self = 0.1;
  double beta_p = 0.1;
  double keep_ratio = 0.8;
  std::size_t r = 5;
  std::size_t J_self = 0;

  static LossSettings from(const TrainConfig& c) {
    return {c.T_ssl, c.alpha_self, c.beta_p, c.keep_ratio, c.r, c.J_self};
  }
};

struct LossParts {
  Var main, self, proto, total;
  bool self_active = false;
  bool proto_active = false;
  std::vector<std::size_t> k_u;
};

/// L = L_main + alpha_self * L_self + beta_p * L_p for one batch. L_self and
/// L_p use the distinct positive items of the batch; L_p is skipped when no
/// prototypes exist yet.
template <typename Real>
LossParts compute_losses(Tape<Real>& tape, TwoTowerModel<Real>& model, KeyEncoderState<Real>& key,
                         const Batch& batch, const PrototypeSet* protos, const LossSettings& s,
                         Rng& augment_rng, Rng& proto_rng) {
  const std::size_t B = batch.size(), W = 1 + batch.J;
  if (B == 0) throw ContractError("compute_losses: empty batch");
  ModelVars v = model.bind(tape);
  Var features = model.embed_item_features(tape, v, batch.candidates);
  Var items = TwoTowerModel<Real>::item_tower(tape, v.tower, features);
  auto sel = model.aisl_forward(tape, v, batch.buckets,
                                model.config().n_demographic_values ? std::span(batch.demographics)
                                                                    : std::span<const std::vector<std::size_t>>{});
  std::vector<Var> rows;
  rows.reserve(B);
  for (std::size_t b = 0; b < B; ++b) {
    Var ue = model.user_interests(tape, v, batch.histories[b]).interests;
    Var ie = tape.slice_rows(items, b * W, W);
    Var sims = tape.matmul(ue, ie, /*transpose_b=*/true);
    rows.push_back(tape.masked_combine(sims, tape.slice_rows(sel.mask, b, 1), model.config().combine));
  }
  Var logits = tape.mul_scalar(tape.concat_rows(rows), v.gamma);
  std::vector<Real> labels(B * W, Real(0));
  for (std::size_t b = 0; b < B; ++b) labels[b * W] = Real(1);

  LossParts out;
  out.k_u = sel.k_u;
  out.main = tape.bce_with_logits(logits, std::move(labels));

  // Distinct positives, first occurrence order.
  std::vector<std::size_t> unique_rows, unique_items;
  {
    std::unordered_map<std::size_t, std::size_t> seen;
    for (std::size_t b = 0; b < B; ++b) {
      if (seen.emplace(batch.positive(b), b).second) {
        unique_rows.push_back(b * W);
        unique_items.push_back(batch.positive(b));
      }
    }
  }
  const std::size_t U = unique_rows.size();
  Var queries = tape.gather_rows(items, unique_rows);

  out.self_active = s.alpha_self > 0 && U >= 2 && (s.J_self == 0 || s.J_self <= U - 1);
  if (out.self_active) {
    Var keys = key_encoder_forward(tape, key,
                                   augment(tape, tape.gather_rows(features, unique_rows), s.keep_ratio, augment_rng));
    if (s.J_self == 0) {
      out.self = info_nce_loss(tape, queries, keys, Real(s.T_ssl));
    } else {
      std::vector<std::size_t> neg;
      std::vector<std::size_t> others(U - 1);
      for (std::size_t x = 0; x < U; ++x) {
        for (std::size_t j = 0, w = 0; j < U; ++j)
          if (j != x) others[w++] = j;
        for (std::size_t j = 0; j < s.J_self; ++j) {
          std::uniform_int_distribution<std::size_t> d(j, others.size() - 1);
          std::swap(others[j], others[d(augment_rng)]);
          neg.push_back(others[j]);
        }
      }
      out.self = info_nce_loss(tape, queries, keys, Real(s.T_ssl), &neg, s.J_self);
    }
  } else {
    out.self = tape.constant({1}, {Real(0)});
  }

  out.proto_active = s.beta_p > 0 && protos && !protos->empty();
  out.proto = out.proto_active ? prototype_loss(tape, queries, unique_items, *protos, s.r, proto_rng)
                               : tape.constant({1}, {Real(0)});

  out.total = out.main;
  if (out.self_active) out.total = tape.add(out.total, tape.scale(out.self, Real(s.alpha_self)));
  if (out.proto_active) out.total = tape.add(out.total, tape.scale(out.proto, Real(s.beta_p)));
  return out;
}

/// Weighted sum of the three components. A non-finite component aborts with
/// its name.
inline double total_loss(double l_main, double l_self, double l_p, double alpha_self, double beta_p,
                         const std::string& where = "") {
  const std::pair<const char*, double> parts[] = {{"L_main", l_main}, {"L_self", l_self}, {"L_p", l_p}};
  for (const auto& [name, value] : parts) {
    if (!std::isfinite(value)) {
      throw DivergenceError(std::string(name) + " is not finite" + (where.empty() ? "" : " at " + where));
    }
  }
  return l_main + alpha_self * l_self + beta_p * l_p;
}

// ---------------------------------------------------------------------------
// Training state and loop
// ---------------------------------------------------------------------------

struct TrainState {
  TrainConfig config;
  TwoTowerModel<float> model;
  KeyEncoderState<float> key;
  AdamState<float> adam;
  PrototypeSet prototypes;
  std::uint64_t epoch = 0;  // completed epochs
};

struct EpochLog {
  std::uint64_t epoch = 0;
  double l_main = 0, l_self = 0, l_p = 0, l_total = 0;
  double wall_ms = 0;
};

inline TrainState init_state(const TrainConfig& config, const Corpus& corpus) {
  validate(config);
  TrainState s;
  s.config = config;
  Rng rng = make_rng(config.seed, Stream::kInit);
  s.model = TwoTowerModel<float>(model_config(config, corpus.vocab.n_items(), corpus.vocab.n_categories()),
                                 corpus.item_category, rng);
  s.key = KeyEncoderState<float>::copy_of(s.model.params().tower, config.alpha_m);
  s.adam.lr = config.lr;
  s.adam.beta1 = config.adam_beta1;
  s.adam.beta2 = config.adam_beta2;
  return s;
}

/// Key-encoder outputs of the clustered items, computed without gradients.
inline Tensor<float> key_embeddings(TrainState& s, std::span<const std::size_t> items, Rng& rng) {
  Tape<float> tape;
  ModelVars v = s.model.bind(tape);
  Var f = s.model.embed_item_features(tape, v, items);
  return tape.to_tensor(key_encoder_forward(tape, s.key, augment(tape, f, s.config.keep_ratio, rng)));
}

inline void refresh_prototypes(TrainState& s) {
  const auto& c = s.config;
  const std::size_t n_items = s.model.config().n_items;
  Rng rng = make_rng(c.seed, Stream::kKmeans, s.epoch);
  std::vector<std::size_t> items(n_items);
  std::iota(items.begin(), items.end(), 0);
  if (c.cluster_cap > 0 && c.cluster_cap < n_items) {
    std::shuffle(items.begin(), items.end(), rng);
    items.resize(c.cluster_cap);
    std::sort(items.begin(), items.end());
  }
  if (items.size() < c.n_clusters) {
    throw ParameterError("cannot build " + std::to_string(c.n_clusters) + " prototypes from " +
                         std::to_string(items.size()) + " items");
  }
  auto keys = key_embeddings(s, items, rng);
  s.prototypes = build_prototypes(keys, items, n_items, c.n_clusters, c.kmeans_iters, c.tau_min, rng);
  s.prototypes.epoch = s.epoch;
}

/// Training positions of one epoch: users in shuffled order, each with
/// `positions_per_user` targets drawn uniformly from [1, length).
inline std::vector<TrainPosition> epoch_positions(const DatasetSplit& split, std::size_t per_user,
                                                  Rng& rng) {
  std::vector<std::size_t> users;
  for (std::size_t s = 0; s < split.train.size(); ++s)
    if (split.train[s].items.size() >= 2) users.push_back(s);
  std::shuffle(users.begin(), users.end(), rng);
  std::vector<TrainPosition> out;
  out.reserve(users.size() * per_user);
  for (std::size_t s : users) {
    std::uniform_int_distribution<std::size_t> d(1, split.train[s].items.size() - 1);
    for (std::size_t k = 0; k < per_user; ++k) out.push_back({s, d(rng)});
  }
  return out;
}

/// One epoch of Adam steps followed, when due, by a prototype refresh.
inline EpochLog train_epoch(TrainState& s, const Corpus& corpus) {
  const auto start = std::chrono::steady_clock::now();
  const auto& c = s.config;
  Rng data_rng = make_rng(c.seed, Stream::kData, s.epoch);
  Rng aug_rng = make_rng(c.seed, Stream::kAugment, s.epoch);
  Rng proto_rng = make_rng(c.seed, Stream::kKmeans, s.epoch, 1);
  auto positions = epoch_positions(corpus.split, c.positions_per_user, data_rng);
  if (positions.empty()) throw DataError("no training positions: every user has fewer than two items");
  NegativeSampler sampler = c.negative_sampling == NegativeSampling::kPopularity
                                ? NegativeSampler(corpus.vocab.n_items(), corpus.vocab.item_counts)
                                : NegativeSampler(corpus.vocab.n_items());
  const LossSettings settings = LossSettings::from(c);
  auto params = s.model.parameters();
  const PrototypeSet* protos = s.prototypes.empty() ? nullptr : &s.prototypes;
  if (!protos && c.beta_p > 0) {
    spdlog::info("epoch {}: prototype loss is off until the first prototype refresh", s.epoch);
  }

  EpochLog log;
  log.epoch = s.epoch;
  std::size_t steps = 0;
  for (std::size_t begin = 0; begin < positions.size(); begin += c.B) {
    const std::size_t n = std::min(c.B, positions.size() - begin);
    auto batch = make_batch(corpus.split, std::span(positions).subspan(begin, n), c.J_neg, sampler,
                            data_rng, c.n_buckets);
    s.model.zero_grad();
    Tape<float> tape;
    auto parts = compute_losses(tape, s.model, s.key, batch, protos, settings, aug_rng, proto_rng);
    const std::string where = "epoch " + std::to_string(s.epoch) + ", step " + std::to_string(steps);
    const double lm = tape.item(parts.main), ls = tape.item(parts.self), lp = tape.item(parts.proto);
    const double total = total_loss(lm, ls, lp, c.alpha_self, c.beta_p, where);
    if (total > c.divergence_threshold) {
      throw DivergenceError("total loss " + std::to_string(total) + " exceeds " +
                            std::to_string(c.divergence_threshold) + " at " + where);
    }
    tape.backward(parts.total);
    adam_step<float>(params, s.adam);
    momentum_update(s.model.params().tower, s.key);
    log.l_main += lm;
    log.l_self += ls;
    log.l_p += lp;
    ++steps;
  }
  log.l_main /= double(steps);
  log.l_self /= double(steps);
  log.l_p /= double(steps);
  log.l_total = log.l_main + c.alpha_self * log.l_self + c.beta_p * log.l_p;
  s.epoch += 1;
  if (c.beta_p > 0 && s.epoch % c.refresh_every == 0) refresh_prototypes(s);
  log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return log;
}

/// Runs epochs until config.epochs are complete. `on_epoch` sees the state
/// after every epoch (checkpointing hooks in here).
inline void train(TrainState& s, const Corpus& corpus,
                  const std::function<void(const TrainState&, const EpochLog&)>& on_epoch = {}) {
  while (s.epoch < s.config.epochs) {
    auto log = train_epoch(s, corpus);
    spdlog::info("epoch {}: l_main={:.5f} l_self={:.5f} l_p={:.5f} l_total={:.5f} ({:.0f} ms)", log.epoch,
                 log.l_main, log.l_self, log.l_p, log.l_total, log.wall_ms);
    if (on_epoch) on_epoch(s, log);
  }
}

inline std::string epoch_log_json(const EpochLog& log) {
  nlohmann::json j;
  j["epoch"] = log.epoch;
  j["l_main"] = log.l_main;
  j["l_self"] = log.l_self;
  j["l_p"] = log.l_p;
  j["l_total"] = log.l_total;
  j["wall_ms"] = log.wall_ms;
  return j.dump();
}

}  // namespace pcldcg
