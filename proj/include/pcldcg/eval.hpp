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
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcldcg/config.hpp"
#include "pcldcg/data.hpp"
#include "pcldcg/errors.hpp"
#include "pcldcg/model.hpp"
#include "pcldcg/training.hpp"

namespace pcldcg {

/// Item tower output for every vocabulary item; row i is item i.
struct RetrievalIndex {
  Tensor<float> embeddings;
  std::size_t n_items() const { return embeddings.rows(); }
  std::size_t dim() const { return embeddings.cols(); }
};

inline RetrievalIndex build_index(TwoTowerModel<float>& model, std::size_t chunk = 4096) {
  const std::size_t n = model.config().n_items, d = model.config().d;
  RetrievalIndex index{Tensor<float>({n, d})};
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t count = std::min(chunk, n - begin);
    std::vector<std::size_t> items(count);
    std::iota(items.begin(), items.end(), begin);
    Tape<float> tape;
    ModelVars v = model.bind(tape);
    auto out = tape.value(TwoTowerModel<float>::item_tower(tape, v.tower, model.embed_item_features(tape, v, items)));
    std::copy(out.begin(), out.end(), index.embeddings.values().begin() + std::ptrdiff_t(begin * d));
  }
  return index;
}

/// Interests and selected mask of one user.
struct UserView {
  Tensor<float> interests;  // K x d
  std::vector<float> mask;  // K, prefix of ones
  std::size_t k_u = 0;
  float gamma = 1.0f;
};

inline UserView user_view(TwoTowerModel<float>& model, const UserSequence& seq) {
  Tape<float> tape;
  ModelVars v = model.bind(tape);
  std::vector<std::size_t> bucket = {activity_features(seq, model.config().n_buckets)};
  std::vector<std::vector<std::size_t>> demo = {seq.demographics};
  auto sel = model.aisl_forward(tape, v, bucket,
                                model.config().n_demographic_values ? std::span(demo)
                                                                    : std::span<const std::vector<std::size_t>>{});
  UserView u;
  u.interests = tape.to_tensor(model.user_interests(tape, v, seq.items).interests);
  u.mask = sel.hard;
  u.k_u = sel.k_u[0];
  u.gamma = model.params().gamma[0];
  return u;
}

/// gamma * max over active interests of the interest-item dot product (both
/// sides are unit vectors, so this is the masked cosine score).
inline std::vector<float> score_candidates(const UserView& user, std::span<const std::size_t> candidates,
                                           const RetrievalIndex& index) {
  const std::size_t K = user.interests.rows(), d = user.interests.cols();
  if (d != index.dim()) throw DimensionError("score_candidates: interest width differs from the index");
  std::vector<float> out;
  out.reserve(candidates.size());
  for (std::size_t c : candidates) {
    if (c >= index.n_items()) throw ContractError("candidate item outside the index");
    float best = -std::numeric_limits<float>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      if (user.mask[k] == 0.0f) continue;
      float dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += user.interests.at(k, j) * index.embeddings.at(c, j);
      best = std::max(best, dot);
    }
    out.push_back(user.gamma * best);
  }
  return out;
}

/// Candidates by descending score; equal scores keep ascending item index.
inline std::vector<std::size_t> rank_candidates(std::span<const std::size_t> candidates, std::span<const float> scores) {
  if (candidates.empty()) throw ContractError("rank_candidates: no candidates");
  if (candidates.size() != scores.size()) throw DimensionError("rank_candidates: one score per candidate");
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidates[a] < candidates[b];
  });
  std::vector<std::size_t> out;
  out.reserve(order.size());
  for (auto i : order) out.push_back(candidates[i]);
  return out;
}

/// 1-based position of `item` in `ranked`.
inline std::size_t rank_of(std::span<const std::size_t> ranked, std::size_t item) {
  auto it = std::find(ranked.begin(), ranked.end(), item);
  if (it == ranked.end()) throw ContractError("positive item is not among the ranked candidates");
  return std::size_t(it - ranked.begin()) + 1;
}

inline double hit_rate_at_n(std::span<const std::size_t> ranks, std::size_t N) {
  if (ranks.empty()) return 0.0;
  std::size_t hits = 0;
  for (auto r : ranks) hits += r <= N;
  return double(hits) / double(ranks.size());
}

inline double ndcg_at_n(std::span<const std::size_t> ranks, std::size_t N) {
  if (ranks.empty()) return 0.0;
  double s = 0;
  for (auto r : ranks)
    if (r <= N) s += 1.0 / std::log2(double(r) + 1.0);
  return s / double(ranks.size());
}

inline double ainpu(std::span<const std::size_t> k_u) {
  if (k_u.empty()) return 0.0;
  double s = 0;
  for (auto k : k_u) s += double(k);
  return s / double(k_u.size());
}

/// Items ordered by training interaction count, ties by ascending index.
inline std::vector<std::size_t> most_popular_baseline(const DatasetSplit& split, std::size_t n_items) {
  std::vector<std::size_t> count(n_items, 0);
  for (const auto& seq : split.train)
    for (auto i : seq.items) ++count.at(i);
  std::vector<std::size_t> order(n_items);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return count[a] > count[b]; });
  return order;
}

struct MetricsReport {
  std::vector<std::size_t> cutoffs;
  std::map<std::size_t, double> hr, ndcg;
  std::map<std::size_t, double> popular_hr, popular_ndcg;
  double ainpu = 0;
  bool ainpu_all_users = false;
  std::size_t K = 0;
  std::size_t n_test_users = 0;
  std::size_t n_reduced = 0;  // users with fewer than 100 eval negatives
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> test_k_u;  // per test user, not serialized

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    for (auto n : cutoffs) {
      j["hr@" + std::to_string(n)] = hr.at(n);
      j["ndcg@" + std::to_string(n)] = ndcg.at(n);
    }
    j["ainpu"] = ainpu;
    j["ainpu_scope"] = ainpu_all_users ? "all_users" : "test_users";
    j["K"] = K;
    j["n_test_users"] = n_test_users;
    j["n_reduced_candidate_pools"] = n_reduced;
    nlohmann::ordered_json pop;
    for (auto n : cutoffs) {
      pop["hr@" + std::to_string(n)] = popular_hr.at(n);
      pop["ndcg@" + std::to_string(n)] = popular_ndcg.at(n);
    }
    j["most_popular"] = pop;
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash));
    j["config_hash"] = hash;
    j["seed"] = seed;
    return j;
  }
};

struct EvalOptions {
  std::vector<std::size_t> cutoffs = {10, 20};
  std::uint64_t seed = 0;
  bool ainpu_all_users = false;
};

/// Leave-last-out evaluation: each test user's positive is ranked against 100
/// sampled items the user never interacted with.
inline MetricsReport evaluate(TwoTowerModel<float>& model, const Corpus& corpus, const EvalOptions& opt,
                              std::uint64_t config_hash = 0) {
  if (opt.cutoffs.empty()) throw ParameterError("at least one cutoff N is required");
  MetricsReport rep;
  rep.cutoffs = opt.cutoffs;
  rep.K = model.config().K;
  rep.seed = opt.seed;
  rep.config_hash = config_hash;
  rep.ainpu_all_users = opt.ainpu_all_users;
  const std::size_t n_items = model.config().n_items;
  auto index = build_index(model);
  auto popular = most_popular_baseline(corpus.split, n_items);
  std::vector<float> popularity(n_items);
  for (std::size_t r = 0; r < popular.size(); ++r) popularity[popular[r]] = -float(r);

  std::vector<std::size_t> ranks, pop_ranks;
  for (const auto& tc : corpus.split.test) {
    Rng rng = make_rng(opt.seed, Stream::kEval, tc.user);
    auto cand = sample_eval_candidates(corpus.interacted.at(tc.user), tc.target, n_items, rng);
    rep.n_reduced += cand.reduced;
    std::vector<std::size_t> items = {tc.target};
    items.insert(items.end(), cand.negatives.begin(), cand.negatives.end());
    auto user = user_view(model, corpus.split.train.at(tc.train_sequence));
    rep.test_k_u.push_back(user.k_u);
    ranks.push_back(rank_of(rank_candidates(items, score_candidates(user, items, index)), tc.target));
    std::vector<float> ps;
    for (auto i : items) ps.push_back(popularity[i]);
    pop_ranks.push_back(rank_of(rank_candidates(items, ps), tc.target));
  }
  rep.n_test_users = ranks.size();
  for (auto n : opt.cutoffs) {
    rep.hr[n] = hit_rate_at_n(ranks, n);
    rep.ndcg[n] = ndcg_at_n(ranks, n);
    rep.popular_hr[n] = hit_rate_at_n(pop_ranks, n);
    rep.popular_ndcg[n] = ndcg_at_n(pop_ranks, n);
  }
  if (opt.ainpu_all_users) {
    std::vector<std::size_t> all;
    for (const auto& seq : corpus.split.train)
      if (!seq.items.empty()) all.push_back(user_view(model, seq).k_u);
    rep.ainpu = ainpu(all);
  } else {
    rep.ainpu = ainpu(rep.test_k_u);
  }
  return rep;
}

/// CSV `item_id,category,e_1..e_d`; items without a category get an empty
/// field.
inline void export_embeddings(const RetrievalIndex& index, const Vocab& vocab, std::ostream& out) {
  if (index.n_items() != vocab.n_items()) throw DimensionError("export_embeddings: index and vocabulary differ");
  out << "item_id,category";
  for (std::size_t j = 0; j < index.dim(); ++j) out << ",e_" << (j + 1);
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < index.n_items(); ++i) {
    const auto c = vocab.item_category[i];
    out << vocab.items[i] << ',' << (c == Vocab::kNoCategory ? std::string() : vocab.categories[c]);
    for (std::size_t j = 0; j < index.dim(); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", double(index.embeddings.at(i, j)));
      out << ',' << buf;
    }
    out << '\n';
  }
}

inline void export_embeddings(const RetrievalIndex& index, const Vocab& vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  export_embeddings(index, vocab, out);
  if (!out) throw IoError("write failed for '" + path + "'");
}

/// Mean cosine over same-category item pairs minus the mean over
/// cross-category pairs. Items without a category are ignored.
inline double category_cosine_gap(const RetrievalIndex& index, std::span<const std::size_t> item_category,
                                  std::size_t n_categories) {
  const std::size_t n = index.n_items(), d = index.dim();
  std::vector<std::vector<double>> sums(n_categories, std::vector<double>(d, 0.0));
  std::vector<double> counts(n_categories, 0), self_dot(n_categories, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = item_category[i];
    if (c >= n_categories) continue;
    counts[c] += 1;
    double sq = 0;
    for (std::size_t j = 0; j < d; ++j) {
      sums[c][j] += index.embeddings.at(i, j);
      sq += double(index.embeddings.at(i, j)) * index.embeddings.at(i, j);
    }
    self_dot[c] += sq;
  }
  // Pairwise cosine sums from category sum vectors (rows are unit length).
  double intra = 0, intra_pairs = 0, total = 0, total_pairs = 0;
  std::vector<double> all(d, 0.0);
  double all_self = 0, all_count = 0;
  for (std::size_t c = 0; c < n_categories; ++c) {
    double ss = 0;
    for (std::size_t j = 0; j < d; ++j) {
      ss += sums[c][j] * sums[c][j];
      all[j] += sums[c][j];
    }
    intra += ss - self_dot[c];
    intra_pairs += counts[c] * (counts[c] - 1);
    all_self += self_dot[c];
    all_count += counts[c];
  }
  double as = 0;
  for (double v : all) as += v * v;
  total = as - all_self;
  total_pairs = all_count * (all_count - 1);
  const double inter = total - intra, inter_pairs = total_pairs - intra_pairs;
  if (intra_pairs == 0 || inter_pairs == 0) throw ContractError("category_cosine_gap needs two categories with pairs");
  return intra / intra_pairs - inter / inter_pairs;
}

}  // namespace pcldcg
