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
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pcldcg/errors.hpp"
#include "pcldcg/model.hpp"
#include "pcldcg/rng.hpp"
#include "pcldcg/tape.hpp"
#include "pcldcg/tensor.hpp"

namespace pcldcg {

// ---------------------------------------------------------------------------
// Random-mask augmentation
// ---------------------------------------------------------------------------

inline std::size_t keep_count(std::size_t width, double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) {
    throw ParameterError("keep_ratio must lie in (0, 1], got " + std::to_string(keep_ratio));
  }
  return static_cast<std::size_t>(std::llround(keep_ratio * double(width)));
}

/// 0/1 vector of length `width` with exactly round(keep_ratio * width) ones at
/// random positions.
inline std::vector<float> make_feature_mask(std::size_t width, double keep_ratio, Rng& rng) {
  const std::size_t keep = keep_count(width, keep_ratio);
  std::vector<std::size_t> pos(width);
  std::iota(pos.begin(), pos.end(), 0);
  for (std::size_t i = 0; i < keep; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, width - 1);
    std::swap(pos[i], pos[d(rng)]);
  }
  std::vector<float> mask(width, 0.0f);
  for (std::size_t i = 0; i < keep; ++i) mask[pos[i]] = 1.0f;
  return mask;
}

/// e_x' = m_x * e_x with a fresh mask per row.
template <typename Real>
Var augment(Tape<Real>& tape, Var features, double keep_ratio, Rng& rng) {
  const std::size_t n = tape.rows(features), D = tape.cols(features);
  std::vector<Real> masks;
  masks.reserve(n * D);
  for (std::size_t i = 0; i < n; ++i) {
    auto m = make_feature_mask(D, keep_ratio, rng);
    masks.insert(masks.end(), m.begin(), m.end());
  }
  return tape.mul(features, tape.constant(tape.shape(features), std::move(masks)));
}

// ---------------------------------------------------------------------------
// Momentum key encoder
// ---------------------------------------------------------------------------

/// Shadow copy G' of the item tower. Never receives gradient.
template <typename Real>
struct KeyEncoderState {
  TowerWeights<Real> weights;
  double momentum = 0.999;

  static KeyEncoderState copy_of(const TowerWeights<Real>& g, double momentum) {
    KeyEncoderState s;
    s.weights = g;
    for (Tensor<Real>* t : {&s.weights.w1, &s.weights.b1, &s.weights.w2, &s.weights.b2}) {
      t->set_requires_grad(false);
    }
    s.momentum = momentum;
    return s;
  }

  std::vector<Tensor<Real>*> tensors() {
    return {&weights.w1, &weights.b1, &weights.w2, &weights.b2};
  }
};

/// stop_gradient(normalize(G'(e_x'))).
template <typename Real>
Var key_encoder_forward(Tape<Real>& tape, KeyEncoderState<Real>& key, Var augmented) {
  TowerVars g{tape.param(key.weights.w1), tape.param(key.weights.b1), tape.param(key.weights.w2),
              tape.param(key.weights.b2)};
  return tape.stop_gradient(TwoTowerModel<Real>::item_tower(tape, g, augmented));
}

/// G' <- alpha * G' + (1 - alpha) * G, elementwise and in place.
template <typename Real>
void momentum_update(std::span<const Tensor<Real>* const> query, std::span<Tensor<Real>* const> key,
                     double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ParameterError("momentum must lie in [0, 1], got " + std::to_string(alpha));
  }
  if (query.size() != key.size()) throw ContractError("momentum_update: parameter lists differ");
  for (std::size_t i = 0; i < query.size(); ++i) {
    if (query[i]->shape() != key[i]->shape()) {
      throw ContractError("momentum_update: shape " + to_string(key[i]->shape()) + " vs " +
                          to_string(query[i]->shape()));
    }
  }
  for (std::size_t i = 0; i < query.size(); ++i) {
    auto g = query[i]->values();
    auto k = key[i]->values();
    for (std::size_t j = 0; j < k.size(); ++j) {
      k[j] = Real(alpha * double(k[j]) + (1.0 - alpha) * double(g[j]));
    }
  }
}

template <typename Real>
void momentum_update(const TowerWeights<Real>& query, KeyEncoderState<Real>& key) {
  const Tensor<Real>* q[] = {&query.w1, &query.b1, &query.w2, &query.b2};
  auto k = key.tensors();
  momentum_update<Real>(std::span<const Tensor<Real>* const>(q), std::span<Tensor<Real>* const>(k),
                        key.momentum);
}

// ---------------------------------------------------------------------------
// InfoNCE
// ---------------------------------------------------------------------------

/// -(1/B) sum_x log softmax_j(s(q_x, k_j) / T)[x] with cosine s. Row x of
/// `keys` is the positive for query x. By default the other B-1 keys of the
/// batch are the negatives; with `negatives` (B x J indices into `keys`) each
/// row uses its own J keys instead.
template <typename Real>
Var info_nce_loss(Tape<Real>& tape, Var queries, Var keys, Real temperature,
                  const std::vector<std::size_t>* negatives = nullptr, std::size_t J = 0) {
  const std::size_t B = tape.rows(queries);
  if (!(temperature > Real(0))) throw ParameterError("T_ssl must be positive");
  Var q = tape.l2_normalize_rows(queries);
  Var k = tape.l2_normalize_rows(keys);
  if (!negatives) {
    if (B < 2) throw ContractError("InfoNCE needs at least two samples for in-batch negatives");
    if (tape.rows(keys) != B) throw DimensionError("InfoNCE: queries and keys differ in rows");
    Var logits = tape.scale(tape.matmul(q, k, true), Real(1) / temperature);
    std::vector<std::size_t> targets(B);
    std::iota(targets.begin(), targets.end(), 0);
    return tape.softmax_cross_entropy(logits, std::move(targets));
  }
  if (J == 0) throw ContractError("InfoNCE: sampled variant needs at least one negative");
  if (negatives->size() != B * J) throw DimensionError("InfoNCE: negative table has wrong size");
  std::vector<std::size_t> index;
  index.reserve(B * (J + 1));
  for (std::size_t x = 0; x < B; ++x) {
    index.push_back(x);
    for (std::size_t j = 0; j < J; ++j) index.push_back((*negatives)[x * J + j]);
  }
  Var all = tape.scale(tape.matmul(q, k, true), Real(1) / temperature);
  Var logits = tape.select_per_row(all, std::move(index), J + 1);
  return tape.softmax_cross_entropy(logits, std::vector<std::size_t>(B, 0));
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

struct KMeansResult {
  Tensor<float> centroids;              // C x d
  std::vector<std::size_t> assignment;  // per point
  std::vector<std::size_t> sizes;       // per cluster
  std::vector<double> objective;        // sum of squared distances, per iteration
  std::size_t iterations = 0;
};

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached. A point only moves to a strictly closer
/// centroid, and an empty cluster is re-seeded with the point farthest from
/// its centroid, so the objective never increases.
inline KMeansResult kmeans_cluster(const Tensor<float>& points, std::size_t n_clusters,
                                   std::size_t max_iters, Rng& rng) {
  const std::size_t M = points.rows(), d = points.cols();
  if (n_clusters == 0) throw ParameterError("k-means needs at least one cluster");
  if (M < n_clusters) {
    throw ParameterError("k-means: " + std::to_string(M) + " points cannot fill " +
                         std::to_string(n_clusters) + " clusters");
  }
  auto P = points.values();
  std::vector<double> C(n_clusters * d);
  auto dist2 = [&](std::size_t i, std::size_t c) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = double(P[i * d + j]) - C[c * d + j];
      s += diff * diff;
    }
    return s;
  };
  auto set_centroid = [&](std::size_t c, std::size_t i) {
    for (std::size_t j = 0; j < d; ++j) C[c * d + j] = double(P[i * d + j]);
  };

  // k-means++ seeding.
  std::vector<double> nearest(M, std::numeric_limits<double>::infinity());
  set_centroid(0, std::uniform_int_distribution<std::size_t>(0, M - 1)(rng));
  for (std::size_t c = 1; c < n_clusters; ++c) {
    double total = 0;
    for (std::size_t i = 0; i < M; ++i) {
      nearest[i] = std::min(nearest[i], dist2(i, c - 1));
      total += nearest[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      std::discrete_distribution<std::size_t> dd(nearest.begin(), nearest.end());
      pick = dd(rng);
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, M - 1)(rng);
    }
    set_centroid(c, pick);
  }

  KMeansResult r;
  r.assignment.assign(M, 0);
  std::vector<double> cost(M);
  bool first = true;
  for (std::size_t it = 0; it < max_iters; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < M; ++i) {
      std::size_t best = first ? 0 : r.assignment[i];
      double best_d = dist2(i, best);
      for (std::size_t c = 0; c < n_clusters; ++c) {
        const double dc = dist2(i, c);
        if (dc < best_d) {
          best_d = dc;
          best = c;
        }
      }
      if (first || best != r.assignment[i]) changed = true;
      r.assignment[i] = best;
      cost[i] = best_d;
    }
    r.sizes.assign(n_clusters, 0);
    for (std::size_t a : r.assignment) ++r.sizes[a];
    for (std::size_t c = 0; c < n_clusters; ++c) {
      if (r.sizes[c] > 0) continue;
      std::size_t far = M;
      double far_d = -1;
      for (std::size_t i = 0; i < M; ++i) {
        if (r.sizes[r.assignment[i]] > 1 && cost[i] > far_d) {
          far_d = cost[i];
          far = i;
        }
      }
      if (far == M) break;
      --r.sizes[r.assignment[far]];
      set_centroid(c, far);
      r.assignment[far] = c;
      cost[far] = 0;
      r.sizes[c] = 1;
      changed = true;
    }
    first = false;
    if (!changed) break;
    std::fill(C.begin(), C.end(), 0.0);
    for (std::size_t i = 0; i < M; ++i) {
      const std::size_t c = r.assignment[i];
      for (std::size_t j = 0; j < d; ++j) C[c * d + j] += double(P[i * d + j]);
    }
    for (std::size_t c = 0; c < n_clusters; ++c) {
      for (std::size_t j = 0; j < d; ++j) C[c * d + j] /= double(r.sizes[c]);
    }
    double obj = 0;
    for (std::size_t i = 0; i < M; ++i) obj += dist2(i, r.assignment[i]);
    r.objective.push_back(obj);
    r.iterations = it + 1;
  }
  r.centroids = Tensor<float>({n_clusters, d});
  for (std::size_t i = 0; i < C.size(); ++i) r.centroids[i] = float(C[i]);
  return r;
}

// ---------------------------------------------------------------------------
// Prototypes
// ---------------------------------------------------------------------------

inline constexpr double kDefaultTauMin = 0.05;

/// sum ||e - c|| / (N ln(N + 1)), floored at tau_min.
inline double concentration_tau(std::span<const double> member_distances, double tau_min) {
  const std::size_t n = member_distances.size();
  if (n == 0) throw ContractError("concentration_tau: empty cluster");
  double s = 0;
  for (double v : member_distances) s += v;
  const double tau = s / (double(n) * std::log(double(n) + 1.0));
  return std::max(tau, tau_min);
}

struct PrototypeSet {
  static constexpr std::int64_t kUnassigned = -1;

  Tensor<float> centroids;               // C x d
  std::vector<std::int64_t> assignment;  // per item; kUnassigned if not clustered
  std::vector<std::size_t> sizes;
  std::vector<double> tau;
  std::size_t epoch = 0;

  std::size_t n_clusters() const { return sizes.size(); }
  bool empty() const { return sizes.empty(); }

  /// Cluster of `item`; items outside the clustered subset go to the centroid
  /// with the highest cosine to `embedding`.
  std::size_t cluster_of(std::size_t item, std::span<const float> embedding) const {
    if (item < assignment.size() && assignment[item] != kUnassigned) {
      return std::size_t(assignment[item]);
    }
    std::size_t best = 0;
    double best_s = -std::numeric_limits<double>::infinity();
    const std::size_t d = centroids.cols();
    for (std::size_t c = 0; c < n_clusters(); ++c) {
      double dot = 0, nc = 0, ne = 0;
      for (std::size_t j = 0; j < d; ++j) {
        dot += double(centroids.at(c, j)) * double(embedding[j]);
        nc += double(centroids.at(c, j)) * double(centroids.at(c, j));
        ne += double(embedding[j]) * double(embedding[j]);
      }
      const double s = dot / (std::max(std::sqrt(nc), kNormFloor) * std::max(std::sqrt(ne), kNormFloor));
      if (s > best_s) {
        best_s = s;
        best = c;
      }
    }
    return best;
  }
};

/// Clusters key-encoder outputs (one row per entry of `items`) and derives
/// per-cluster concentration temperatures.
inline PrototypeSet build_prototypes(const Tensor<float>& keys, std::span<const std::size_t> items,
                                     std::size_t n_items, std::size_t n_clusters,
                                     std::size_t max_iters, double tau_min, Rng& rng) {
  if (keys.rows() != items.size()) throw DimensionError("build_prototypes: one key per item");
  auto km = kmeans_cluster(keys, n_clusters, max_iters, rng);
  PrototypeSet p;
  p.centroids = km.centroids;
  p.sizes = km.sizes;
  p.assignment.assign(n_items, PrototypeSet::kUnassigned);
  const std::size_t d = keys.cols();
  std::vector<std::vector<double>> dists(n_clusters);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::size_t c = km.assignment[i];
    p.assignment[items[i]] = std::int64_t(c);
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = double(keys.at(i, j)) - double(km.centroids.at(c, j));
      s += diff * diff;
    }
    dists[c].push_back(std::sqrt(s));
  }
  for (std::size_t c = 0; c < n_clusters; ++c) p.tau.push_back(concentration_tau(dists[c], tau_min));
  return p;
}

/// Prototype contrastive loss. Each query is pulled toward its own cluster
/// centroid against r centroids drawn without replacement from the other
/// clusters; every logit is divided by its own cluster's tau.
template <typename Real>
Var prototype_loss(Tape<Real>& tape, Var queries, std::span<const std::size_t> items,
                   const PrototypeSet& protos, std::size_t r, Rng& rng) {
  const std::size_t B = tape.rows(queries), C = protos.n_clusters();
  if (r == 0) throw ParameterError("prototype loss needs r >= 1 negative prototypes");
  if (C < 2 || r > C - 1) {
    throw ParameterError("prototype loss: r=" + std::to_string(r) + " needs at least r+1 clusters, have " +
                         std::to_string(C));
  }
  if (items.size() != B) throw DimensionError("prototype_loss: one item per query");
  const std::size_t d = protos.centroids.cols();
  Var q = tape.l2_normalize_rows(queries);
  auto qv = tape.value(q);

  std::vector<Real> cent(protos.centroids.values().begin(), protos.centroids.values().end());
  Var cn = tape.l2_normalize_rows(tape.constant({C, d}, std::move(cent)));
  Var sims = tape.matmul(q, cn, true);

  std::vector<std::size_t> index;
  std::vector<Real> inv_tau;
  index.reserve(B * (r + 1));
  std::vector<std::size_t> others(C - 1);
  std::vector<float> emb(d);
  for (std::size_t x = 0; x < B; ++x) {
    for (std::size_t j = 0; j < d; ++j) emb[j] = float(qv[x * d + j]);
    const std::size_t own = protos.cluster_of(items[x], emb);
    std::size_t w = 0;
    for (std::size_t c = 0; c < C; ++c)
      if (c != own) others[w++] = c;
    for (std::size_t j = 0; j < r; ++j) {
      std::uniform_int_distribution<std::size_t> dist(j, others.size() - 1);
      std::swap(others[j], others[dist(rng)]);
    }
    index.push_back(own);
    inv_tau.push_back(Real(1.0 / protos.tau[own]));
    for (std::size_t j = 0; j < r; ++j) {
      index.push_back(others[j]);
      inv_tau.push_back(Real(1.0 / protos.tau[others[j]]));
    }
  }
  Var picked = tape.select_per_row(sims, std::move(index), r + 1);
  Var logits = tape.mul(picked, tape.constant({B, r + 1}, std::move(inv_tau)));
  return tape.softmax_cross_entropy(logits, std::vector<std::size_t>(B, 0));
}

/// CSV `cluster_id,n_c,tau_c,c_1..c_d`.
inline void write_prototypes_csv(const PrototypeSet& p, std::ostream& out) {
  const std::size_t d = p.centroids.cols();
  out << "cluster_id,n_c,tau_c";
  for (std::size_t j = 0; j < d; ++j) out << ",c_" << (j + 1);
  out << '\n' << std::setprecision(9);
  for (std::size_t c = 0; c < p.n_clusters(); ++c) {
    out << c << ',' << p.sizes[c] << ',' << std::setprecision(17) << p.tau[c]
        << std::setprecision(9);
    for (std::size_t j = 0; j < d; ++j) out << ',' << p.centroids.at(c, j);
    out << '\n';
  }
}

/// Adjusted Rand index between two labelings of the same points.
inline double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) throw DimensionError("adjusted_rand_index: label lists differ in length");
  const std::size_t n = a.size();
  const std::size_t ka = a.empty() ? 0 : *std::max_element(a.begin(), a.end()) + 1;
  const std::size_t kb = b.empty() ? 0 : *std::max_element(b.begin(), b.end()) + 1;
  std::vector<double> table(ka * kb, 0.0), ra(ka, 0.0), rb(kb, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    table[a[i] * kb + b[i]] += 1;
    ra[a[i]] += 1;
    rb[b[i]] += 1;
  }
  auto c2 = [](double x) { return x * (x - 1) / 2; };
  double index = 0, sa = 0, sb = 0;
  for (double v : table) index += c2(v);
  for (double v : ra) sa += c2(v);
  for (double v : rb) sb += c2(v);
  const double expected = sa * sb / c2(double(n));
  const double max_index = (sa + sb) / 2;
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

}  // namespace pcldcg
