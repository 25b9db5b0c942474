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
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <type_traits>
#include <vector>

#include <spdlog/spdlog.h>

#include "pcldcg/errors.hpp"
#include "pcldcg/tensor.hpp"

namespace pcldcg {

/// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// How the masked multi-interest combination routes gradients into the mask.
enum class CombineMode {
  // out = sum_k mask_k * (M_k - M_{k-1}) with M_k the prefix max of the
  // interest similarities; equals the max over a prefix mask in the forward
  // pass and gives every mask entry its marginal gain as gradient.
  kTelescoped,
  // out = max_k (mask_k * c_k - (1 - mask_k) * 1e4).
  kPenalty,
};

inline constexpr double kNormFloor = 1e-12;
inline constexpr double kMaskPenalty = 1e4;
inline constexpr double kProbClamp = 1e-7;

/// Reverse-mode tape over a fixed set of primitives.
///
/// Nodes are appended in evaluation order, so the recording order is already
/// topological; backward() walks it in reverse. Gradients accumulate
/// additively, both across fan-out inside the tape and into Tensor::grad of
/// parameter leaves. A tape is meant for one forward/backward pass.
///
/// stop_gradient values can be recorded on one tape and replayed on another.
/// The finite-difference checker uses this to hold straight-through and
/// momentum-encoder branches fixed while it perturbs inputs, which is the
/// function whose derivative the analytic pass computes.
template <typename Real>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;
  /// Reduction type: double, or Real when Real is wider.
  using Acc = std::conditional_t<(sizeof(Real) > sizeof(double)), Real, double>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // --- leaves -------------------------------------------------------------

  /// Leaf bound to an external tensor; its gradient lands in t.grad() when
  /// t.requires_grad() is set. The tensor must outlive the tape.
  Var param(Tensor<Real>& t) {
    Node n;
    n.shape = t.shape();
    n.external = &t;
    n.needs_grad = t.requires_grad();
    if (n.needs_grad) {
      n.backward = [](Tape& tape, std::size_t self) {
        auto& node = tape.nodes_[self];
        auto dst = node.external->grad();
        const auto& g = node.grad;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      };
    }
    return push(std::move(n));
  }

  /// Leaf holding a copy of `t`; never receives gradient.
  Var constant(const Tensor<Real>& t) {
    Node n;
    n.shape = t.shape();
    n.value.assign(t.values().begin(), t.values().end());
    return push(std::move(n));
  }

  Var constant(Shape shape, std::vector<Real> values) {
    if (numel(shape) != values.size()) {
      throw DimensionError("constant: shape " + pcldcg::to_string(shape) +
                           " does not match value count");
    }
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(values);
    return push(std::move(n));
  }

  // --- inspection ---------------------------------------------------------

  std::span<const Real> value(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.external) return n.external->values();
    return n.value;
  }
  const Shape& shape(Var v) const { return nodes_.at(v.id).shape; }
  std::size_t rows(Var v) const { return rows_of(shape(v)); }
  std::size_t cols(Var v) const { return cols_of(shape(v)); }
  Real item(Var v) const {
    auto s = value(v);
    if (s.size() != 1) throw ContractError("item(): tensor is not a scalar");
    return s[0];
  }
  Tensor<Real> to_tensor(Var v) const {
    auto s = value(v);
    return Tensor<Real>(shape(v), std::vector<Real>(s.begin(), s.end()));
  }
  /// Gradient accumulated at a node during backward (empty if none reached it).
  std::span<const Real> grad(Var v) const { return nodes_.at(v.id).grad; }
  std::size_t size() const { return nodes_.size(); }

  // --- stop_gradient record / replay -------------------------------------

  void record_stops(std::vector<std::vector<Real>>* sink) {
    stop_sink_ = sink;
    stop_source_ = nullptr;
  }
  void replay_stops(const std::vector<std::vector<Real>>* source) {
    stop_source_ = source;
    stop_sink_ = nullptr;
    stop_cursor_ = 0;
  }

  // --- primitives ---------------------------------------------------------

  /// C = A * B, or A * B^T when `transpose_b` is set.
  Var matmul(Var a, Var b, bool transpose_b = false) {
    const std::size_t m = rows(a), k = cols(a);
    const std::size_t bk = transpose_b ? cols(b) : rows(b);
    const std::size_t n = transpose_b ? rows(b) : cols(b);
    if (k != bk) {
      throw DimensionError("matmul: inner dimensions differ for " +
                           pcldcg::to_string(shape(a)) + " and " +
                           pcldcg::to_string(shape(b)) +
                           (transpose_b ? " (transposed)" : ""));
    }
    std::vector<Real> out(m * n, Real(0));
    auto A = value(a);
    auto B = value(b);
    for (std::size_t i = 0; i < m; ++i) {
      Real* c = out.data() + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const Real av = A[i * k + p];
        if (transpose_b) {
          for (std::size_t j = 0; j < n; ++j) c[j] += av * B[j * k + p];
        } else {
          const Real* brow = B.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
        }
      }
    }
    return op({m, n}, std::move(out), {a, b},
              [a, b, m, k, n, transpose_b](Tape& t, std::size_t self) {
                auto G = std::span<const Real>(t.nodes_[self].grad);
                auto A = t.value(a);
                auto B = t.value(b);
                if (t.needs(a)) {
                  auto gA = t.grad_ref(a);
                  for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                      const Real g = G[i * n + j];
                      if (g == Real(0)) continue;
                      for (std::size_t p = 0; p < k; ++p) {
                        gA[i * k + p] += g * (transpose_b ? B[j * k + p] : B[p * n + j]);
                      }
                    }
                  }
                }
                if (t.needs(b)) {
                  auto gB = t.grad_ref(b);
                  for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                      const Real av = A[i * k + p];
                      for (std::size_t j = 0; j < n; ++j) {
                        if (transpose_b) {
                          gB[j * k + p] += av * G[i * n + j];
                        } else {
                          gB[p * n + j] += av * G[i * n + j];
                        }
                      }
                    }
                  }
                }
              });
  }

  Var add(Var a, Var b) { return binary(a, b, "add", Real(1), Real(1)); }
  Var sub(Var a, Var b) { return binary(a, b, "sub", Real(1), Real(-1)); }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    auto A = value(a);
    auto B = value(b);
    std::vector<Real> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
    return op(shape(a), std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
      const auto& G = t.nodes_[self].grad;
      auto A = t.value(a);
      auto B = t.value(b);
      if (t.needs(a)) {
        auto g = t.grad_ref(a);
        for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i] * B[i];
      }
      if (t.needs(b)) {
        auto g = t.grad_ref(b);
        for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i] * A[i];
      }
    });
  }

  /// a (m x n) plus a length-n row broadcast over every row.
  Var add_row(Var a, Var bias) {
    const std::size_t m = rows(a), n = cols(a);
    if (value(bias).size() != n) {
      throw DimensionError("add_row: bias " + pcldcg::to_string(shape(bias)) +
                           " does not fit rows of " + pcldcg::to_string(shape(a)));
    }
    auto A = value(a);
    auto b = value(bias);
    std::vector<Real> out(A.begin(), A.end());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
    return op(shape(a), std::move(out), {a, bias}, [a, bias, m, n](Tape& t, std::size_t self) {
      const auto& G = t.nodes_[self].grad;
      if (t.needs(a)) {
        auto g = t.grad_ref(a);
        for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i];
      }
      if (t.needs(bias)) {
        auto g = t.grad_ref(bias);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += G[i * n + j];
      }
    });
  }

  Var scale(Var a, Real c) {
    auto A = value(a);
    std::vector<Real> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * c;
    return op(shape(a), std::move(out), {a}, [a, c](Tape& t, std::size_t self) {
      const auto& G = t.nodes_[self].grad;
      auto g = t.grad_ref(a);
      for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i] * c;
    });
  }

  /// Multiplies every entry of `a` by the single value held in `s`.
  Var mul_scalar(Var a, Var s) {
    if (value(s).size() != 1) {
      throw DimensionError("mul_scalar: scale has shape " + pcldcg::to_string(shape(s)));
    }
    const Real sv = value(s)[0];
    auto A = value(a);
    std::vector<Real> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * sv;
    return op(shape(a), std::move(out), {a, s}, [a, s](Tape& t, std::size_t self) {
      const auto& G = t.nodes_[self].grad;
      auto A = t.value(a);
      const Real sv = t.value(s)[0];
      if (t.needs(a)) {
        auto g = t.grad_ref(a);
        for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i] * sv;
      }
      if (t.needs(s)) {
        Acc acc = 0;
        for (std::size_t i = 0; i < G.size(); ++i) acc += Acc(G[i]) * Acc(A[i]);
        t.grad_ref(s)[0] += Real(acc);
      }
    });
  }

  Var relu(Var a) {
    auto A = value(a);
    std::vector<Real> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] > Real(0) ? A[i] : Real(0);
    return op(shape(a), std::move(out), {a}, [a](Tape& t, std::size_t self) {
      const auto& G = t.nodes_[self].grad;
      auto A = t.value(a);
      auto g = t.grad_ref(a);
      for (std::size_t i = 0; i < G.size(); ++i)
        if (A[i] > Real(0)) g[i] += G[i];
    });
  }

  Var sigmoid(Var a) {
    auto A = value(a);
    std::vector<Real> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(A[i]);
    return op(shape(a), std::move(out), {a}, [a](Tape& t, std::size_t self) {
      const auto& G = t.nodes_[self].grad;
      auto Y = t.value(Var{self});
      auto g = t.grad_ref(a);
      for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i] * Y[i] * (Real(1) - Y[i]);
    });
  }

  /// Row-wise exp(x / T) / sum_j exp(x_j / T), max-subtracted.
  Var softmax_rows(Var x, Real temperature = Real(1)) {
    if (!(temperature > Real(0))) {
      throw ParameterError("softmax temperature must be positive, got " +
                           std::to_string(Acc(temperature)));
    }
    const std::size_t m = rows(x), n = cols(x);
    if (n == 0) throw DimensionError("softmax over an empty row");
    auto X = value(x);
    std::vector<Real> out(X.size());
    for (std::size_t i = 0; i < m; ++i) {
      softmax_row(X.subspan(i * n, n), temperature, std::span<Real>(out).subspan(i * n, n));
    }
    return op(shape(x), std::move(out), {x}, [x, m, n, temperature](Tape& t, std::size_t self) {
      const auto& G = t.nodes_[self].grad;
      auto Y = t.value(Var{self});
      auto g = t.grad_ref(x);
      for (std::size_t i = 0; i < m; ++i) {
        Acc dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += Acc(G[i * n + j]) * Acc(Y[i * n + j]);
        for (std::size_t j = 0; j < n; ++j) {
          g[i * n + j] += Real(Acc(Y[i * n + j]) * (Acc(G[i * n + j]) - dot) /
                               Acc(temperature));
        }
      }
    });
  }

  /// Row-wise tail sums: y_k = sum_{j >= k} x_j.
  Var suffix_sum_rows(Var x) {
    const std::size_t m = rows(x), n = cols(x);
    auto X = value(x);
    std::vector<Real> out(X.size());
    for (std::size_t i = 0; i < m; ++i) {
      Real acc = 0;
      for (std::size_t j = n; j-- > 0;) {
        acc += X[i * n + j];
        out[i * n + j] = acc;
      }
    }
    return op(shape(x), std::move(out), {x}, [x, m, n](Tape& t, std::size_t self) {
      const auto& G = t.nodes_[self].grad;
      auto g = t.grad_ref(x);
      for (std::size_t i = 0; i < m; ++i) {
        Real acc = 0;
        for (std::size_t j = 0; j < n; ++j) {
          acc += G[i * n + j];
          g[i * n + j] += acc;
        }
      }
    });
  }

  /// Divides each row by max(||row||, 1e-12).
  Var l2_normalize_rows(Var x) {
    const std::size_t m = rows(x), n = cols(x);
    auto X = value(x);
    std::vector<Real> out(X.size());
    std::vector<Real> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
      Acc ss = 0;
      for (std::size_t j = 0; j < n; ++j) ss += Acc(X[i * n + j]) * Acc(X[i * n + j]);
      Acc nrm = std::sqrt(ss);
      if (nrm < kNormFloor) {
        spdlog::debug("l2_normalize: row {} has norm {:.3g}, clamped", i, nrm);
      }
      norms[i] = Real(nrm);
      const Acc denom = std::max(nrm, Acc(kNormFloor));
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = Real(Acc(X[i * n + j]) / denom);
    }
    return op(shape(x), std::move(out), {x},
              [x, m, n, norms = std::move(norms)](Tape& t, std::size_t self) {
                const auto& G = t.nodes_[self].grad;
                auto Y = t.value(Var{self});
                auto g = t.grad_ref(x);
                for (std::size_t i = 0; i < m; ++i) {
                  const Acc nrm = Acc(norms[i]);
                  if (nrm < kNormFloor) {
                    for (std::size_t j = 0; j < n; ++j)
                      g[i * n + j] += Real(Acc(G[i * n + j]) / kNormFloor);
                    continue;
                  }
                  Acc dot = 0;
                  for (std::size_t j = 0; j < n; ++j)
                    dot += Acc(G[i * n + j]) * Acc(Y[i * n + j]);
                  for (std::size_t j = 0; j < n; ++j) {
                    g[i * n + j] +=
                        Real((Acc(G[i * n + j]) - Acc(Y[i * n + j]) * dot) / nrm);
                  }
                }
              });
  }

  /// a.b / (||a|| ||b||) for two equal-length vectors, norms floored at 1e-12.
  Var cosine_similarity(Var a, Var b) {
    auto A = value(a);
    auto B = value(b);
    if (A.size() != B.size()) {
      throw DimensionError("cosine_similarity: " + pcldcg::to_string(shape(a)) + " vs " +
                           pcldcg::to_string(shape(b)));
    }
    Acc dot = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < A.size(); ++i) {
      dot += Acc(A[i]) * Acc(B[i]);
      sa += Acc(A[i]) * Acc(A[i]);
      sb += Acc(B[i]) * Acc(B[i]);
    }
    const Acc na = std::sqrt(sa), nb = std::sqrt(sb);
    if (na < kNormFloor || nb < kNormFloor) {
      spdlog::debug("cosine_similarity: zero-norm input (|a|={:.3g}, |b|={:.3g})", na, nb);
    }
    const Acc ca = std::max(na, Acc(kNormFloor)), cb = std::max(nb, Acc(kNormFloor));
    const Acc c = dot / (ca * cb);
    return op(Shape{}, {Real(c)}, {a, b},
              [a, b, na, nb, ca, cb, c](Tape& t, std::size_t self) {
                const Acc g = Acc(t.nodes_[self].grad[0]);
                auto A = t.value(a);
                auto B = t.value(b);
                // d/da [a.b / (ca cb)] with ca = |a| when unclamped.
                if (t.needs(a)) {
                  auto ga = t.grad_ref(a);
                  const bool free = na >= kNormFloor;
                  for (std::size_t i = 0; i < A.size(); ++i) {
                    Acc d = Acc(B[i]) / (ca * cb);
                    if (free) d -= c * Acc(A[i]) / (ca * ca);
                    ga[i] += Real(g * d);
                  }
                }
                if (t.needs(b)) {
                  auto gb = t.grad_ref(b);
                  const bool free = nb >= kNormFloor;
                  for (std::size_t i = 0; i < B.size(); ++i) {
                    Acc d = Acc(A[i]) / (ca * cb);
                    if (free) d -= c * Acc(B[i]) / (cb * cb);
                    gb[i] += Real(g * d);
                  }
                }
              });
  }

  /// Identity in the forward pass; contributes nothing to upstream gradients.
  Var stop_gradient(Var x) {
    auto X = value(x);
    std::vector<Real> out;
    if (stop_source_) {
      if (stop_cursor_ >= stop_source_->size() ||
          (*stop_source_)[stop_cursor_].size() != X.size()) {
        throw ContractError("stop_gradient replay does not match the recorded pass");
      }
      out = (*stop_source_)[stop_cursor_++];
    } else {
      out.assign(X.begin(), X.end());
      if (stop_sink_) stop_sink_->push_back(out);
    }
    Node n;
    n.shape = shape(x);
    n.value = std::move(out);
    return push(std::move(n));
  }

  /// Rows of `table` at `indices`; backward scatter-adds into the table.
  Var gather_rows(Var table, std::vector<std::size_t> indices) {
    const std::size_t r = rows(table), n = cols(table);
    auto T = value(table);
    std::vector<Real> out(indices.size() * n);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= r) {
        throw ContractError("gather_rows: index " + std::to_string(indices[i]) +
                            " out of range for " + std::to_string(r) + " rows");
      }
      std::copy_n(T.data() + indices[i] * n, n, out.data() + i * n);
    }
    const std::size_t count = indices.size();
    return op({count, n}, std::move(out), {table},
              [table, n, idx = std::move(indices)](Tape& t, std::size_t self) {
                const auto& G = t.nodes_[self].grad;
                auto g = t.grad_ref(table);
                for (std::size_t i = 0; i < idx.size(); ++i)
                  for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += G[i * n + j];
              });
  }

  Var slice_rows(Var x, std::size_t start, std::size_t count) {
    const std::size_t m = rows(x), n = cols(x);
    if (start + count > m) {
      throw DimensionError("slice_rows: [" + std::to_string(start) + ", " +
                           std::to_string(start + count) + ") exceeds " +
                           pcldcg::to_string(shape(x)));
    }
    auto X = value(x);
    std::vector<Real> out(X.begin() + start * n, X.begin() + (start + count) * n);
    return op({count, n}, std::move(out), {x}, [x, start, n](Tape& t, std::size_t self) {
      const auto& G = t.nodes_[self].grad;
      auto g = t.grad_ref(x);
      for (std::size_t i = 0; i < G.size(); ++i) g[start * n + i] += G[i];
    });
  }

  Var concat_cols(Var a, Var b) {
    const std::size_t m = rows(a), na = cols(a), nb = cols(b);
    if (rows(b) != m) {
      throw DimensionError("concat_cols: " + pcldcg::to_string(shape(a)) + " and " +
                           pcldcg::to_string(shape(b)));
    }
    auto A = value(a);
    auto B = value(b);
    std::vector<Real> out(m * (na + nb));
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(A.data() + i * na, na, out.data() + i * (na + nb));
      std::copy_n(B.data() + i * nb, nb, out.data() + i * (na + nb) + na);
    }
    return op({m, na + nb}, std::move(out), {a, b}, [a, b, m, na, nb](Tape& t, std::size_t self) {
      const auto& G = t.nodes_[self].grad;
      if (t.needs(a)) {
        auto g = t.grad_ref(a);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < na; ++j) g[i * na + j] += G[i * (na + nb) + j];
      }
      if (t.needs(b)) {
        auto g = t.grad_ref(b);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nb; ++j) g[i * nb + j] += G[i * (na + nb) + na + j];
      }
    });
  }

  /// Stacks inputs with equal column counts on top of each other.
  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t n = cols(parts[0]);
    std::size_t m = 0;
    std::vector<Real> out;
    for (Var p : parts) {
      if (cols(p) != n) {
        throw DimensionError("concat_rows: " + pcldcg::to_string(shape(parts[0])) + " and " +
                             pcldcg::to_string(shape(p)));
      }
      auto v = value(p);
      out.insert(out.end(), v.begin(), v.end());
      m += rows(p);
    }
    return op({m, n}, std::move(out), parts, [parts](Tape& t, std::size_t self) {
      const auto& G = t.nodes_[self].grad;
      std::size_t off = 0;
      for (Var p : parts) {
        const std::size_t len = t.value(p).size();
        if (t.needs(p)) {
          auto g = t.grad_ref(p);
          for (std::size_t i = 0; i < len; ++i) g[i] += G[off + i];
        }
        off += len;
      }
    });
  }

  /// out[i][j] = x[i][index[i][j]] for an m x w index table.
  Var select_per_row(Var x, std::vector<std::size_t> index, std::size_t width) {
    const std::size_t m = rows(x), n = cols(x);
    if (index.size() != m * width) {
      throw DimensionError("select_per_row: index table does not have " + std::to_string(m) +
                           " rows of width " + std::to_string(width));
    }
    auto X = value(x);
    std::vector<Real> out(m * width);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        const std::size_t c = index[i * width + j];
        if (c >= n) throw ContractError("select_per_row: column out of range");
        out[i * width + j] = X[i * n + c];
      }
    }
    return op({m, width}, std::move(out), {x},
              [x, n, width, idx = std::move(index)](Tape& t, std::size_t self) {
                const auto& G = t.nodes_[self].grad;
                auto g = t.grad_ref(x);
                for (std::size_t p = 0; p < idx.size(); ++p) {
                  g[(p / width) * n + idx[p]] += G[p];
                }
              });
  }

  Var sum(Var x) {
    auto X = value(x);
    Acc acc = 0;
    for (Real v : X) acc += Acc(v);
    return op(Shape{}, {Real(acc)}, {x}, [x](Tape& t, std::size_t self) {
      const Real g0 = t.nodes_[self].grad[0];
      auto g = t.grad_ref(x);
      for (auto& v : g) v += g0;
    });
  }

  Var mean(Var x) {
    const std::size_t n = value(x).size();
    if (n == 0) throw DimensionError("mean of an empty tensor");
    return scale(sum(x), Real(1) / Real(n));
  }

  /// Combines interest similarities (K x m) under a length-K mask into one
  /// score per column. In the forward pass, with a 0/1 prefix mask, both modes
  /// return the max over the active interests.
  Var masked_combine(Var sims, Var mask, CombineMode mode) {
    const std::size_t K = rows(sims), m = cols(sims);
    if (value(mask).size() != K) {
      throw DimensionError("masked_combine: mask " + pcldcg::to_string(shape(mask)) +
                           " does not match " + std::to_string(K) + " interests");
    }
    auto C = value(sims);
    auto s = value(mask);
    std::vector<Real> out(m);
    std::vector<std::size_t> arg(K * m);  // telescoped: prefix argmax; penalty: argmax in row 0
    std::vector<Real> prefix(K * m);
    if (mode == CombineMode::kTelescoped) {
      for (std::size_t j = 0; j < m; ++j) {
        Real best = C[j];
        std::size_t best_k = 0;
        Acc acc = 0, prev = 0;
        for (std::size_t k = 0; k < K; ++k) {
          if (C[k * m + j] > best) {
            best = C[k * m + j];
            best_k = k;
          }
          prefix[k * m + j] = best;
          arg[k * m + j] = best_k;
          acc += Acc(s[k]) * (Acc(best) - prev);
          prev = Acc(best);
        }
        out[j] = Real(acc);
      }
    } else {
      for (std::size_t j = 0; j < m; ++j) {
        Acc best = -std::numeric_limits<Acc>::infinity();
        std::size_t best_k = 0;
        for (std::size_t k = 0; k < K; ++k) {
          const Acc v = Acc(s[k]) * (Acc(C[k * m + j]) + kMaskPenalty) - kMaskPenalty;
          if (v > best) {
            best = v;
            best_k = k;
          }
        }
        out[j] = Real(best);
        arg[j] = best_k;
      }
    }
    return op({1, m}, std::move(out), {sims, mask},
              [sims, mask, K, m, mode, arg = std::move(arg), prefix = std::move(prefix)](
                  Tape& t, std::size_t self) {
                const auto& G = t.nodes_[self].grad;
                auto C = t.value(sims);
                auto s = t.value(mask);
                const bool want_c = t.needs(sims), want_s = t.needs(mask);
                std::span<Real> gc, gs;
                if (want_c) gc = t.grad_ref(sims);
                if (want_s) gs = t.grad_ref(mask);
                for (std::size_t j = 0; j < m; ++j) {
                  const Real g = G[j];
                  if (mode == CombineMode::kTelescoped) {
                    for (std::size_t k = 0; k < K; ++k) {
                      const Real prev = k ? prefix[(k - 1) * m + j] : Real(0);
                      if (want_s) gs[k] += g * (prefix[k * m + j] - prev);
                      const Real w = s[k] - (k + 1 < K ? s[k + 1] : Real(0));
                      if (want_c) gc[arg[k * m + j] * m + j] += g * w;
                    }
                  } else {
                    const std::size_t k = arg[j];
                    if (want_c) gc[k * m + j] += g * s[k];
                    if (want_s) gs[k] += Real(Acc(g) * (Acc(C[k * m + j]) + kMaskPenalty));
                  }
                }
              });
  }

  /// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels, with the
  /// probability clamped to [1e-7, 1 - 1e-7]. Accumulated in at least double.
  Var bce_with_logits(Var logits, std::vector<Real> labels) {
    auto Z = value(logits);
    if (Z.size() != labels.size() || Z.empty()) {
      throw DimensionError("bce_with_logits: " + std::to_string(Z.size()) + " logits vs " +
                           std::to_string(labels.size()) + " labels");
    }
    Acc acc = 0;
    for (std::size_t i = 0; i < Z.size(); ++i) {
      const Acc p = std::clamp(sigmoid64(Acc(Z[i])), Acc(kProbClamp), 1 - Acc(kProbClamp));
      acc -= Acc(labels[i]) * std::log(p) + (1 - Acc(labels[i])) * std::log(1 - p);
    }
    acc /= Acc(Z.size());
    return op(Shape{}, {Real(acc)}, {logits},
              [logits, y = std::move(labels)](Tape& t, std::size_t self) {
                const Acc g0 = Acc(t.nodes_[self].grad[0]);
                auto Z = t.value(logits);
                auto g = t.grad_ref(logits);
                const Acc inv = 1.0 / Acc(Z.size());
                for (std::size_t i = 0; i < Z.size(); ++i) {
                  const Acc p = sigmoid64(Acc(Z[i]));
                  if (p < kProbClamp || p > 1 - kProbClamp) continue;
                  g[i] += Real(g0 * (p - Acc(y[i])) * inv);
                }
              });
  }

  /// Mean over rows of -log softmax(row)[target].
  Var softmax_cross_entropy(Var logits, std::vector<std::size_t> targets) {
    const std::size_t m = rows(logits), n = cols(logits);
    if (targets.size() != m || m == 0) {
      throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                           " targets for " + pcldcg::to_string(shape(logits)));
    }
    auto Z = value(logits);
    std::vector<Real> probs(m * n);
    Acc acc = 0;
    for (std::size_t i = 0; i < m; ++i) {
      if (targets[i] >= n) throw ContractError("softmax_cross_entropy: target out of range");
      Acc mx = -std::numeric_limits<Acc>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, Acc(Z[i * n + j]));
      Acc se = 0;
      for (std::size_t j = 0; j < n; ++j) se += std::exp(Acc(Z[i * n + j]) - mx);
      const Acc lse = mx + std::log(se);
      for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = Real(std::exp(Acc(Z[i * n + j]) - lse));
      acc += lse - Acc(Z[i * n + targets[i]]);
    }
    acc /= Acc(m);
    return op(Shape{}, {Real(acc)}, {logits},
              [logits, m, n, tg = std::move(targets), P = std::move(probs)](Tape& t,
                                                                           std::size_t self) {
                const Real g0 = t.nodes_[self].grad[0] / Real(m);
                auto g = t.grad_ref(logits);
                for (std::size_t i = 0; i < m; ++i) {
                  for (std::size_t j = 0; j < n; ++j) {
                    g[i * n + j] += g0 * (P[i * n + j] - (j == tg[i] ? Real(1) : Real(0)));
                  }
                }
              });
  }

  // --- backward -----------------------------------------------------------

  /// Populates gradients for everything reachable from `loss`, which must hold
  /// exactly one element.
  void backward(Var loss) {
    Node& l = nodes_.at(loss.id);
    if (numel(l.shape) != 1) {
      throw ContractError("backward: loss must be scalar, got shape " +
                          pcldcg::to_string(l.shape));
    }
    if (!l.needs_grad) return;
    grad_ref(loss)[0] += Real(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  static Real stable_sigmoid(Real x) {
    if (x >= Real(0)) {
      const Real e = std::exp(-x);
      return Real(1) / (Real(1) + e);
    }
    const Real e = std::exp(x);
    return e / (Real(1) + e);
  }

  static Acc sigmoid64(Acc x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const Acc e = std::exp(x);
    return e / (1.0 + e);
  }

  static void softmax_row(std::span<const Real> x, Real temperature, std::span<Real> out) {
    Acc mx = -std::numeric_limits<Acc>::infinity();
    for (Real v : x) mx = std::max(mx, Acc(v) / Acc(temperature));
    Acc se = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const Acc e = std::exp(Acc(x[j]) / Acc(temperature) - mx);
      out[j] = Real(e);
      se += e;
    }
    for (auto& v : out) v = Real(Acc(v) / se);
  }

 private:
  struct Node {
    Shape shape;
    std::vector<Real> value;
    Tensor<Real>* external = nullptr;
    std::vector<Real> grad;
    bool needs_grad = false;
    Backward backward;
  };

  static std::size_t rows_of(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
  static std::size_t cols_of(const Shape& s) { return s.empty() ? 1 : s.back(); }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  std::span<Real> grad_ref(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad.assign(numel(n.shape), Real(0));
    return n.grad;
  }

  Var op(Shape shape, std::vector<Real> value, std::initializer_list<Var> inputs, Backward bw) {
    return op(std::move(shape), std::move(value), std::vector<Var>(inputs), std::move(bw));
  }

  Var op(Shape shape, std::vector<Real> value, const std::vector<Var>& inputs, Backward bw) {
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    for (Var in : inputs) n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
    if (n.needs_grad) n.backward = std::move(bw);
    return push(std::move(n));
  }

  void check_same(Var a, Var b, const char* what) const {
    if (rows(a) != rows(b) || cols(a) != cols(b)) {
      throw DimensionError(std::string(what) + ": shapes " + pcldcg::to_string(shape(a)) +
                           " and " + pcldcg::to_string(shape(b)) + " differ");
    }
  }

  Var binary(Var a, Var b, const char* what, Real ca, Real cb) {
    check_same(a, b, what);
    auto A = value(a);
    auto B = value(b);
    std::vector<Real> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ca * A[i] + cb * B[i];
    return op(shape(a), std::move(out), {a, b}, [a, b, ca, cb](Tape& t, std::size_t self) {
      const auto& G = t.nodes_[self].grad;
      if (t.needs(a)) {
        auto g = t.grad_ref(a);
        for (std::size_t i = 0; i < G.size(); ++i) g[i] += ca * G[i];
      }
      if (t.needs(b)) {
        auto g = t.grad_ref(b);
        for (std::size_t i = 0; i < G.size(); ++i) g[i] += cb * G[i];
      }
    });
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<Real>>* stop_sink_ = nullptr;
  const std::vector<std::vector<Real>>* stop_source_ = nullptr;
  std::size_t stop_cursor_ = 0;
};

}  // namespace pcldcg
