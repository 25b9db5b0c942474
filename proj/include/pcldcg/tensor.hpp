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

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pcldcg/errors.hpp"

namespace pcldcg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array. Rank 0, 1 and 2 are what the library uses; a rank-1
/// tensor of length n behaves as a 1 x n row wherever a matrix is expected.
///
/// `grad` is non-empty exactly when `requires_grad` is set, and then has the
/// same number of elements as `values`.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0))
      : shape_(std::move(shape)), values_(numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<Real> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (numel(shape_) != values_.size()) {
      throw DimensionError("tensor shape " + pcldcg::to_string(shape_) +
                           " does not match " +
                           std::to_string(values_.size()) + " values");
    }
  }

  static Tensor vector(std::initializer_list<Real> v) {
    return Tensor({v.size()}, std::vector<Real>(v));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<Real>> rows) {
    std::vector<Real> v;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      v.insert(v.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(v));
  }

  static Tensor scalar(Real x) { return Tensor(Shape{}, std::vector<Real>{x}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }

  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const {
    if (shape_.empty()) return 1;
    return shape_.back();
  }

  std::span<Real> values() { return values_; }
  std::span<const Real> values() const { return values_; }
  std::vector<Real>& storage() { return values_; }
  const std::vector<Real>& storage() const { return values_; }

  Real& operator[](std::size_t i) { return values_[i]; }
  Real operator[](std::size_t i) const { return values_[i]; }
  Real& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  Real at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<Real> row(std::size_t r) { return {values_.data() + r * cols(), cols()}; }
  std::span<const Real> row(std::size_t r) const {
    return {values_.data() + r * cols(), cols()};
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on) {
      grad_.assign(values_.size(), Real(0));
    } else {
      grad_.clear();
    }
  }
  std::span<Real> grad() { return grad_; }
  std::span<const Real> grad() const { return grad_; }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), Real(0)); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    for (std::size_t i = 0; i < values_.size(); ++i) out[i] = static_cast<Other>(values_[i]);
    if (requires_grad_) out.set_requires_grad(true);
    return out;
  }

 private:
  Shape shape_;
  std::vector<Real> values_;
  bool requires_grad_ = false;
  std::vector<Real> grad_;
};

/// A learnable tensor with a stable name, used by the optimizer and the
/// checkpoint writer.
template <typename Real>
struct Parameter {
  std::string name;
  Tensor<Real>* tensor;
};

}  // namespace pcldcg
