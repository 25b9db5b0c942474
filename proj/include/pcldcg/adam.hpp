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

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pcldcg/errors.hpp"
#include "pcldcg/tensor.hpp"

namespace pcldcg {

/// Bias-corrected Adam. Moment buffers mirror the parameter list passed to
/// adam_step() and are created on the first step.
template <typename Real>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor<Real>> m;
  std::vector<Tensor<Real>> v;
};

template <typename Real>
void adam_step(std::span<const Parameter<Real>> params, AdamState<Real>& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor->shape());
      state.v.emplace_back(p.tensor->shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<Real>& t = *params[i].tensor;
    if (!t.requires_grad() || t.grad().size() != t.size()) {
      throw ContractError("adam_step: parameter '" + params[i].name + "' has no gradient");
    }
    if (state.m[i].size() != t.size()) {
      throw ContractError("adam_step: moment buffers for '" + params[i].name +
                          "' do not match its shape " + to_string(t.shape()));
    }
  }
  state.step += 1;
  const double t = double(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Real>& p = *params[i].tensor;
    auto theta = p.values();
    auto g = p.grad();
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = double(g[j]);
      const double mj = state.beta1 * double(m[j]) + (1.0 - state.beta1) * gj;
      const double vj = state.beta2 * double(v[j]) + (1.0 - state.beta2) * gj * gj;
      m[j] = Real(mj);
      v[j] = Real(vj);
      const double mhat = mj / c1;
      const double vhat = vj / c2;
      theta[j] = Real(double(theta[j]) - state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

}  // namespace pcldcg
