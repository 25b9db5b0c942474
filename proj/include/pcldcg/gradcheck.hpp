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
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pcldcg/tape.hpp"
#include "pcldcg/tensor.hpp"

namespace pcldcg {

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;

  bool passed(double rtol) const { return max_rel_error < rtol; }
};

struct GradcheckOptions {
  double step = 1e-3;
  // Added to the first analytic coordinate; lets tests confirm the harness
  // actually reports a broken gradient.
  double inject_error = 0.0;
};

/// Compares the tape gradient of a scalar function against central
/// differences over every coordinate of `params`:
///   max |analytic - central| / (|central| + 1e-8).
///
/// `f` must register each parameter through tape.param() and rebuild any
/// randomness identically on every call. stop_gradient values from the first
/// evaluation are replayed on the perturbed ones.
template <typename Real>
GradcheckResult gradcheck_parameters(const std::function<Var(Tape<Real>&)>& f,
                                     std::span<const Parameter<Real>> params,
                                     const GradcheckOptions& options = {}) {
  for (const auto& p : params) {
    if (!p.tensor->requires_grad()) p.tensor->set_requires_grad(true);
    p.tensor->zero_grad();
  }
  std::vector<std::vector<Real>> frozen;
  {
    Tape<Real> tape;
    tape.record_stops(&frozen);
    Var loss = f(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<Real>> analytic;
  for (const auto& p : params) {
    analytic.emplace_back(p.tensor->grad().begin(), p.tensor->grad().end());
  }
  if (!analytic.empty() && !analytic[0].empty()) analytic[0][0] += Real(options.inject_error);

  auto evaluate = [&]() {
    Tape<Real> tape;
    tape.replay_stops(&frozen);
    return tape.item(f(tape));
  };

  GradcheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].tensor->values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const Real saved = values[j];
      const Real h = Real(options.step);
      values[j] = saved + h;
      const Real up = evaluate();
      values[j] = saved - h;
      const Real down = evaluate();
      values[j] = saved;
      // Difference in Real so a wider type keeps its precision.
      const double numeric = double((up - down) / ((values[j] + h) - (values[j] - h)));
      const double a = double(analytic[pi][j]);
      const double err = std::abs(a - numeric) / (std::abs(numeric) + 1e-8);
      ++result.coordinates;
      if (err > result.max_rel_error || result.coordinates == 1) {
        result.max_rel_error = err;
        result.worst_parameter = params[pi].name;
        result.worst_index = j;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

/// Single-input form: `f` maps a leaf holding x to a scalar.
template <typename Real>
double finite_difference_gradcheck(const std::function<Var(Tape<Real>&, Var)>& f,
                                   Tensor<Real> x, double step) {
  x.set_requires_grad(true);
  Parameter<Real> p{"x", &x};
  GradcheckOptions options;
  options.step = step;
  return gradcheck_parameters<Real>([&](Tape<Real>& tape) { return f(tape, tape.param(x)); },
                                    std::span<const Parameter<Real>>(&p, 1), options)
      .max_rel_error;
}

}  // namespace pcldcg
