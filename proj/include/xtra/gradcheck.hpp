// Copyright 2026 The xtra Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Central-difference gradient check. Analytic gradients come from the model
// under test; numeric ones are taken on a replica whose loss is evaluated in
// double precision, so perturbation noise stays far below the tolerance.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "xtra/errors.hpp"
#include "xtra/layers.hpp"

namespace xtra {

struct GradCheckOptions {
  double eps = 1e-3;
  std::size_t samples = 100;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// analytic[i] and numeric[i] must describe the same parameter. loss(backward)
// is called once with true after zeroing `analytic` grads, then repeatedly
// with false while entries of `numeric` are perturbed.
template <class TA, class TN, class AnalyticLoss, class NumericLoss>
GradCheckReport compare_gradients(const ParameterList<TA>& analytic, AnalyticLoss&& analytic_loss,
                                  const ParameterList<TN>& numeric, NumericLoss&& numeric_loss,
                                  const GradCheckOptions& options) {
  if (analytic.size() != numeric.size()) throw DimensionError("gradient check: parameter lists differ in length");
  std::size_t total = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    if (analytic[i]->value.size() != numeric[i]->value.size())
      throw DimensionError("gradient check: parameter " + analytic[i]->name + " differs in size");
    total += analytic[i]->value.size();
  }
  if (total == 0) throw DimensionError("gradient check: no parameters");

  zero_grads(analytic);
  const double base = analytic_loss(true);
  if (!std::isfinite(base)) throw NumericError("gradient check: loss is not finite (" + std::to_string(base) + ")");

  Rng rng(options.seed);
  GradCheckReport report;
  for (std::size_t s = 0; s < options.samples; ++s) {
    std::uint64_t flat = rng.below(total);
    std::size_t p = 0;
    while (flat >= analytic[p]->value.size()) flat -= analytic[p++]->value.size();
    auto& slot = numeric[p]->value.data()[flat];
    const TN original = slot;
    slot = static_cast<TN>(static_cast<double>(original) + options.eps);
    const double plus = numeric_loss(false);
    slot = static_cast<TN>(static_cast<double>(original) - options.eps);
    const double minus = numeric_loss(false);
    slot = original;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericError("gradient check: non-finite loss while perturbing " + numeric[p]->name);
    }
    const double num = (plus - minus) / (2.0 * options.eps);
    const double ana = static_cast<double>(analytic[p]->grad.data()[flat]);
    const double rel = std::abs(ana - num) / (std::abs(num) + 1e-8);
    ++report.coordinates;
    if (rel > report.max_relative_error || report.coordinates == 1) {
      report.max_relative_error = rel;
      report.worst_parameter = analytic[p]->name + "[" + std::to_string(flat) + "]";
      report.worst_analytic = ana;
      report.worst_numeric = num;
    }
  }
  return report;
}

// Same-precision check: `loss(backward)` evaluates the model owning `params`.
template <class T, class LossFn>
GradCheckReport finite_difference_check(LossFn&& loss, const ParameterList<T>& params,
                                        const GradCheckOptions& options = {}) {
  return compare_gradients<T, T>(params, loss, params, loss, options);
}

// Mixed-precision check for any block exposing parameters() and cast<U>():
// `loss(model, backward)` must be generic over the model's scalar type.
template <class Model, class LossFn>
GradCheckReport finite_difference_check_model(Model& model, LossFn&& loss, const GradCheckOptions& options = {}) {
  auto oracle = model.template cast<double>();
  auto analytic = model.parameters();
  auto numeric = oracle.parameters();
  return compare_gradients<typename Model::scalar_type, double>(
      analytic, [&](bool backward) { return loss(model, backward); }, numeric,
      [&](bool backward) { return loss(oracle, backward); }, options);
}

}  // namespace xtra
