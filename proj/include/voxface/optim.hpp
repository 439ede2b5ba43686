// Copyright 2026 Voxface Authors
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

#pragma once

#include <functional>

#include "voxface/tensor.hpp"

namespace voxface {

/// Adam with bias correction. Moment buffers are keyed by parameter order and
/// created lazily on the first step.
struct AdamState {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One Adam update over `params`, consuming each parameter's .grad().
inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), 0.0);
      state.v[i].assign(params[i].size(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw ShapeError(cat("adam_step: state tracks ", state.m.size(), " parameters, got ",
                         params.size()));
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.requires_grad())
      throw Error(cat("adam_step: parameter ", i, " does not require gradients"));
    const std::vector<double>& g = p.grad();
    if (state.m[i].size() != p.size())
      throw ShapeError(cat("adam_step: moment shape ", state.m[i].size(),
                           " does not match parameter of ", p.size(), " elements"));
    auto& vals = p.raw_values();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      state.m[i][j] = state.beta1 * state.m[i][j] + (1.0 - state.beta1) * g[j];
      state.v[i][j] = state.beta2 * state.v[i][j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = state.m[i][j] / bc1;
      const double vhat = state.v[i][j] / bc2;
      vals[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    if (!all_finite(vals)) throw NumericError(cat("adam_step: parameter ", i, " became non-finite"));
  }
}

/// Central finite-difference check of a scalar function's analytic gradients.
/// Returns the max over all coordinates of |analytic - fd| / max(1, |analytic|).
inline double gradient_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                             std::vector<Tensor> point, double h) {
  if (h <= 0.0) throw Error("gradient_check: step must be positive");
  for (Tensor& p : point) p.set_requires_grad(true);
  tape().clear();
  Tensor loss = f(point);
  if (loss.size() != 1)
    throw ShapeError(cat("gradient_check: function returned shape ", loss.shape()));
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (Tensor& p : point) analytic.push_back(p.grad());

  double max_rel = 0.0;
  NoGradGuard ng;
  for (std::size_t pi = 0; pi < point.size(); ++pi) {
    auto& vals = point[pi].raw_values();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double orig = vals[j];
      vals[j] = orig + h;
      const double fp = f(point).value();
      vals[j] = orig - h;
      const double fm = f(point).value();
      vals[j] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("gradient_check: non-finite function evaluation");
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][j];
      const double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace voxface
