/*
 * Copyright 2026 The covidcaps Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <map>
#include <string>

#include "covidcaps/model.hpp"

namespace covidcaps {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0)) throw ParameterError("adam: lr must be > 0");
    if (!(beta1 >= 0 && beta1 < 1)) throw ParameterError("adam: beta1 must be in [0,1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw ParameterError("adam: beta2 must be in [0,1)");
    if (!(eps > 0)) throw ParameterError("adam: eps must be > 0");
  }
};

template <std::floating_point T>
struct AdamState {
  AdamConfig config;
  std::size_t step = 0;
  std::map<std::string, Tensor<T>> first_moment;
  std::map<std::string, Tensor<T>> second_moment;
};

/// One bias-corrected Adam update over the trainable parameters of `store`.
/// Frozen parameters and buffers are skipped whatever their gradients hold.
template <std::floating_point T>
void adam_step(ParameterStore<T>& store, AdamState<T>& state) {
  state.config.validate();
  for (const auto& p : store.entries()) {
    if (p.trainable && !p.buffer && !p.var.has_grad()) {
      throw ContractError("adam: trainable parameter " + p.name + " has no gradient");
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double corr1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double corr2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (auto& p : store.entries()) {
    if (!p.trainable || p.buffer) continue;
    Tensor<T>& value = p.var.mutable_value();
    const Tensor<T>& grad = p.var.raw_grad();
    value.require_same_shape(grad, "adam gradient");
    auto [m_it, m_new] = state.first_moment.try_emplace(p.name, value.shape());
    auto [v_it, v_new] = state.second_moment.try_emplace(p.name, value.shape());
    Tensor<T>& m = m_it->second;
    Tensor<T>& v = v_it->second;
    if (!m.same_shape(value)) m = Tensor<T>(value.shape());
    if (!v.same_shape(value)) v = Tensor<T>(value.shape());
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / corr1;
      const double vhat = vi / corr2;
      value[i] = static_cast<T>(value[i] - c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

}  // namespace covidcaps
