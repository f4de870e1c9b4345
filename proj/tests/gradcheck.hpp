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

// Central finite-difference checker shared by the unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "covidcaps/autodiff.hpp"

namespace gradcheck {

struct Result {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst = 0;
  double pass_fraction() const {
    return checked ? static_cast<double>(passed) / static_cast<double>(checked) : 1.0;
  }
};

/// Compares the analytic gradient of `loss()` w.r.t. every element of
/// `inputs` against (f(x+h) − f(x−h)) / 2h. An element passes when the
/// relative error is below `tol` or both values are at most `floor` in
/// magnitude.
template <typename T>
Result check(const std::function<covidcaps::Var<T>()>& loss,
             std::vector<covidcaps::Var<T>*> inputs, double h = 1e-3, double tol = 1e-3,
             double floor = 1e-6) {
  for (auto* v : inputs) {
    v->set_requires_grad(true);
    v->clear_grad();
  }
  covidcaps::backward(loss());
  Result r;
  for (auto* v : inputs) {
    const auto analytic = v->grad();
    auto& x = v->mutable_value();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T orig = x[i];
      double fp, fm;
      {
        covidcaps::NoGradGuard g;
        x[i] = orig + static_cast<T>(h);
        fp = loss().value()[0];
        x[i] = orig - static_cast<T>(h);
        fm = loss().value()[0];
      }
      x[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[i];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double rel = scale > 0 ? std::abs(a - numeric) / scale : 0.0;
      ++r.checked;
      if (rel < tol || scale <= floor) {
        ++r.passed;
      } else {
        r.worst = std::max(r.worst, rel);
      }
    }
  }
  return r;
}

template <typename T>
covidcaps::Tensor<T> random_tensor(covidcaps::Shape shape, std::mt19937_64& rng,
                                   double lo = -1, double hi = 1) {
  covidcaps::Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

}  // namespace gradcheck
