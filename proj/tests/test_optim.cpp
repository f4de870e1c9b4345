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

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "covidcaps/optim.hpp"
#include "oracles.hpp"

using namespace covidcaps;

namespace {

ParameterStore<double> store_with(std::vector<double> values) {
  ParameterStore<double> s;
  s.add("w", Tensor<double>(Shape{values.size()}, values));
  s.at("w").var.set_requires_grad(true);
  return s;
}

void set_grad(ParameterStore<double>& s, const std::string& name, std::vector<double> g) {
  auto& var = s.at(name).var;
  var.zero_grad();
  var.node()->grad = Tensor<double>(var.value().shape(), std::move(g));
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  auto s = store_with({1.0, -2.0, 0.5});
  set_grad(s, "w", {0.3, -7.0, 1e-3});
  AdamState<double> st;
  st.config.lr = 1e-3;
  adam_step(s, st);
  const auto& w = s.at("w").var.value();
  EXPECT_NEAR(w[0], 1.0 - 1e-3, 1e-9);
  EXPECT_NEAR(w[1], -2.0 + 1e-3, 1e-9);
  EXPECT_NEAR(w[2], 0.5 - 1e-3, 1e-7);
}

TEST(Adam, MatchesScalarOracleTrajectory) {
  auto s = store_with({0.7});
  AdamState<double> st;
  st.config.lr = 0.01;
  auto g = [](int t) { return std::sin(0.7 * t) + 0.2 * t; };
  for (int t = 1; t <= 50; ++t) {
    set_grad(s, "w", {g(t)});
    adam_step(s, st);
  }
  EXPECT_NEAR(s.at("w").var.value()[0], oracle::adam(0.7, g, 50, 0.01), 1e-12);
}

TEST(Adam, ZeroGradientLeavesParamsAndDecaysMoments) {
  auto fresh = store_with({1.0, 2.0});
  AdamState<double> st0;
  set_grad(fresh, "w", {0.0, 0.0});
  adam_step(fresh, st0);
  EXPECT_EQ(fresh.at("w").var.value()[0], 1.0);
  EXPECT_EQ(fresh.at("w").var.value()[1], 2.0);

  auto s = store_with({1.0, 2.0});
  AdamState<double> st;
  set_grad(s, "w", {1.0, 1.0});
  adam_step(s, st);
  double m = st.first_moment.at("w")[0], v = st.second_moment.at("w")[0];
  for (int k = 0; k < 3; ++k) {
    set_grad(s, "w", {0.0, 0.0});
    adam_step(s, st);
    EXPECT_NEAR(st.first_moment.at("w")[0], 0.9 * m, 1e-15);
    EXPECT_NEAR(st.second_moment.at("w")[0], 0.999 * v, 1e-15);
    m = st.first_moment.at("w")[0];
    v = st.second_moment.at("w")[0];
  }
}

TEST(Adam, FrozenAndBuffersUntouched) {
  ParameterStore<double> s;
  s.add("a", Tensor<double>(Shape{2}, 1.0));
  s.add("b", Tensor<double>(Shape{2}, 1.0));
  s.add("buf", Tensor<double>(Shape{2}, 1.0), true);
  s.at("b").trainable = false;
  set_grad(s, "a", {1, 1});
  set_grad(s, "b", {5, 5});
  set_grad(s, "buf", {5, 5});
  AdamState<double> st;
  for (int k = 0; k < 5; ++k) adam_step(s, st);
  EXPECT_EQ(s.at("b").var.value(), Tensor<double>(Shape{2}, 1.0));
  EXPECT_EQ(s.at("buf").var.value(), Tensor<double>(Shape{2}, 1.0));
  EXPECT_NE(s.at("a").var.value(), Tensor<double>(Shape{2}, 1.0));
}

TEST(Adam, MissingGradientIsAnError) {
  auto s = store_with({1.0});
  AdamState<double> st;
  EXPECT_THROW(adam_step(s, st), ContractError);
  st.config.lr = -1;
  set_grad(s, "w", {1.0});
  EXPECT_THROW(adam_step(s, st), ParameterError);
}

TEST(Adam, UpdatesBoundedAndFinite) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(-1e6, 1e6);
  auto s = store_with(std::vector<double>(64, 0.0));
  AdamState<double> st;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> g(64);
    for (auto& x : g) x = d(rng);
    const auto before = s.at("w").var.value();
    set_grad(s, "w", g);
    adam_step(s, st);
    const auto& after = s.at("w").var.value();
    for (std::size_t i = 0; i < 64; ++i) {
      ASSERT_TRUE(std::isfinite(after[i]));
      EXPECT_LE(std::abs(after[i] - before[i]), st.config.lr / (1 - st.config.beta1) * 4);
    }
  }
}

TEST(Adam, IdenticalRunsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> d;
    auto s = store_with({0.1, 0.2, 0.3});
    AdamState<double> st;
    for (int t = 0; t < 30; ++t) {
      set_grad(s, "w", {d(rng), d(rng), d(rng)});
      adam_step(s, st);
    }
    return s.at("w").var.value();
  };
  EXPECT_EQ(run(), run());
}
