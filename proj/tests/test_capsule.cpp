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

#include <random>

#include "covidcaps/capsule.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace covidcaps;

namespace {

CapsuleTensor<double> caps(std::size_t n, std::size_t d, std::vector<double> v) {
  return CapsuleTensor<double>(Tensor<double>(Shape{n, d}, std::move(v)));
}

VoteTensor<double> random_votes(std::size_t ni, std::size_t nj, std::size_t d,
                                std::mt19937_64& rng, double scale = 1.0) {
  return VoteTensor<double>(gradcheck::random_tensor<double>({ni, nj, d}, rng, -scale, scale));
}

std::vector<std::vector<oracle::Vec>> as_nested(const VoteTensor<double>& v) {
  std::vector<std::vector<oracle::Vec>> out(v.num_in(), std::vector<oracle::Vec>(v.num_out()));
  for (std::size_t i = 0; i < v.num_in(); ++i)
    for (std::size_t j = 0; j < v.num_out(); ++j)
      for (std::size_t k = 0; k < v.out_dim(); ++k)
        out[i][j].push_back(v.values.at({i, j, k}));
  return out;
}

}  // namespace

TEST(Votes, IdentityTransformCopiesInput) {
  std::mt19937_64 rng(1);
  auto u = CapsuleTensor<double>(gradcheck::random_tensor<double>({3, 4}, rng));
  Tensor<double> w(Shape{3, 2, 4, 4});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 4; ++k) w.at({i, j, k, k}) = 1;
  auto v = predict_votes(u, CapsuleLayerParams<double>{w});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(v.values.at({i, j, k}), u.values.at({i, k}));
}

TEST(Votes, ZeroWeightsGiveZeroVotes) {
  std::mt19937_64 rng(2);
  auto u = CapsuleTensor<double>(gradcheck::random_tensor<double>({3, 4}, rng));
  auto v = predict_votes(u, CapsuleLayerParams<double>{Tensor<double>(Shape{3, 2, 5, 4})});
  for (double x : v.values.data()) EXPECT_EQ(x, 0.0);
}

TEST(Votes, HandMatrixVector) {
  auto u = caps(1, 2, {1, 2});
  Tensor<double> w(Shape{1, 1, 3, 2}, std::vector<double>{1, 0, 0, 1, 1, 1});
  auto v = predict_votes(u, CapsuleLayerParams<double>{w});
  EXPECT_EQ(v.values.vector(), (std::vector<double>{1, 2, 3}));
}

TEST(Votes, SharedWeightsBroadcastOverInputs) {
  std::mt19937_64 rng(3);
  auto u = CapsuleTensor<double>(gradcheck::random_tensor<double>({4, 3}, rng));
  auto w1 = gradcheck::random_tensor<double>({1, 2, 5, 3}, rng);
  Tensor<double> wfull(Shape{4, 2, 5, 3});
  for (std::size_t i = 0; i < 4; ++i)
    std::copy(w1.data().begin(), w1.data().end(), wfull.data().begin() + i * w1.size());
  EXPECT_EQ(predict_votes(u, CapsuleLayerParams<double>{w1}).values,
            predict_votes(u, CapsuleLayerParams<double>{wfull}).values);
}

TEST(Votes, DimensionMismatch) {
  auto u = caps(1, 2, {1, 2});
  EXPECT_THROW(predict_votes(u, CapsuleLayerParams<double>{Tensor<double>(Shape{1, 1, 3, 3})}),
               DimensionError);
  EXPECT_THROW(predict_votes(u, CapsuleLayerParams<double>{Tensor<double>(Shape{2, 1, 3, 2})}),
               DimensionError);
}

TEST(Squash, ZeroIsZero) {
  auto v = squash(std::vector<double>{0, 0, 0});
  EXPECT_EQ(v, (std::vector<double>{0, 0, 0}));
}

TEST(Squash, UnitNormHalves) {
  auto v = squash(std::vector<double>{0.6, 0.8});
  EXPECT_NEAR(v[0], 0.3, 1e-15);
  EXPECT_NEAR(v[1], 0.4, 1e-15);
}

TEST(Squash, LargeNormApproachesOneFromBelow) {
  auto v = squash(std::vector<double>{1e6, 0});
  EXPECT_GT(v[0], 0.999999);
  EXPECT_LT(v[0], 1.0);
}

TEST(Squash, MatchesOracleOnRandomVectors) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> d(-3, 3);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> s(5);
    for (auto& x : s) x = d(rng);
    auto v = squash(s);
    auto ref = oracle::squash(s);
    for (int k = 0; k < 5; ++k) EXPECT_NEAR(v[k], ref[k], 1e-14);
  }
}

TEST(Squash, GradientIncludingTinyNorms) {
  std::mt19937_64 rng(5);
  Var<double> s(gradcheck::random_tensor<double>({2, 3, 4}, rng, -2, 2));
  s.mutable_value()[0] = 1e-4;
  Var<double> r(gradcheck::random_tensor<double>({2, 3, 4}, rng));
  auto f = [&] { return ops::sum(ops::mul(ops::squash(s), r)); };
  auto res = gradcheck::check<double>(f, {&s}, 1e-6, 1e-3, 1e-6);
  EXPECT_EQ(res.passed, res.checked) << "worst " << res.worst;
}

TEST(Routing, SingleOutputCapsuleIsSquashedSum) {
  std::mt19937_64 rng(6);
  auto votes = random_votes(5, 1, 4, rng);
  auto r = route(votes, 3);
  oracle::Vec s(4, 0.0);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 4; ++k) s[k] += votes.values.at({i, 0, k});
  auto ref = oracle::squash(s);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(r.outputs.values[k], ref[k], 1e-12);
  for (double c : r.state.couplings.data()) EXPECT_EQ(c, 1.0);
}

TEST(Routing, IdenticalVotesGiveSquashOfVote) {
  // Couplings normalize over outputs, so equal votes sum to (I/J)·u; with
  // I == J that is u itself at every iteration.
  for (std::size_t ni : {2, 3, 6}) {
    Tensor<double> v(Shape{ni, 3, 2});
    for (std::size_t i = 0; i < ni; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        v.at({i, j, 0}) = 0.7;
        v.at({i, j, 1}) = -0.2;
      }
    auto r = route(VoteTensor<double>(v), 3);
    const double f = static_cast<double>(ni) / 3.0;
    auto ref = oracle::squash({0.7 * f, -0.2 * f});
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 2; ++k)
        EXPECT_NEAR(r.outputs.values.at({j, k}), ref[k], 1e-14);
  }
}

TEST(Routing, TwoByTwoHandCase) {
  Tensor<double> v(Shape{2, 2, 2}, std::vector<double>{1.0, 0.5, -0.3, 0.8,   // i=0
                                                      0.2, -1.1, 0.9, 0.4});  // i=1
  VoteTensor<double> votes(v);
  auto r = route(votes, 3);
  auto ref = oracle::route(as_nested(votes), 3);
  ASSERT_EQ(r.trace.size(), 3u);
  for (std::size_t it = 0; it < 3; ++it)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        EXPECT_NEAR(r.trace[it].couplings.at({i, j}), ref.couplings[it][i][j], 1e-9);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t k = 0; k < 2; ++k)
      EXPECT_NEAR(r.outputs.values.at({j, k}), ref.outputs[j][k], 1e-9);
}

TEST(Routing, CouplingsNormalizedAndFirstIterationUniform) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 20; ++t) {
    auto r = route(random_votes(6, 4, 3, rng, 2.0), 4);
    for (std::size_t it = 0; it < r.trace.size(); ++it) {
      const auto& c = r.trace[it].couplings;
      for (std::size_t i = 0; i < 6; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 4; ++j) {
          s += c.at({i, j});
          if (it == 0) {
            EXPECT_EQ(c.at({i, j}), 0.25);
          }
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST(Routing, OneIterationIsUniformAggregation) {
  std::mt19937_64 rng(8);
  auto votes = random_votes(5, 3, 4, rng);
  auto r = route(votes, 1);
  for (std::size_t j = 0; j < 3; ++j) {
    oracle::Vec s(4, 0.0);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t k = 0; k < 4; ++k) {
      s[k] += votes.values.at({i, j, k}) / 3.0;
    }
    auto ref = oracle::squash(s);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(r.outputs.values.at({j, k}), ref[k], 1e-12);
  }
}

TEST(Routing, PermutingOutputsPermutesCapsules) {
  std::mt19937_64 rng(9);
  auto votes = random_votes(4, 3, 2, rng);
  const std::size_t perm[3] = {2, 0, 1};
  Tensor<double> pv(votes.values.shape());
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 2; ++k) pv.at({i, j, k}) = votes.values.at({i, perm[j], k});
  auto a = route(votes, 3), b = route(VoteTensor<double>(pv), 3);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t k = 0; k < 2; ++k)
      EXPECT_NEAR(b.outputs.values.at({j, k}), a.outputs.values.at({perm[j], k}), 1e-9);
}

TEST(Routing, OutputNormsBelowOne) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 20; ++t) {
    auto r = route(random_votes(8, 3, 4, rng, 10.0), 3);
    for (double p : capsule_probabilities(r.outputs)) {
      EXPECT_GE(p, 0.0);
      EXPECT_LT(p, 1.0);
    }
  }
}

TEST(Routing, ZeroIterationsRejected) {
  std::mt19937_64 rng(11);
  EXPECT_THROW(route(random_votes(2, 2, 2, rng), 0), ParameterError);
}

TEST(Routing, GradientThroughUnrolledLoop) {
  std::mt19937_64 rng(12);
  Var<double> u(gradcheck::random_tensor<double>({2, 4, 3, 3}, rng));
  Var<double> r(gradcheck::random_tensor<double>({2, 3, 3}, rng));
  auto f = [&] { return ops::sum(ops::mul(ops::route(u, 3), r)); };
  auto res = gradcheck::check<double>(f, {&u}, 1e-5);
  EXPECT_EQ(res.passed, res.checked) << "worst " << res.worst;
}

TEST(Routing, GradientThroughVotesAndLengths) {
  std::mt19937_64 rng(13);
  Var<double> x(gradcheck::random_tensor<double>({2, 5, 3}, rng));
  Var<double> w(gradcheck::random_tensor<double>({5, 2, 4, 3}, rng));
  auto f = [&] {
    return ops::sum(ops::capsule_lengths(ops::route(ops::capsule_votes(x, w), 3)));
  };
  auto res = gradcheck::check<double>(f, {&x, &w}, 1e-5);
  EXPECT_EQ(res.passed, res.checked) << "worst " << res.worst;
}

TEST(Lengths, Examples) {
  EXPECT_EQ(capsule_probabilities(caps(1, 2, {0, 0}))[0], 0.0);
  EXPECT_DOUBLE_EQ(capsule_probabilities(caps(1, 2, {0.3, 0.4}))[0], 0.5);
  auto p = capsule_probabilities(caps(2, 2, {0.5, 0, 0.5, 0}));
  EXPECT_EQ(p, (std::vector<double>{0.5, 0.5}));
}

TEST(ToCapsules, GroupsChannelsPerLocation) {
  // [1, C=4, 1, 2]: location 0 channels (0,1,2,3), location 1 (10,11,12,13).
  Tensor<double> x(Shape{1, 4, 1, 2}, std::vector<double>{0, 10, 1, 11, 2, 12, 3, 13});
  auto c = ops::to_capsules(Var<double>(x), 2).value();
  ASSERT_EQ(c.shape(), (Shape{1, 4, 2}));
  EXPECT_EQ(c.vector(), (std::vector<double>{0, 1, 2, 3, 10, 11, 12, 13}));
  EXPECT_THROW(ops::to_capsules(Var<double>(x), 3), DimensionError);
}
