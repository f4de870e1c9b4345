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

#include "covidcaps/checkpoint.hpp"
#include "covidcaps/model.hpp"
#include "covidcaps/optim.hpp"
#include "gradcheck.hpp"

using namespace covidcaps;

namespace {

ArchitectureConfig tiny(std::size_t classes = 2) {
  auto c = ArchitectureConfig::compact(16, classes);
  c.seed = 7;
  return c;
}

Tensor<float> images(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return gradcheck::random_tensor<float>({n, 1, size, size}, rng, 0, 1);
}

void one_step(ModelGraph<float>& m, AdamState<float>& adam, std::size_t seed) {
  m.zero_grad();
  auto out = m.forward(images(4, m.config().input_height, seed), ForwardMode::train);
  backward(ops::sum(out.lengths));
  adam_step(m.params(), adam);
}

std::map<std::string, Tensor<float>> snapshot(const ModelGraph<float>& m) {
  std::map<std::string, Tensor<float>> s;
  for (const auto& p : m.params().entries()) s[p.name] = p.var.value();
  return s;
}

}  // namespace

// Shapes of the default layer table, written out by hand.
TEST(ParamCount, DefaultMatchesHandTable) {
  const std::size_t conv1 = 1 * 3 * 3 * 64 + 64;
  const std::size_t bn1 = 2 * 64;
  const std::size_t conv2 = 64 * 3 * 3 * 64 + 64;
  const std::size_t conv3 = 64 * 3 * 3 * 128 + 128;
  const std::size_t conv4 = 128 * 3 * 3 * 128 + 128;
  const std::size_t caps1 = 32 * 8 * 128;  // shared W[1, 32, 8, 128]
  const std::size_t caps2 = 32 * 8 * 8;
  const std::size_t caps3 = 2 * 16 * 8;
  const std::size_t hand = conv1 + bn1 + conv2 + conv3 + conv4 + caps1 + caps2 + caps3;
  ASSERT_EQ(hand, 294208u);

  auto cfg = ArchitectureConfig::covid_caps(2);
  auto m = build_model<float>(cfg);
  EXPECT_EQ(m.count_trainable_params(), hand);
  EXPECT_EQ(expected_trainable_params(cfg), hand);
  EXPECT_EQ(m.count_all_params(), hand + 2 * 64);  // plus BN running mean/var
}

TEST(ParamCount, ThreeChannelVariantTotalsReference) {
  auto cfg = ArchitectureConfig::covid_caps(2);
  cfg.input_channels = 3;
  auto m = build_model<float>(cfg);
  EXPECT_EQ(m.count_all_params(), 295488u);
  EXPECT_EQ(m.count_trainable_params(), 295360u);
}

TEST(ParamCount, SingleDenseLayer) {
  ParameterStore<float> store;
  store.add("dense.weight", Tensor<float>(Shape{7, 5}));
  store.add("dense.bias", Tensor<float>(Shape{7}));
  EXPECT_EQ(count_trainable_params(store), 5u * 7 + 7);
}

TEST(ParamCount, FreezingConvsSubtractsConvParams) {
  auto m = build_model<float>(tiny());
  const auto before = m.count_trainable_params();
  std::size_t conv = 0;
  for (const auto& p : m.params().entries())
    if (p.name.rfind("conv", 0) == 0) conv += p.var.value().size();
  m.set_trainable("conv*", false);
  EXPECT_EQ(m.count_trainable_params(), before - conv);
  m.set_trainable("*", false);
  EXPECT_EQ(m.count_trainable_params(), 0u);
  EXPECT_THROW(m.set_trainable("nothing*", true), SelectorError);
}

TEST(Model, DefaultForwardOnZeroImage) {
  auto m = build_model<float>(ArchitectureConfig::covid_caps(2));
  auto len = m.predict(Tensor<float>(Shape{1, 1, 128, 128}));
  ASSERT_EQ(len.shape(), (Shape{1, 2}));
  for (float v : len.data()) {
    EXPECT_GE(v, 0.f);
    EXPECT_LT(v, 1.f);
  }
}

TEST(Model, FiveClassHead) {
  auto m = build_model<float>(tiny(5));
  EXPECT_EQ(m.predict(images(3, 16, 1)).shape(), (Shape{3, 5}));
}

TEST(Model, LayerTable) {
  auto m = build_model<float>(ArchitectureConfig::covid_caps(2));
  std::vector<std::string> names;
  for (const auto& l : m.layers()) names.push_back(l.name);
  EXPECT_EQ(names, (std::vector<std::string>{"conv1", "bn1", "conv1.relu", "conv2",
                                             "conv2.relu", "conv2.pool", "conv3",
                                             "conv3.relu", "conv4", "conv4.relu", "primary",
                                             "caps1", "caps2", "caps3"}));
  EXPECT_EQ(m.layers()[9].output, (Shape{128, 29, 29}));
  EXPECT_EQ(m.layers()[10].output, (Shape{841, 128}));
  EXPECT_EQ(m.layers().back().output, (Shape{2, 16}));
}

TEST(Model, IndivisibleCapsuleDimFailsToBuild) {
  auto cfg = tiny();
  cfg.primary_capsule_dim = 7;
  try {
    build_model<float>(cfg);
    FAIL() << "expected BuildError";
  } catch (const BuildError& e) {
    EXPECT_NE(std::string(e.what()).find("primary"), std::string::npos) << e.what();
  }
}

TEST(Model, KernelLargerThanInputFailsToBuild) {
  auto cfg = tiny();
  cfg.input_height = cfg.input_width = 2;
  cfg.convs[0].padding = 0;
  EXPECT_THROW(build_model<float>(cfg), BuildError);
}

TEST(Model, WrongInputShape) {
  auto m = build_model<float>(tiny());
  EXPECT_THROW(m.predict(Tensor<float>(Shape{1, 1, 17, 16})), DimensionError);
}

TEST(Model, ForwardDeterministic) {
  auto a = build_model<float>(tiny());
  auto b = build_model<float>(tiny());
  const auto x = images(4, 16, 3);
  EXPECT_EQ(a.predict(x), b.predict(x));
  EXPECT_EQ(a.predict(x), a.predict(x));
}

TEST(Model, SeedChangesInitialization) {
  auto cfg = tiny();
  auto a = build_model<float>(cfg);
  cfg.seed = 8;
  auto b = build_model<float>(cfg);
  EXPECT_NE(a.params().at("caps1.W").var.value(), b.params().at("caps1.W").var.value());
}

TEST(Model, CopiesAreIndependent) {
  auto a = build_model<float>(tiny());
  auto b = a;
  b.params().at("conv1.weight").var.mutable_value()[0] += 1;
  EXPECT_NE(a.params().at("conv1.weight").var.value(), b.params().at("conv1.weight").var.value());
}

TEST(Model, PerPairWeightsOption) {
  auto cfg = tiny();
  cfg.share_capsule_weights = false;
  auto m = build_model<float>(cfg);
  // 16 primary capsules feed caps1, 8 feed caps2 and caps3.
  EXPECT_EQ(m.params().at("caps1.W").var.value().shape(), (Shape{16, 8, 8, 16}));
  EXPECT_EQ(m.count_trainable_params(), expected_trainable_params(cfg));
}

TEST(ReplaceHead, PreservesEverythingElse) {
  auto m = build_model<float>(tiny(5));
  const auto before = snapshot(m);
  m.replace_head(2);
  EXPECT_EQ(m.num_classes(), 2u);
  for (const auto& p : m.params().entries()) {
    if (p.name == m.head_name() + ".W") {
      EXPECT_EQ(p.var.value().shape(), (Shape{1, 2, 8, 8}));
    } else {
      EXPECT_EQ(p.var.value(), before.at(p.name)) << p.name;
    }
  }
  EXPECT_EQ(m.predict(images(2, 16, 4)).shape(), (Shape{2, 2}));
}

TEST(ReplaceHead, SameCountReinitializes) {
  auto m = build_model<float>(tiny(2));
  const auto w = m.params().at("caps3.W").var.value();
  m.replace_head(2);
  EXPECT_NE(m.params().at("caps3.W").var.value(), w);
  EXPECT_THROW(m.replace_head(1), ParameterError);
}

TEST(Freeze, FrozenConvsSurviveSteps) {
  auto m = build_model<float>(tiny());
  m.set_trainable("conv*", false);
  m.set_trainable("bn*", false);
  const auto before = snapshot(m);
  AdamState<float> adam;
  for (std::size_t k = 0; k < 4; ++k) one_step(m, adam, k);
  for (const auto& p : m.params().entries()) {
    if (p.name.rfind("conv", 0) == 0 || p.name == "bn1.gamma" || p.name == "bn1.beta" ||
        p.buffer) {
      EXPECT_EQ(p.var.value(), before.at(p.name)) << p.name;
    } else {
      EXPECT_NE(p.var.value(), before.at(p.name)) << p.name;
    }
  }
}

TEST(Freeze, OnlyCapsulesUpdated) {
  auto m = build_model<float>(tiny());
  m.set_trainable("*", false);
  m.set_trainable("caps*", true);
  const auto before = snapshot(m);
  AdamState<float> adam;
  one_step(m, adam, 1);
  for (const auto& p : m.params().entries()) {
    const bool caps = p.name.rfind("caps", 0) == 0;
    EXPECT_EQ(p.var.value() != before.at(p.name), caps) << p.name;
  }
}

TEST(Freeze, FinetuneProtocolFreezesConvAndReplacesHead) {
  auto m = build_model<float>(tiny(5));
  m.replace_head(2);
  m.set_trainable("conv*", false);
  for (const auto& p : m.params().entries()) {
    if (p.name.rfind("conv", 0) == 0) {
      EXPECT_FALSE(p.trainable) << p.name;
    }
  }
  EXPECT_TRUE(m.params().at("caps1.W").trainable);
  EXPECT_TRUE(m.params().at("caps3.W").trainable);
}

TEST(CanonicalText, RoundTrip) {
  auto cfg = ArchitectureConfig::covid_caps(5);
  cfg.seed = 123456789012345ull;
  cfg.loss.lambda = 0.3;
  cfg.share_capsule_weights = false;
  EXPECT_EQ(from_canonical_text(to_canonical_text(cfg)), cfg);
  EXPECT_THROW(from_canonical_text(std::string("input_height=abc\n")), ConfigError);
}

TEST(Checkpoint, RoundTripBitExact) {
  auto m = build_model<float>(tiny());
  AdamState<float> adam;
  one_step(m, adam, 2);  // moves BN running stats away from their defaults
  auto back = deserialize_checkpoint<float>(serialize_checkpoint(m));
  EXPECT_EQ(back.config(), m.config());
  for (const auto& p : m.params().entries()) {
    EXPECT_EQ(back.params().at(p.name).var.value(), p.var.value()) << p.name;
  }
  const auto x = images(5, 16, 9);
  EXPECT_EQ(back.predict(x), m.predict(x));
}

TEST(Checkpoint, TrainableFlagsRestored) {
  auto m = build_model<float>(tiny());
  m.set_trainable("conv*", false);
  auto back = deserialize_checkpoint<float>(serialize_checkpoint(m));
  for (const auto& p : m.params().entries()) {
    EXPECT_EQ(back.params().at(p.name).trainable, p.trainable) << p.name;
  }
  EXPECT_EQ(back.count_trainable_params(), m.count_trainable_params());
}

TEST(Checkpoint, WrongMagic) {
  auto bytes = serialize_checkpoint(build_model<float>(tiny()));
  bytes[0] = 'X';
  try {
    deserialize_checkpoint<float>(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Checkpoint, WrongVersion) {
  auto bytes = serialize_checkpoint(build_model<float>(tiny()));
  bytes[4] = 9;
  try {
    deserialize_checkpoint<float>(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(Checkpoint, TruncatedAndTrailingGarbage) {
  auto bytes = serialize_checkpoint(build_model<float>(tiny()));
  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(deserialize_checkpoint<float>(bytes.substr(0, cut)), FormatError) << cut;
  EXPECT_THROW(deserialize_checkpoint<float>(bytes + "xyz"), FormatError);
}

TEST(Checkpoint, ShapeMismatchAndMissingParameter) {
  auto small = build_model<float>(tiny(2));
  auto other = build_model<float>(tiny(5));
  auto a = serialize_checkpoint(small);
  auto b = serialize_checkpoint(other);
  // Header from the 2-class model followed by records of the 5-class model.
  const auto header_len = [](const std::string& s) {
    std::uint32_t n = 0;
    for (int i = 0; i < 4; ++i) n |= std::uint32_t(static_cast<unsigned char>(s[8 + i])) << (8 * i);
    return 12 + n;
  };
  EXPECT_THROW(deserialize_checkpoint<float>(a.substr(0, header_len(a)) + b.substr(header_len(b))),
               FormatError);
  EXPECT_THROW(deserialize_checkpoint<float>(a.substr(0, header_len(a))), FormatError);
}

TEST(Checkpoint, FileRoundTrip) {
  auto m = build_model<float>(tiny());
  const std::string path = ::testing::TempDir() + "/tiny.ccap";
  save_checkpoint(m, path);
  auto back = load_checkpoint<float>(path);
  const auto x = images(3, 16, 10);
  EXPECT_EQ(back.predict(x), m.predict(x));
  EXPECT_THROW(load_checkpoint<float>(path + ".missing"), IoError);
}
