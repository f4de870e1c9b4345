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

#include <filesystem>
#include <fstream>
#include <set>

#include "covidcaps/checkpoint.hpp"
#include "covidcaps/synthetic.hpp"
#include "covidcaps/trainer.hpp"

using namespace covidcaps;

namespace {

constexpr std::size_t kSize = 24;

ArchitectureConfig arch(std::size_t classes, std::uint64_t seed) {
  auto c = ArchitectureConfig::compact(kSize, classes);
  c.seed = seed;
  return c;
}

TrainConfig quick(std::size_t epochs, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = epochs;
  t.seed = seed;
  return t;
}

double train_accuracy(ModelGraph<float> m, const LabeledImages<float>& set) {
  return evaluate_set(m, set, std::nullopt).accuracy;
}

/// Writes `set` as PNGs plus a manifest, with NIH or COVID raw labels.
std::string write_dataset(const LabeledImages<float>& set, const std::string& name) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(::testing::TempDir()) / name;
  fs::create_directories(dir);
  static const char* nih[] = {"No Finding", "Mass", "Effusion", "Pneumonia", "Cardiomegaly"};
  std::ofstream m(dir / "manifest.csv");
  m << "path,label\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    const std::string file = "img" + std::to_string(i) + ".png";
    write_png_gray((dir / file).string(), set.images[i]);
    m << file << ","
      << (set.scheme == LabelScheme::nih_5class ? nih[set.labels[i]] : set.original_labels[i])
      << "\n";
  }
  return (dir / "manifest.csv").string();
}

}  // namespace

TEST(Synthetic, PixelCountRuleSeparatesClasses) {
  auto set = synthetic::squares_vs_rings<float>(400, kSize, 5);
  for (std::size_t i = 0; i < set.size(); ++i)
    EXPECT_EQ(synthetic::pixel_count_rule(set.images[i]), set.labels[i] == 1) << i;
}

TEST(Trainer, LearnsSquaresVersusRings) {
  auto train_set = synthetic::squares_vs_rings<float>(200, kSize, 1);
  auto val_set = synthetic::squares_vs_rings<float>(40, kSize, 2);
  auto model = build_model<float>(arch(2, 0));
  auto r = train(model, train_set, val_set, quick(20, 0));
  EXPECT_GE(train_accuracy(r.best_model, train_set), 0.95);
}

TEST(Trainer, OneEpochOneRecord) {
  auto train_set = synthetic::squares_vs_rings<float>(20, kSize, 1);
  auto val_set = synthetic::squares_vs_rings<float>(6, kSize, 2);
  auto model = build_model<float>(arch(2, 0));
  std::size_t calls = 0;
  auto r = train(model, train_set, val_set, quick(1, 0),
                 [&](const EpochRecord&, const ModelGraph<float>&) { ++calls; });
  EXPECT_EQ(calls, 1u);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best_epoch, 1u);
  EXPECT_TRUE(r.history[0].val_auc.has_value());
}

TEST(Trainer, IdenticalSeedsIdenticalRuns) {
  auto train_set = synthetic::squares_vs_rings<float>(40, kSize, 1);
  auto val_set = synthetic::squares_vs_rings<float>(10, kSize, 2);
  auto run = [&] {
    auto model = build_model<float>(arch(2, 3));
    return train(model, train_set, val_set, quick(3, 3));
  };
  auto a = run(), b = run();
  EXPECT_EQ(history_jsonl(a.history), history_jsonl(b.history));
  EXPECT_EQ(serialize_checkpoint(a.best_model), serialize_checkpoint(b.best_model));
}

TEST(Trainer, SelectsBestValidationEpoch) {
  auto train_set = synthetic::squares_vs_rings<float>(40, kSize, 1);
  auto val_set = synthetic::squares_vs_rings<float>(10, kSize, 2);
  auto model = build_model<float>(arch(2, 4));
  std::vector<std::string> snapshots;
  auto r = train(model, train_set, val_set, quick(6, 4),
                 [&](const EpochRecord&, const ModelGraph<float>& m) {
                   snapshots.push_back(serialize_checkpoint(m));
                 });
  const auto& best = r.history[r.best_epoch - 1];
  for (const auto& e : r.history) {
    EXPECT_LE(e.val_accuracy, best.val_accuracy);
    if (e.val_accuracy == best.val_accuracy) {
      EXPECT_GE(e.val_loss, best.val_loss);
      if (e.val_loss == best.val_loss) {
        EXPECT_GE(e.epoch, best.epoch);
      }
    }
  }
  EXPECT_EQ(serialize_checkpoint(r.best_model), snapshots[r.best_epoch - 1]);
}

TEST(Trainer, EpochPermutationCoversEverySample) {
  for (std::size_t epoch = 1; epoch <= 5; ++epoch) {
    auto p = epoch_permutation(37, 9, epoch);
    std::set<std::size_t> s(p.begin(), p.end());
    EXPECT_EQ(s.size(), 37u);
    EXPECT_EQ(*s.rbegin(), 36u);
  }
  EXPECT_NE(epoch_permutation(37, 9, 1), epoch_permutation(37, 9, 2));
  EXPECT_EQ(epoch_permutation(37, 9, 1), epoch_permutation(37, 9, 1));
}

TEST(Trainer, FixedBatchLossDecreasesEarly) {
  auto set = synthetic::squares_vs_rings<float>(16, kSize, 7);
  std::vector<std::size_t> idx(16);
  std::iota(idx.begin(), idx.end(), 0);
  const auto x = stack_batch(set, idx, 0, 16);
  const auto labels = LabelBatch<float>::from_indices(set.labels, 2);
  int passing = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto m = build_model<float>(arch(2, seed));
    AdamState<float> adam;
    std::vector<double> losses;
    for (int step = 0; step < 6; ++step) {
      m.zero_grad();
      auto loss = ops::batch_objective(m.forward(x, ForwardMode::train).lengths, labels, {},
                                       set.stats());
      losses.push_back(loss.value()[0]);
      backward(loss);
      adam_step(m.params(), adam);
    }
    passing += losses.back() < losses.front();
  }
  EXPECT_GE(passing, 2);
}

TEST(Trainer, SchemeHeadMismatch) {
  auto train_set = synthetic::squares_vs_rings<float>(10, kSize, 1);
  auto model = build_model<float>(arch(5, 0));
  EXPECT_THROW(train(model, train_set, train_set, quick(1, 0)), ConfigError);
  TrainConfig bad = quick(1, 0);
  bad.epochs = 0;
  auto m2 = build_model<float>(arch(2, 0));
  EXPECT_THROW(train(m2, train_set, train_set, bad), ConfigError);
}

TEST(Trainer, NonFiniteLossAbortsWithLocation) {
  auto train_set = synthetic::squares_vs_rings<float>(12, kSize, 1);
  auto model = build_model<float>(arch(2, 0));
  auto cfg = quick(1, 0);
  cfg.batch_size = 4;
  // epoch 1 ordering decides the batch holding the poisoned sample.
  const auto order = epoch_permutation(train_set.size(), cfg.seed, 1);
  const std::size_t pos = std::find(order.begin(), order.end(), 5) - order.begin();
  train_set.images[5][0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train(model, train_set, train_set, cfg);
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError& e) {
    EXPECT_EQ(e.epoch(), 1u);
    EXPECT_EQ(e.batch(), pos / 4 + 1);
  }
}

TEST(Trainer, WarnsWithoutPositives) {
  auto train_set = synthetic::squares_vs_rings<float>(10, kSize, 1);
  LabeledImages<float> negatives;
  for (std::size_t i = 0; i < train_set.size(); ++i)
    if (train_set.labels[i] == 0) negatives.push_back(train_set.images[i], 0, "Normal");
  auto model = build_model<float>(arch(2, 0));
  ::testing::internal::CaptureStderr();
  train(model, negatives, train_set, quick(1, 0));
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("warning"), std::string::npos);
}

TEST(Trainer, ManifestPipeline) {
  const auto path = write_dataset(synthetic::squares_vs_rings<float>(40, kSize, 3), "binary40");
  const auto manifest = load_manifest(path, LabelScheme::covid_binary);
  EXPECT_EQ(manifest.stats, (DatasetStats{20, 20}));
  auto model = build_model<float>(arch(2, 0));
  auto r = train(model, manifest, quick(2, 0));
  EXPECT_EQ(r.history.size(), 2u);
}

TEST(Transfer, PretrainThenFinetuneFreezesBackbone) {
  const auto ext = write_dataset(synthetic::five_shapes<float>(60, kSize, 1), "five60");
  const auto covid = write_dataset(synthetic::squares_vs_rings<float>(40, kSize, 2), "covid40");
  auto out = pretrain_then_finetune<float>(load_manifest(ext, LabelScheme::nih_5class),
                                           load_manifest(covid, LabelScheme::covid_binary),
                                           arch(2, 5), quick(2, 5), quick(2, 6));
  const auto& pre = out.pretrain.best_model;
  const auto& fine = out.finetune.best_model;
  EXPECT_EQ(pre.num_classes(), 5u);
  EXPECT_EQ(fine.num_classes(), 2u);
  for (const auto& p : pre.params().entries()) {
    const auto& q = fine.params().at(p.name);
    if (p.name.rfind("conv", 0) == 0 || p.name == "bn1.gamma" || p.name == "bn1.beta" ||
        p.buffer) {
      EXPECT_EQ(q.var.value(), p.var.value()) << p.name;
      EXPECT_FALSE(q.trainable && !q.buffer) << p.name;
    }
  }
  EXPECT_NE(fine.params().at("caps1.W").var.value(), pre.params().at("caps1.W").var.value());
  EXPECT_EQ(fine.params().at("caps3.W").var.value().shape(), (Shape{1, 2, 8, 8}));
}

TEST(Transfer, PretrainingHelpsOnAtLeastOneSeed) {
  auto five = synthetic::five_shapes<float>(150, kSize, 11);
  auto five_val = synthetic::five_shapes<float>(25, kSize, 12);
  auto bin = synthetic::squares_vs_rings<float>(40, kSize, 13);
  auto bin_val = synthetic::squares_vs_rings<float>(40, kSize, 14);
  int wins = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto pre = build_model<float>(arch(5, seed));
    auto pre_best = train(pre, five, five_val, quick(6, seed)).best_model;
    prepare_for_finetune(pre_best);
    auto fine = train(pre_best, bin, bin_val, quick(3, seed));
    auto scratch = build_model<float>(arch(2, seed));
    auto base = train(scratch, bin, bin_val, quick(3, seed));
    wins += train_accuracy(fine.best_model, bin_val) >= train_accuracy(base.best_model, bin_val);
  }
  EXPECT_GE(wins, 1);
}
