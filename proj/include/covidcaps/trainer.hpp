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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "covidcaps/data.hpp"
#include "covidcaps/eval.hpp"
#include "covidcaps/image.hpp"
#include "covidcaps/model.hpp"
#include "covidcaps/objective.hpp"
#include "covidcaps/optim.hpp"

namespace covidcaps {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  MarginLossConfig loss;
  double threshold = 0.5;
  DecisionRule rule = DecisionRule::threshold;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
    if (!(val_fraction > 0 && val_fraction < 1))
      throw ConfigError("val_fraction must be in (0,1)");
    loss.validate();
  }
};

/// Preprocessed images ([C,H,W] each) with class indices.
template <std::floating_point T>
struct LabeledImages {
  LabelScheme scheme = LabelScheme::covid_binary;
  std::vector<Tensor<T>> images;
  std::vector<std::size_t> labels;
  std::vector<std::string> original_labels;

  std::size_t size() const { return images.size(); }

  void push_back(Tensor<T> image, std::size_t label, std::string original = {}) {
    images.push_back(std::move(image));
    labels.push_back(label);
    original_labels.push_back(std::move(original));
  }

  DatasetStats stats() const {
    DatasetStats s;
    for (auto l : labels) (l == 1 ? s.n_pos : s.n_neg) += 1;
    return s;
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  std::optional<double> val_sensitivity;
  std::optional<double> val_specificity;
  std::optional<double> val_auc;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return {{"epoch", r.epoch},
          {"train_loss", r.train_loss},
          {"val_loss", r.val_loss},
          {"val_accuracy", r.val_accuracy},
          {"val_sensitivity", opt(r.val_sensitivity)},
          {"val_specificity", opt(r.val_specificity)},
          {"val_auc", opt(r.val_auc)}};
}

inline std::string history_jsonl(const std::vector<EpochRecord>& history) {
  std::string out;
  for (const auto& r : history) out += to_json(r).dump() + "\n";
  return out;
}

template <std::floating_point T>
struct TrainResult {
  ModelGraph<T> best_model;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

/// Stacks samples `idx[begin, end)` into a [B,C,H,W] batch.
template <std::floating_point T>
Tensor<T> stack_batch(const LabeledImages<T>& set, const std::vector<std::size_t>& idx,
                      std::size_t begin, std::size_t end) {
  const Shape& s = set.images.at(idx[begin]).shape();
  Shape shape{end - begin};
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor<T> out(shape);
  const std::size_t per = shape_volume(s);
  for (std::size_t b = begin; b < end; ++b) {
    const auto& img = set.images[idx[b]];
    img.require_same_shape(set.images[idx[begin]], "batch image");
    std::copy(img.data().begin(), img.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>((b - begin) * per));
  }
  return out;
}

template <std::floating_point T>
struct SetEvaluation {
  double loss = 0;
  double accuracy = 0;
  std::vector<ScoredPrediction> predictions;  // binary scheme only
  std::optional<MetricsReport> metrics;       // binary scheme only
  Tensor<T> lengths;                          // [N, K]
};

/// Inference-mode pass over `set`: mean objective, accuracy and, for the
/// binary scheme, the scored predictions and metrics report.
template <std::floating_point T>
SetEvaluation<T> evaluate_set(ModelGraph<T>& model, const LabeledImages<T>& set,
                              const std::optional<DatasetStats>& stats,
                              std::size_t batch_size = 16, double threshold = 0.5,
                              DecisionRule rule = DecisionRule::threshold) {
  if (set.size() == 0) throw ContractError("evaluate_set: empty set");
  NoGradGuard guard;
  const std::size_t k = model.num_classes();
  SetEvaluation<T> ev;
  ev.lengths = Tensor<T>(Shape{set.size(), k});
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), 0);
  double loss_sum = 0;
  for (std::size_t b = 0; b < set.size(); b += batch_size) {
    const std::size_t e = std::min(set.size(), b + batch_size);
    auto out = model.forward(stack_batch(set, order, b, e), ForwardMode::infer);
    std::vector<std::size_t> lbl(set.labels.begin() + static_cast<std::ptrdiff_t>(b),
                                 set.labels.begin() + static_cast<std::ptrdiff_t>(e));
    const auto labels = LabelBatch<T>::from_indices(lbl, k);
    const auto loss =
        ops::batch_objective(out.lengths, labels, model.config().loss, stats);
    loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(e - b);
    const auto& len = out.lengths.value();
    std::copy(len.data().begin(), len.data().end(),
              ev.lengths.data().begin() + static_cast<std::ptrdiff_t>(b * k));
  }
  ev.loss = loss_sum / static_cast<double>(set.size());

  std::size_t correct = 0;
  if (set.scheme == LabelScheme::covid_binary && k == 2) {
    for (std::size_t i = 0; i < set.size(); ++i) {
      ScoredPrediction p;
      p.score = ev.lengths[i * 2 + 1];
      p.negative_score = ev.lengths[i * 2 + 0];
      p.positive = set.labels[i] == 1;
      p.original_label = set.original_labels[i];
      ev.predictions.push_back(p);
    }
    ev.metrics = evaluate(ev.predictions, threshold, rule);
    ev.accuracy = ev.metrics->accuracy;
  } else {
    for (std::size_t i = 0; i < set.size(); ++i) {
      const T* row = ev.lengths.data().data() + i * k;
      const auto arg = static_cast<std::size_t>(std::max_element(row, row + k) - row);
      correct += arg == set.labels[i];
    }
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(set.size());
  }
  return ev;
}

/// Per-epoch permutation of [0, n) derived only from (seed, epoch).
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed,
                                                  std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5EEDu};
  std::mt19937_64 rng(seq);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

template <std::floating_point T>
using EpochCallback = std::function<void(const EpochRecord&, const ModelGraph<T>&)>;

/// Trains `model` in place on preprocessed sets and returns the epoch with the
/// best validation accuracy (ties: lower validation loss, then earlier epoch).
/// Binary sets are weighted by the training-set class counts.
template <std::floating_point T>
TrainResult<T> train(ModelGraph<T>& model, const LabeledImages<T>& train_set,
                     const LabeledImages<T>& val_set, const TrainConfig& cfg,
                     const std::type_identity_t<EpochCallback<T>>& on_epoch_end = {}) {
  cfg.validate();
  const std::size_t k = model.num_classes();
  const std::size_t expected_k = class_names(train_set.scheme).size();
  if (k != expected_k || val_set.scheme != train_set.scheme) {
    throw ConfigError("label scheme " + to_string(train_set.scheme) + " needs " +
                      std::to_string(expected_k) + " output capsules, model head has " +
                      std::to_string(k));
  }
  if (train_set.size() == 0) throw ConfigError("training set is empty");
  if (val_set.size() == 0) throw ConfigError("validation set is empty");
  model.set_loss_config(cfg.loss);

  std::optional<DatasetStats> stats;
  if (train_set.scheme == LabelScheme::covid_binary) {
    stats = train_set.stats();
    if (stats->n_pos == 0 || stats->n_neg == 0) {
      std::cerr << "warning: training set has " << stats->n_pos << " positive and "
                << stats->n_neg << " negative samples\n";
    }
  }

  AdamState<T> adam;
  adam.config.lr = cfg.lr;
  TrainResult<T> result;
  std::optional<EpochRecord> best;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_permutation(train_set.size(), cfg.seed, epoch);
    double loss_sum = 0;
    std::size_t batch_no = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size, ++batch_no) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      std::vector<std::size_t> lbl;
      for (std::size_t i = b; i < e; ++i) lbl.push_back(train_set.labels[order[i]]);
      model.zero_grad();
      auto out = model.forward(stack_batch(train_set, order, b, e), ForwardMode::train);
      auto loss = ops::batch_objective(out.lengths, LabelBatch<T>::from_indices(lbl, k),
                                       cfg.loss, stats);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) throw NonFiniteLossError(epoch, batch_no + 1);
      backward(loss);
      adam_step(model.params(), adam);
      loss_sum += lv * static_cast<double>(e - b);
    }

    const auto ev = evaluate_set(model, val_set, stats, cfg.batch_size, cfg.threshold,
                                 cfg.rule);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.val_loss = ev.loss;
    rec.val_accuracy = ev.accuracy;
    if (ev.metrics) {
      rec.val_sensitivity = ev.metrics->sensitivity;
      rec.val_specificity = ev.metrics->specificity;
      rec.val_auc = ev.metrics->auc;
    }
    result.history.push_back(rec);
    const bool better = !best || rec.val_accuracy > best->val_accuracy ||
                        (rec.val_accuracy == best->val_accuracy &&
                         rec.val_loss < best->val_loss);
    if (better) {
      best = rec;
      result.best_epoch = epoch;
      result.best_model = model;
    }
    if (on_epoch_end) on_epoch_end(rec, model);
  }
  return result;
}

/// Reads and preprocesses every record of `manifest` to the model's input size.
template <std::floating_point T>
LabeledImages<T> load_images(const DatasetManifest& manifest, const ArchitectureConfig& arch) {
  LabeledImages<T> set;
  set.scheme = manifest.scheme;
  for (const auto& r : manifest.records) {
    if (!r.mapped_label) throw ContractError("record " + r.image_path + " is unmapped");
    Tensor<T> img = preprocess_image<T>(r.image_path, arch.input_height, arch.input_width);
    if (arch.input_channels != 1) {
      Tensor<T> rep(Shape{arch.input_channels, arch.input_height, arch.input_width});
      const std::size_t plane = arch.input_height * arch.input_width;
      for (std::size_t c = 0; c < arch.input_channels; ++c)
        std::copy(img.data().begin(), img.data().end(),
                  rep.data().begin() + static_cast<std::ptrdiff_t>(c * plane));
      img = std::move(rep);
    }
    set.push_back(std::move(img), class_index(manifest.scheme, *r.mapped_label),
                  manifest.scheme == LabelScheme::covid_binary
                      ? canonical_covid_label(r.raw_label)
                      : r.raw_label);
  }
  return set;
}

/// Splits `manifest` (stratified, seeded), loads both partitions and trains.
template <std::floating_point T>
TrainResult<T> train(ModelGraph<T>& model, const DatasetManifest& manifest,
                     const TrainConfig& cfg, const std::type_identity_t<EpochCallback<T>>& on_epoch_end = {}) {
  cfg.validate();
  const std::size_t expected_k = class_names(manifest.scheme).size();
  if (model.num_classes() != expected_k) {
    throw ConfigError("label scheme " + to_string(manifest.scheme) + " needs " +
                      std::to_string(expected_k) + " output capsules, model head has " +
                      std::to_string(model.num_classes()));
  }
  auto [train_m, val_m] = split_train_val(manifest, 1.0 - cfg.val_fraction, cfg.seed);
  const auto train_set = load_images<T>(train_m, model.config());
  const auto val_set = load_images<T>(val_m, model.config());
  return train(model, train_set, val_set, cfg, on_epoch_end);
}

/// Swaps the head for a two-capsule one and freezes every conv and BN
/// parameter, leaving only capsule transforms trainable.
template <std::floating_point T>
void prepare_for_finetune(ModelGraph<T>& model, std::size_t num_classes = 2) {
  model.replace_head(num_classes);
  model.set_trainable("conv*", false);
  bool has_bn = false;
  for (const auto& p : model.params().entries())
    has_bn = has_bn || (!p.buffer && glob_match("bn*", p.name));
  if (has_bn) model.set_trainable("bn*", false);
}

template <std::floating_point T>
struct TransferResult {
  TrainResult<T> pretrain;
  TrainResult<T> finetune;
};

/// Builds a 5-class model from `arch`, trains it on `external`, then swaps in
/// a two-capsule head, freezes the convolutional stack and fine-tunes on
/// `covid`.
template <std::floating_point T>
TransferResult<T> pretrain_then_finetune(const DatasetManifest& external,
                                         const DatasetManifest& covid,
                                         ArchitectureConfig arch, const TrainConfig& cfg_pre,
                                         const TrainConfig& cfg_fine) {
  if (external.scheme != LabelScheme::nih_5class)
    throw ConfigError("pretraining manifest must use the nih_5class scheme");
  if (covid.scheme != LabelScheme::covid_binary)
    throw ConfigError("fine-tuning manifest must use the covid_binary scheme");
  arch.capsules.back().count = class_names(LabelScheme::nih_5class).size();
  auto model = build_model<T>(arch);
  TransferResult<T> out;
  out.pretrain = train(model, external, cfg_pre);
  ModelGraph<T> fine = out.pretrain.best_model;
  prepare_for_finetune(fine);
  out.finetune = train(fine, covid, cfg_fine);
  return out;
}

}  // namespace covidcaps
