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
#include <optional>
#include <span>
#include <vector>

#include "covidcaps/autodiff.hpp"

namespace covidcaps {

struct MarginLossConfig {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;

  void validate() const {
    if (!(m_plus > 0 && m_plus <= 1))
      throw ParameterError("margin loss: m_plus must be in (0,1]");
    if (!(m_minus >= 0 && m_minus < 1))
      throw ParameterError("margin loss: m_minus must be in [0,1)");
    if (!(m_plus > m_minus))
      throw ParameterError("margin loss: m_plus must exceed m_minus");
    if (!(lambda >= 0)) throw ParameterError("margin loss: lambda must be >= 0");
  }

  friend bool operator==(const MarginLossConfig&, const MarginLossConfig&) = default;
};

/// Dataset-level positive/negative counts.
struct DatasetStats {
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;

  std::size_t total() const { return n_pos + n_neg; }

  /// Weight applied to the positive-sample loss: N⁻ / (N⁺ + N⁻).
  double positive_weight() const {
    require_nonempty();
    return static_cast<double>(n_neg) / static_cast<double>(total());
  }
  /// Weight applied to the negative-sample loss: N⁺ / (N⁺ + N⁻).
  double negative_weight() const {
    require_nonempty();
    return static_cast<double>(n_pos) / static_cast<double>(total());
  }

  void require_nonempty() const {
    if (total() == 0) throw ParameterError("dataset stats: N+ + N- must be >= 1");
  }

  friend bool operator==(const DatasetStats&, const DatasetStats&) = default;
};

/// max(0, x) that keeps NaN.
inline double hinge(double x) { return x < 0 ? 0.0 : x; }

/// One-hot targets [batch, num_classes], exactly one 1 per row.
template <std::floating_point T>
struct LabelBatch {
  Tensor<T> one_hot;

  static LabelBatch from_indices(std::span<const std::size_t> labels,
                                 std::size_t num_classes) {
    if (labels.empty()) throw ContractError("label batch must be non-empty");
    Tensor<T> t(Shape{labels.size(), num_classes});
    for (std::size_t r = 0; r < labels.size(); ++r) {
      if (labels[r] >= num_classes) {
        throw ContractError("label " + std::to_string(labels[r]) +
                            " out of range for " + std::to_string(num_classes) +
                            " classes");
      }
      t[r * num_classes + labels[r]] = T{1};
    }
    return {std::move(t)};
  }

  std::size_t batch() const { return one_hot.dim(0); }
  std::size_t num_classes() const { return one_hot.dim(1); }

  /// Index of the present class of each row; throws on an invalid row.
  std::vector<std::size_t> indices() const {
    if (one_hot.rank() != 2) {
      throw DimensionError("label batch must be [batch, classes]");
    }
    std::vector<std::size_t> out(batch());
    for (std::size_t r = 0; r < batch(); ++r) {
      std::size_t ones = 0;
      for (std::size_t k = 0; k < num_classes(); ++k) {
        const T v = one_hot[r * num_classes() + k];
        if (v == T{1}) {
          ++ones;
          out[r] = k;
        } else if (v != T{0}) {
          throw ContractError("label row " + std::to_string(r) +
                              " has a non-binary entry");
        }
      }
      if (ones != 1) {
        throw ContractError("label row " + std::to_string(r) +
                            " must contain exactly one 1");
      }
    }
    return out;
  }
};

/// Σ_k T_k·max(0, m⁺−‖s_k‖)² + λ(1−T_k)·max(0, ‖s_k‖−m⁻)².
template <std::floating_point T>
T margin_loss(std::span<const T> lengths, std::span<const T> one_hot,
              const MarginLossConfig& cfg) {
  if (lengths.size() != one_hot.size() || lengths.empty()) {
    throw DimensionError("margin_loss: lengths and labels must have equal, "
                         "non-zero size");
  }
  std::size_t present = 0;
  for (T t : one_hot) {
    if (t == T{1}) {
      ++present;
    } else if (t != T{0}) {
      throw ContractError("margin_loss: labels must be one-hot");
    }
  }
  if (present != 1) throw ContractError("margin_loss: labels must be one-hot");
  double loss = 0;
  for (std::size_t k = 0; k < lengths.size(); ++k) {
    const double len = lengths[k];
    if (!(len >= 0 && len <= 1)) {
      throw ContractError("margin_loss: capsule length " + std::to_string(len) +
                          " outside [0,1]");
    }
    if (one_hot[k] == T{1}) {
      const double h = hinge(cfg.m_plus - len);
      loss += h * h;
    } else {
      const double h = hinge(len - cfg.m_minus);
      loss += cfg.lambda * h * h;
    }
  }
  return static_cast<T>(loss);
}

/// (N⁺/(N⁺+N⁻))·loss⁻ + (N⁻/(N⁺+N⁻))·loss⁺.
inline double class_weighted_loss(double loss_pos, double loss_neg,
                                  const DatasetStats& stats) {
  if (!(loss_pos >= 0) || !(loss_neg >= 0)) {
    throw ContractError("class_weighted_loss: losses must be non-negative");
  }
  return stats.negative_weight() * loss_neg + stats.positive_weight() * loss_pos;
}

namespace ops {

/// Differentiable training objective over capsule lengths [batch, K].
///
/// With `stats` set the problem must be binary (K == 2, class 1 positive): the
/// batch is split by label, each group's mean margin loss is taken, and the
/// two means are combined with the dataset-level imbalance weights. A group
/// missing from the batch contributes zero. Without `stats` the result is the
/// plain mean of per-sample margin losses (used for multi-class pre-training).
template <std::floating_point T>
Var<T> batch_objective(const Var<T>& lengths, const LabelBatch<T>& labels,
                       const MarginLossConfig& cfg,
                       const std::optional<DatasetStats>& stats,
                       std::size_t positive_class = 1) {
  cfg.validate();
  const auto& len = lengths.value();
  if (len.rank() != 2 || len.shape() != labels.one_hot.shape()) {
    throw DimensionError("batch_objective: lengths " + shape_string(len.shape()) +
                         " vs labels " + shape_string(labels.one_hot.shape()));
  }
  const std::size_t batch = len.dim(0), k = len.dim(1);
  const auto idx = labels.indices();

  std::vector<double> sample_weight(batch);
  if (stats) {
    if (k != 2) {
      throw ConfigError("class-imbalance weighting needs a two-class head, got " +
                        std::to_string(k));
    }
    std::size_t pos = 0;
    for (auto c : idx) pos += c == positive_class;
    const std::size_t neg = batch - pos;
    const double wp = stats->positive_weight(), wn = stats->negative_weight();
    for (std::size_t r = 0; r < batch; ++r) {
      sample_weight[r] = idx[r] == positive_class ? wp / static_cast<double>(pos)
                                                  : wn / static_cast<double>(neg);
    }
  } else {
    std::fill(sample_weight.begin(), sample_weight.end(),
              1.0 / static_cast<double>(batch));
  }

  double total = 0;
  Tensor<T> dlen(len.shape());
  for (std::size_t r = 0; r < batch; ++r) {
    double sample = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double l = len[r * k + c];
      double d = 0;
      if (c == idx[r]) {
        const double h = hinge(cfg.m_plus - l);
        sample += h * h;
        d = -2.0 * h;
      } else {
        const double h = hinge(l - cfg.m_minus);
        sample += cfg.lambda * h * h;
        d = 2.0 * cfg.lambda * h;
      }
      dlen[r * k + c] = static_cast<T>(sample_weight[r] * d);
    }
    total += sample_weight[r] * sample;
  }
  auto ln = lengths.node();
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(total)), {lengths},
                        [ln, dlen = std::move(dlen)](const Tensor<T>& g) {
                          Tensor<T> gl = dlen;
                          for (T& v : gl.data()) v *= g[0];
                          ln->accumulate(gl);
                        });
}

}  // namespace ops
}  // namespace covidcaps
