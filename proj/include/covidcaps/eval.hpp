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
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "covidcaps/error.hpp"

namespace covidcaps {

struct ScoredPrediction {
  double score = 0;         // positive-capsule length
  bool positive = false;    // ground truth
  std::string original_label;
  // Negative-capsule length, used only by the argmax decision rule.
  std::optional<double> negative_score;
};

enum class DecisionRule {
  threshold,  // positive iff score >= threshold
  argmax,     // positive iff score >= negative_score
};

struct MetricsReport {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0;
  std::optional<double> sensitivity;  // undefined when tp + fn == 0
  std::optional<double> specificity;  // undefined when tn + fp == 0
  std::optional<double> auc;          // undefined for single-class input
  double threshold = 0.5;
  std::map<std::string, double> fp_breakdown;
};

inline bool predicted_positive(const ScoredPrediction& p, double threshold,
                               DecisionRule rule) {
  if (rule == DecisionRule::argmax) {
    if (!p.negative_score) {
      throw ContractError("argmax decision rule needs the negative-capsule score");
    }
    return p.score >= *p.negative_score;
  }
  return p.score >= threshold;
}

inline MetricsReport classification_metrics(const std::vector<ScoredPrediction>& preds,
                                            double threshold = 0.5,
                                            DecisionRule rule = DecisionRule::threshold) {
  if (preds.empty()) throw ContractError("classification_metrics: no predictions");
  MetricsReport r;
  r.threshold = threshold;
  for (const auto& p : preds) {
    if (!std::isfinite(p.score)) throw ContractError("prediction score is not finite");
    const bool hit = predicted_positive(p, threshold, rule);
    if (p.positive) {
      ++(hit ? r.tp : r.fn);
    } else {
      ++(hit ? r.fp : r.tn);
    }
  }
  r.accuracy = static_cast<double>(r.tp + r.tn) / static_cast<double>(preds.size());
  if (r.tp + r.fn > 0)
    r.sensitivity = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
  if (r.tn + r.fp > 0)
    r.specificity = static_cast<double>(r.tn) / static_cast<double>(r.tn + r.fp);
  return r;
}

struct RocCurve {
  double auc = 0;
  // (fpr, tpr) by increasing threshold: (1,1) first, (0,0) last.
  std::vector<std::pair<double, double>> points;
};

/// AUC via the rank-sum (Mann–Whitney) statistic with mid-ranks for ties,
/// plus the ROC curve swept over the distinct scores.
inline RocCurve roc_auc(const std::vector<ScoredPrediction>& preds) {
  std::size_t n_pos = 0;
  for (const auto& p : preds) n_pos += p.positive;
  const std::size_t n_neg = preds.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw ContractError("roc_auc needs at least one positive and one negative");
  }
  std::vector<std::size_t> order(preds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return preds[a].score < preds[b].score;
  });

  RocCurve roc;
  double pos_rank_sum = 0;
  // Positives/negatives with score >= current threshold.
  std::size_t tp = n_pos, fp = n_neg;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t pos_here = 0;
    while (j < order.size() && preds[order[j]].score == preds[order[i]].score) {
      pos_here += preds[order[j]].positive;
      ++j;
    }
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    pos_rank_sum += mid_rank * static_cast<double>(pos_here);
    roc.points.emplace_back(static_cast<double>(fp) / static_cast<double>(n_neg),
                            static_cast<double>(tp) / static_cast<double>(n_pos));
    tp -= pos_here;
    fp -= (j - i) - pos_here;
    i = j;
  }
  roc.points.emplace_back(0.0, 0.0);
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  roc.auc = (pos_rank_sum - np * (np + 1) / 2.0) / (np * nn);
  return roc;
}

/// Fraction of false positives per original (pre-binarization) label.
inline std::map<std::string, double> false_positive_breakdown(
    const std::vector<ScoredPrediction>& preds, double threshold = 0.5,
    DecisionRule rule = DecisionRule::threshold) {
  std::map<std::string, std::size_t> counts;
  std::size_t fp = 0;
  for (const auto& p : preds) {
    if (!p.positive && predicted_positive(p, threshold, rule)) {
      ++counts[p.original_label];
      ++fp;
    }
  }
  std::map<std::string, double> out;
  for (const auto& [label, n] : counts) {
    out[label] = static_cast<double>(n) / static_cast<double>(fp);
  }
  return out;
}

/// Metrics, AUC (when both classes are present) and false-positive breakdown.
inline MetricsReport evaluate(const std::vector<ScoredPrediction>& preds,
                              double threshold = 0.5,
                              DecisionRule rule = DecisionRule::threshold) {
  MetricsReport r = classification_metrics(preds, threshold, rule);
  if (r.tp + r.fn > 0 && r.tn + r.fp > 0) r.auc = roc_auc(preds).auc;
  r.fp_breakdown = false_positive_breakdown(preds, threshold, rule);
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return {{"tp", r.tp},
          {"fp", r.fp},
          {"tn", r.tn},
          {"fn", r.fn},
          {"accuracy", r.accuracy},
          {"sensitivity", opt(r.sensitivity)},
          {"specificity", opt(r.specificity)},
          {"auc", opt(r.auc)},
          {"threshold", r.threshold},
          {"fp_breakdown", r.fp_breakdown}};
}

}  // namespace covidcaps
