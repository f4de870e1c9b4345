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
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "covidcaps/objective.hpp"

namespace covidcaps {

enum class LabelScheme { covid_binary, nih_5class };

inline std::string to_string(LabelScheme s) {
  return s == LabelScheme::covid_binary ? "covid_binary" : "nih_5class";
}

inline constexpr std::string_view kPositive = "positive";
inline constexpr std::string_view kNegative = "negative";

/// Class names in head order. Binary: index 1 is the positive class.
inline std::vector<std::string> class_names(LabelScheme s) {
  if (s == LabelScheme::covid_binary) return {std::string(kNegative), std::string(kPositive)};
  return {"No Findings", "Tumors", "Pleural Diseases", "Lung Infection", "Others"};
}

inline std::size_t class_index(LabelScheme s, const std::string& mapped) {
  const auto names = class_names(s);
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == mapped) return i;
  throw VocabularyError("label '" + mapped + "' is not a class of scheme " +
                        to_string(s));
}

struct ManifestRecord {
  std::string image_path;
  std::string raw_label;
  std::optional<std::string> mapped_label;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  LabelScheme scheme = LabelScheme::covid_binary;
  DatasetStats stats;                               // binary scheme only
  std::map<std::string, std::size_t> category_counts;  // mapped label -> rows
  std::size_t dropped = 0;                          // multi-label rows removed
};

/// Lowercase, '_' read as a space, runs of whitespace collapsed, trimmed.
inline std::string normalize_label(std::string_view raw) {
  std::string out;
  bool pending_space = false;
  for (char ch : raw) {
    unsigned char c = static_cast<unsigned char>(ch);
    if (c == '_' || std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Label schemes
// ---------------------------------------------------------------------------

/// Canonical spelling of a four-class COVID dataset label.
inline std::string canonical_covid_label(std::string_view raw) {
  static const std::map<std::string, std::string> vocab = {
      {"normal", "Normal"},
      {"bacterial", "Bacterial"},
      {"non-covid viral", "Non-COVID Viral"},
      {"covid-19", "COVID-19"},
  };
  auto it = vocab.find(normalize_label(raw));
  if (it == vocab.end()) {
    throw VocabularyError("unknown label '" + std::string(raw) +
                          "'; expected one of Normal, Bacterial, Non-COVID Viral, "
                          "COVID-19");
  }
  return it->second;
}

/// COVID-19 -> positive; Normal, Bacterial, Non-COVID Viral -> negative.
inline std::vector<ManifestRecord> binarize_labels(std::vector<ManifestRecord> records) {
  for (auto& r : records) {
    r.mapped_label = std::string(canonical_covid_label(r.raw_label) == "COVID-19"
                                     ? kPositive
                                     : kNegative);
  }
  return records;
}

/// Five-category grouping of the fifteen NIH chest X-ray labels.
inline const std::map<std::string, std::string>& nih_category_map() {
  static const std::map<std::string, std::string> m = {
      {"no findings", "No Findings"},
      {"no finding", "No Findings"},
      {"infiltration", "Tumors"},
      {"mass", "Tumors"},
      {"nodule", "Tumors"},
      {"effusion", "Pleural Diseases"},
      {"pleural thickening", "Pleural Diseases"},
      {"pneumothorax", "Pleural Diseases"},
      {"consolidation", "Lung Infection"},
      {"pneumonia", "Lung Infection"},
      {"atelectasis", "Others"},
      {"cardiomegaly", "Others"},
      {"edema", "Others"},
      {"emphysema", "Others"},
      {"fibrosis", "Others"},
      {"hernia", "Others"},
  };
  return m;
}

inline std::string nih_category(std::string_view raw_single) {
  const auto& m = nih_category_map();
  auto it = m.find(normalize_label(raw_single));
  if (it == m.end()) {
    throw VocabularyError("unknown NIH label '" + std::string(raw_single) + "'");
  }
  return it->second;
}

struct NihMapping {
  std::vector<ManifestRecord> kept;
  std::size_t dropped = 0;
};

/// Maps single-label rows to their category. Rows carrying more than one
/// distinct raw label ('|'-separated) are dropped and counted; every label,
/// including those on dropped rows, must be in the NIH vocabulary.
inline NihMapping map_nih_labels(std::vector<ManifestRecord> records) {
  NihMapping out;
  for (auto& r : records) {
    std::set<std::string> labels;
    std::string category;
    std::size_t start = 0;
    while (true) {
      const auto bar = r.raw_label.find('|', start);
      const std::string part = r.raw_label.substr(start, bar - start);
      category = nih_category(part);
      labels.insert(normalize_label(part) == "no finding" ? "no findings"
                                                          : normalize_label(part));
      if (bar == std::string::npos) break;
      start = bar + 1;
    }
    if (labels.size() > 1) {
      ++out.dropped;
      continue;
    }
    r.mapped_label = category;
    out.kept.push_back(std::move(r));
  }
  return out;
}

inline DatasetManifest make_manifest(std::vector<ManifestRecord> records,
                                     LabelScheme scheme) {
  DatasetManifest m;
  m.scheme = scheme;
  if (scheme == LabelScheme::covid_binary) {
    m.records = binarize_labels(std::move(records));
  } else {
    auto mapped = map_nih_labels(std::move(records));
    m.records = std::move(mapped.kept);
    m.dropped = mapped.dropped;
  }
  for (const auto& r : m.records) {
    ++m.category_counts[*r.mapped_label];
    if (scheme == LabelScheme::covid_binary) {
      (*r.mapped_label == kPositive ? m.stats.n_pos : m.stats.n_neg) += 1;
    }
  }
  return m;
}

inline DatasetStats class_counts(const DatasetManifest& manifest) {
  if (manifest.scheme != LabelScheme::covid_binary) {
    throw SchemeError("class_counts needs the covid_binary scheme, manifest is " +
                      to_string(manifest.scheme));
  }
  DatasetStats s;
  for (const auto& r : manifest.records) {
    if (!r.mapped_label) throw SchemeError("record " + r.image_path + " is unmapped");
    (*r.mapped_label == kPositive ? s.n_pos : s.n_neg) += 1;
  }
  return s;
}

// ---------------------------------------------------------------------------
// CSV manifest
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line,
                                               std::size_t line_no) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          fields.back().push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        fields.back().push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back().push_back(c);
    }
  }
  if (quoted) {
    throw ConfigError("manifest line " + std::to_string(line_no) +
                      ": unterminated quote");
  }
  return fields;
}

inline std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

}  // namespace detail

/// Parses `path,label` CSV text. Relative image paths are resolved against
/// `base_dir`.
inline std::vector<ManifestRecord> parse_manifest_csv(const std::string& text,
                                                      const std::filesystem::path& base_dir = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<ManifestRecord> records;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_csv_line(line, line_no);
    if (!header_seen) {
      if (fields.size() != 2 || detail::trim(fields[0]) != "path" ||
          detail::trim(fields[1]) != "label") {
        throw ConfigError("manifest header must be 'path,label'");
      }
      header_seen = true;
      continue;
    }
    if (fields.size() != 2) {
      throw ConfigError("manifest line " + std::to_string(line_no) +
                        ": expected 2 fields, got " + std::to_string(fields.size()));
    }
    std::string path = detail::trim(fields[0]);
    if (path.empty()) {
      throw ConfigError("manifest line " + std::to_string(line_no) + ": empty path");
    }
    std::filesystem::path p(path);
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    records.push_back({p.string(), detail::trim(fields[1]), std::nullopt});
  }
  if (!header_seen) throw ConfigError("manifest is empty (no header)");
  return records;
}

inline std::vector<ManifestRecord> read_manifest_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_manifest_csv(ss.str(), std::filesystem::path(path).parent_path());
}

inline DatasetManifest load_manifest(const std::string& path, LabelScheme scheme) {
  return make_manifest(read_manifest_csv(path), scheme);
}

// ---------------------------------------------------------------------------
// Stratified split
// ---------------------------------------------------------------------------

/// Partitions each class independently: a seeded shuffle of the class's
/// records, the first round(fraction·n) go to training. Both partitions keep
/// manifest order. Every class needs at least two records.
inline std::pair<DatasetManifest, DatasetManifest> split_train_val(
    const DatasetManifest& manifest, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction < 1)) {
    throw SplitError("split fraction must be in (0,1)");
  }
  if (manifest.records.empty()) throw SplitError("cannot split an empty manifest");
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (!r.mapped_label) throw SplitError("record " + r.image_path + " is unmapped");
    by_class[*r.mapped_label].push_back(i);
  }
  std::vector<char> in_train(manifest.records.size(), 0);
  std::uint32_t class_ordinal = 0;
  for (auto& [label, idx] : by_class) {
    if (idx.size() < 2) {
      throw SplitError("class '" + label + "' has " + std::to_string(idx.size()) +
                       " record(s); stratified split needs at least 2");
    }
    std::seed_seq seq{static_cast<std::uint32_t>(seed),
                      static_cast<std::uint32_t>(seed >> 32), class_ordinal++};
    std::mt19937_64 rng(seq);
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_train = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    for (std::size_t k = 0; k < n_train; ++k) in_train[idx[k]] = 1;
  }
  std::vector<ManifestRecord> train, val;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    (in_train[i] ? train : val).push_back(manifest.records[i]);
  }
  auto rebuild = [&](std::vector<ManifestRecord> recs) {
    DatasetManifest m;
    m.scheme = manifest.scheme;
    for (const auto& r : recs) {
      ++m.category_counts[*r.mapped_label];
      if (m.scheme == LabelScheme::covid_binary)
        (*r.mapped_label == kPositive ? m.stats.n_pos : m.stats.n_neg) += 1;
    }
    m.records = std::move(recs);
    return m;
  };
  return {rebuild(std::move(train)), rebuild(std::move(val))};
}

}  // namespace covidcaps
