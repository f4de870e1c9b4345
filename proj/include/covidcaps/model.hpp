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
#include <cstdint>
#include <cstdio>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "covidcaps/capsule.hpp"
#include "covidcaps/layers.hpp"
#include "covidcaps/objective.hpp"

namespace covidcaps {

// ---------------------------------------------------------------------------
// Architecture configuration
// ---------------------------------------------------------------------------

struct ConvBlockConfig {
  std::size_t filters = 64;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool batch_norm = false;  // applied after the convolution, before ReLU
  std::size_t avg_pool = 0;  // pool size (stride = size) after ReLU; 0 = none

  friend bool operator==(const ConvBlockConfig&, const ConvBlockConfig&) = default;
};

struct CapsuleLayerConfig {
  std::size_t count = 2;
  std::size_t dim = 16;

  friend bool operator==(const CapsuleLayerConfig&, const CapsuleLayerConfig&) = default;
};

/// Network description: a stack of convolution blocks, a reshape of the last
/// feature map into primary capsules, then routing capsule layers. The last
/// capsule layer is the classification head (one capsule per class).
struct ArchitectureConfig {
  std::size_t input_height = 128;
  std::size_t input_width = 128;
  std::size_t input_channels = 1;
  std::vector<ConvBlockConfig> convs;
  std::size_t primary_capsule_dim = 128;
  std::vector<CapsuleLayerConfig> capsules;
  std::size_t routing_iters = 3;
  // W[1,J,Dout,Din] per layer instead of W[I,J,Dout,Din].
  bool share_capsule_weights = true;
  MarginLossConfig loss;
  std::uint64_t seed = 0;
  // Bumped by every head replacement; keys the head's init stream.
  std::uint64_t head_generation = 0;

  std::size_t num_classes() const { return capsules.empty() ? 0 : capsules.back().count; }

  /// Four conv layers (BN after the first, 2x2 average pooling after the
  /// second) feeding three routing capsule layers.
  ///
  ///   conv1  64@3x3 s1, BN, ReLU
  ///   conv2  64@3x3 s1, ReLU, avgpool 2x2
  ///   conv3 128@3x3 s1, ReLU
  ///   conv4 128@3x3 s2, ReLU   -> one 128-d primary capsule per location
  ///   caps1 32x8, caps2 32x8, caps3 num_classes x16 (shared transforms)
  static ArchitectureConfig covid_caps(std::size_t num_classes = 2) {
    ArchitectureConfig cfg;
    cfg.convs = {{64, 3, 1, 0, true, 0},
                 {64, 3, 1, 0, false, 2},
                 {128, 3, 1, 0, false, 0},
                 {128, 3, 2, 0, false, 0}};
    cfg.primary_capsule_dim = 128;
    cfg.capsules = {{32, 8}, {32, 8}, {num_classes, 16}};
    return cfg;
  }

  /// Same topology at a width and resolution small enough for CPU smoke runs.
  static ArchitectureConfig compact(std::size_t image_size = 24,
                                    std::size_t num_classes = 2) {
    ArchitectureConfig cfg;
    cfg.input_height = cfg.input_width = image_size;
    cfg.convs = {{8, 3, 1, 1, true, 0},
                 {8, 3, 1, 1, false, 2},
                 {16, 3, 1, 1, false, 0},
                 {16, 3, 2, 1, false, 0}};
    cfg.primary_capsule_dim = 16;
    cfg.capsules = {{8, 8}, {8, 8}, {num_classes, 8}};
    return cfg;
  }

  void validate() const {
    if (input_height == 0 || input_width == 0 || input_channels == 0)
      throw BuildError("input: dimensions must be >= 1");
    if (convs.empty()) throw BuildError("architecture needs at least one conv block");
    if (capsules.empty())
      throw BuildError("architecture needs at least one routing capsule layer");
    if (primary_capsule_dim == 0) throw BuildError("primary capsule dim must be >= 1");
    for (std::size_t i = 0; i < capsules.size(); ++i) {
      if (capsules[i].count == 0 || capsules[i].dim == 0)
        throw BuildError("caps" + std::to_string(i + 1) +
                         ": capsule count and dim must be >= 1");
    }
    if (routing_iters < 1) throw BuildError("routing iterations must be >= 1");
    loss.validate();
  }

  friend bool operator==(const ArchitectureConfig&, const ArchitectureConfig&) = default;
};

// ---------------------------------------------------------------------------
// Layer list
// ---------------------------------------------------------------------------

struct PrimaryCapsuleSpec {
  std::size_t dim = 8;
};

struct RoutingCapsuleSpec {
  std::size_t in_count = 0, in_dim = 0, count = 0, dim = 0, iters = 3;
  bool shared = true;
};

struct LayerSpec {
  std::string name;
  std::variant<Conv2dSpec, BatchNormSpec, ReluSpec, AvgPool2dSpec,
               PrimaryCapsuleSpec, RoutingCapsuleSpec>
      spec;
  Shape output;  // per-sample output shape
};

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

template <std::floating_point T>
struct Parameter {
  std::string name;
  Var<T> var;
  bool trainable = true;
  bool buffer = false;  // state such as running statistics; never trained
};

/// Named tensors in registration order. Copies are deep.
template <std::floating_point T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other) { copy_from(other); }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this != &other) copy_from(other);
    return *this;
  }
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  void add(std::string name, Tensor<T> value, bool buffer = false) {
    if (index_.count(name)) throw BuildError("duplicate parameter " + name);
    index_[name] = entries_.size();
    Parameter<T> p{std::move(name), Var<T>(std::move(value), !buffer), !buffer, buffer};
    entries_.push_back(std::move(p));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named " + name);
    return entries_[it->second];
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named " + name);
    return entries_[it->second];
  }

  std::vector<Parameter<T>>& entries() { return entries_; }
  const std::vector<Parameter<T>>& entries() const { return entries_; }

  void replace(const std::string& name, Tensor<T> value) {
    auto& p = at(name);
    p.var = Var<T>(std::move(value), !p.buffer);
  }

 private:
  void copy_from(const ParameterStore& other) {
    entries_.clear();
    index_ = other.index_;
    for (const auto& p : other.entries_) {
      entries_.push_back({p.name, p.var.detached_clone(), p.trainable, p.buffer});
    }
  }

  std::vector<Parameter<T>> entries_;
  std::map<std::string, std::size_t> index_;
};

template <std::floating_point T>
std::size_t count_trainable_params(const ParameterStore<T>& store) {
  std::size_t n = 0;
  for (const auto& p : store.entries())
    if (p.trainable && !p.buffer) n += p.var.value().size();
  return n;
}

/// Trainable and frozen parameters plus buffers (running statistics).
template <std::floating_point T>
std::size_t count_all_params(const ParameterStore<T>& store) {
  std::size_t n = 0;
  for (const auto& p : store.entries()) n += p.var.value().size();
  return n;
}

/// Glob match supporting '*' and '?'.
inline bool glob_match(std::string_view pattern, std::string_view text) {
  std::size_t p = 0, t = 0, star = std::string_view::npos, mark = 0;
  while (t < text.size()) {
    if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
      ++p;
      ++t;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = t;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      t = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

namespace detail {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

template <std::floating_point T>
Tensor<T> uniform_init(Shape shape, double limit, std::uint64_t seed,
                       std::string_view name, std::uint64_t stream) {
  const std::uint64_t h = fnv1a(name);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace detail

enum class ForwardMode { train, infer };

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Capsule classifier: ordered layers, parameter store and trainable mask.
template <std::floating_point T>
class ModelGraph {
 public:
  ModelGraph() = default;

  const ArchitectureConfig& config() const { return config_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

  std::size_t num_classes() const { return config_.num_classes(); }
  std::string head_name() const {
    return "caps" + std::to_string(config_.capsules.size());
  }

  /// Lengths [B, K] (and the final capsules [B, K, D]) for images [B,C,H,W].
  struct Output {
    Var<T> lengths;
    Var<T> capsules;
  };

  Output forward(const Var<T>& images, ForwardMode mode) {
    const auto& x0 = images.value();
    const Shape expected{config_.input_channels, config_.input_height,
                         config_.input_width};
    if (x0.rank() != 4 || Shape(x0.shape().begin() + 1, x0.shape().end()) != expected) {
      throw DimensionError("model expects images [N," +
                           std::to_string(expected[0]) + "," +
                           std::to_string(expected[1]) + "," +
                           std::to_string(expected[2]) + "], got " +
                           shape_string(x0.shape()));
    }
    Var<T> x = images;
    for (const auto& layer : layers_) {
      std::visit(
          [&](const auto& s) {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, Conv2dSpec>) {
              x = ops::conv2d(x, param_var(layer.name + ".weight"),
                              param_var(layer.name + ".bias"), s.stride, s.padding);
            } else if constexpr (std::is_same_v<S, BatchNormSpec>) {
              x = apply_batch_norm(layer.name, s, x, mode);
            } else if constexpr (std::is_same_v<S, ReluSpec>) {
              x = ops::relu(x);
            } else if constexpr (std::is_same_v<S, AvgPool2dSpec>) {
              x = ops::avg_pool2d(x, s.pool, s.stride);
            } else if constexpr (std::is_same_v<S, PrimaryCapsuleSpec>) {
              x = ops::squash(ops::to_capsules(x, s.dim));
            } else if constexpr (std::is_same_v<S, RoutingCapsuleSpec>) {
              x = ops::route(ops::capsule_votes(x, param_var(layer.name + ".W")),
                             s.iters);
            }
          },
          layer.spec);
    }
    return {ops::capsule_lengths(x), x};
  }

  Output forward(const Tensor<T>& images, ForwardMode mode) {
    return forward(Var<T>(images), mode);
  }

  /// Inference-mode class lengths [B, K]; records no graph.
  Tensor<T> predict(const Tensor<T>& images) {
    NoGradGuard guard;
    return forward(Var<T>(images), ForwardMode::infer).lengths.value();
  }

  void set_loss_config(const MarginLossConfig& loss) {
    loss.validate();
    config_.loss = loss;
  }

  void zero_grad() {
    for (auto& p : params_.entries())
      if (!p.buffer) p.var.zero_grad();
  }

  std::size_t count_trainable_params() const {
    return covidcaps::count_trainable_params(params_);
  }
  std::size_t count_all_params() const { return covidcaps::count_all_params(params_); }

  /// Sets the trainable flag on every non-buffer parameter whose name matches
  /// the glob `selector` (e.g. "conv*", "bn*", "caps*"). Returns the number
  /// of parameters matched.
  std::size_t set_trainable(std::string_view selector, bool flag) {
    std::size_t matched = 0;
    for (auto& p : params_.entries()) {
      if (p.buffer || !glob_match(selector, p.name)) continue;
      p.trainable = flag;
      p.var.set_requires_grad(flag);
      ++matched;
    }
    if (matched == 0) {
      throw SelectorError("selector '" + std::string(selector) +
                          "' matches no parameter");
    }
    return matched;
  }

  /// Re-instantiates the final capsule layer for `new_num_classes` outputs
  /// with a fresh initialization. Every other parameter is untouched.
  void replace_head(std::size_t new_num_classes) {
    if (new_num_classes < 2) {
      throw ParameterError("replace_head: need at least 2 classes, got " +
                           std::to_string(new_num_classes));
    }
    config_.capsules.back().count = new_num_classes;
    ++config_.head_generation;
    auto& head = layers_.back();
    auto& spec = std::get<RoutingCapsuleSpec>(head.spec);
    spec.count = new_num_classes;
    head.output = {new_num_classes, spec.dim};
    const std::string wname = head.name + ".W";
    params_.replace(wname, init_capsule_weights(spec, wname));
    params_.at(wname).trainable = true;
    params_.at(wname).var.set_requires_grad(true);
  }

  static ModelGraph build(const ArchitectureConfig& cfg) {
    cfg.validate();
    ModelGraph m;
    m.config_ = cfg;
    Shape shape{cfg.input_channels, cfg.input_height, cfg.input_width};
    std::size_t bn_count = 0;
    for (std::size_t i = 0; i < cfg.convs.size(); ++i) {
      const auto& c = cfg.convs[i];
      const std::string name = "conv" + std::to_string(i + 1);
      if (c.filters == 0 || c.kernel == 0 || c.stride == 0)
        throw BuildError(name + ": filters, kernel and stride must be >= 1");
      if (shape[1] + 2 * c.padding < c.kernel || shape[2] + 2 * c.padding < c.kernel) {
        throw BuildError(name + ": kernel " + std::to_string(c.kernel) +
                         " does not fit input " + shape_string(shape));
      }
      Shape out{c.filters, conv_output_extent(shape[1], c.kernel, c.stride, c.padding),
                conv_output_extent(shape[2], c.kernel, c.stride, c.padding)};
      const std::size_t fan_in = shape[0] * c.kernel * c.kernel;
      m.params_.add(name + ".weight",
                    detail::uniform_init<T>({c.filters, shape[0], c.kernel, c.kernel},
                                            std::sqrt(6.0 / static_cast<double>(fan_in)),
                                            cfg.seed, name + ".weight", 0));
      m.params_.add(name + ".bias", Tensor<T>(Shape{c.filters}));
      m.layers_.push_back({name, Conv2dSpec{c.filters, c.kernel, c.stride, c.padding}, out});
      shape = out;
      if (c.batch_norm) {
        const std::string bn = "bn" + std::to_string(++bn_count);
        m.params_.add(bn + ".gamma", Tensor<T>(Shape{shape[0]}, T{1}));
        m.params_.add(bn + ".beta", Tensor<T>(Shape{shape[0]}));
        m.params_.add(bn + ".running_mean", Tensor<T>(Shape{shape[0]}), true);
        m.params_.add(bn + ".running_var", Tensor<T>(Shape{shape[0]}, T{1}), true);
        m.layers_.push_back({bn, BatchNormSpec{}, shape});
      }
      m.layers_.push_back({name + ".relu", ReluSpec{}, shape});
      if (c.avg_pool > 0) {
        if (c.avg_pool > shape[1] || c.avg_pool > shape[2]) {
          throw BuildError(name + ".pool: pool " + std::to_string(c.avg_pool) +
                           " exceeds feature map " + shape_string(shape));
        }
        shape = {shape[0], (shape[1] - c.avg_pool) / c.avg_pool + 1,
                 (shape[2] - c.avg_pool) / c.avg_pool + 1};
        m.layers_.push_back(
            {name + ".pool", AvgPool2dSpec{c.avg_pool, c.avg_pool}, shape});
      }
    }
    const std::size_t volume = shape_volume(shape);
    if (volume % cfg.primary_capsule_dim != 0) {
      throw BuildError("primary: capsule dim " +
                       std::to_string(cfg.primary_capsule_dim) +
                       " does not divide conv output volume " +
                       std::to_string(volume) + " " + shape_string(shape));
    }
    std::size_t in_count = volume / cfg.primary_capsule_dim;
    std::size_t in_dim = cfg.primary_capsule_dim;
    m.layers_.push_back({"primary", PrimaryCapsuleSpec{in_dim}, {in_count, in_dim}});
    for (std::size_t i = 0; i < cfg.capsules.size(); ++i) {
      const auto& c = cfg.capsules[i];
      const std::string name = "caps" + std::to_string(i + 1);
      RoutingCapsuleSpec spec{in_count, in_dim, c.count, c.dim, cfg.routing_iters,
                              cfg.share_capsule_weights};
      m.params_.add(name + ".W", m.init_capsule_weights(spec, name + ".W"));
      m.layers_.push_back({name, spec, {c.count, c.dim}});
      in_count = c.count;
      in_dim = c.dim;
    }
    return m;
  }

 private:
  Var<T>& param_var(const std::string& name) { return params_.at(name).var; }

  Tensor<T> init_capsule_weights(const RoutingCapsuleSpec& s,
                                 const std::string& name) const {
    // Uniform with standard deviation J/sqrt(I·Dout).
    const double stddev = static_cast<double>(s.count) /
                          std::sqrt(static_cast<double>(s.in_count * s.dim));
    return detail::uniform_init<T>({s.shared ? 1 : s.in_count, s.count, s.dim, s.in_dim},
                                   std::sqrt(3.0) * stddev, config_.seed, name,
                                   config_.head_generation);
  }

  Var<T> apply_batch_norm(const std::string& name, const BatchNormSpec& spec,
                          const Var<T>& x, ForwardMode mode) {
    auto& gamma = params_.at(name + ".gamma");
    auto& beta = params_.at(name + ".beta");
    auto& rmean = params_.at(name + ".running_mean");
    auto& rvar = params_.at(name + ".running_var");
    // Frozen affine parameters pin the whole layer, statistics included.
    const bool frozen = !gamma.trainable && !beta.trainable;
    const NormMode nm =
        (mode == ForwardMode::train && !frozen) ? NormMode::train : NormMode::infer;
    RunningStats<T> stats{rmean.var.value(), rvar.var.value(), true};
    Var<T> out = ops::batch_norm(x, gamma.var, beta.var, spec, nm, &stats);
    if (nm == NormMode::train) {
      rmean.var.mutable_value() = std::move(stats.mean);
      rvar.var.mutable_value() = std::move(stats.var);
    }
    return out;
  }

  ArchitectureConfig config_;
  std::vector<LayerSpec> layers_;
  ParameterStore<T> params_;
};

template <std::floating_point T>
ModelGraph<T> build_model(const ArchitectureConfig& cfg) {
  return ModelGraph<T>::build(cfg);
}

/// Closed-form trainable-parameter count of a configuration, computed from
/// the layer shapes alone without building the model.
inline std::size_t expected_trainable_params(const ArchitectureConfig& cfg) {
  std::size_t total = 0;
  std::size_t ch = cfg.input_channels, h = cfg.input_height, w = cfg.input_width;
  for (const auto& c : cfg.convs) {
    total += c.filters * ch * c.kernel * c.kernel + c.filters;
    if (c.batch_norm) total += 2 * c.filters;
    ch = c.filters;
    h = (h + 2 * c.padding - c.kernel) / c.stride + 1;
    w = (w + 2 * c.padding - c.kernel) / c.stride + 1;
    if (c.avg_pool) {
      h = (h - c.avg_pool) / c.avg_pool + 1;
      w = (w - c.avg_pool) / c.avg_pool + 1;
    }
  }
  std::size_t in_count = ch * h * w / cfg.primary_capsule_dim;
  std::size_t in_dim = cfg.primary_capsule_dim;
  for (const auto& c : cfg.capsules) {
    total += (cfg.share_capsule_weights ? 1 : in_count) * c.count * c.dim * in_dim;
    in_count = c.count;
    in_dim = c.dim;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Canonical text form of the configuration
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// One `key=value` per line, keys in fixed order. Reals use 17 significant
/// digits so doubles round-trip exactly.
inline std::string to_canonical_text(const ArchitectureConfig& cfg) {
  std::ostringstream os;
  os << "input_height=" << cfg.input_height << '\n'
     << "input_width=" << cfg.input_width << '\n'
     << "input_channels=" << cfg.input_channels << '\n'
     << "conv_count=" << cfg.convs.size() << '\n';
  for (std::size_t i = 0; i < cfg.convs.size(); ++i) {
    const auto& c = cfg.convs[i];
    os << "conv." << i << '=' << c.filters << ',' << c.kernel << ',' << c.stride
       << ',' << c.padding << ',' << (c.batch_norm ? 1 : 0) << ',' << c.avg_pool
       << '\n';
  }
  os << "primary_capsule_dim=" << cfg.primary_capsule_dim << '\n'
     << "capsule_count=" << cfg.capsules.size() << '\n';
  for (std::size_t i = 0; i < cfg.capsules.size(); ++i) {
    os << "capsule." << i << '=' << cfg.capsules[i].count << ','
       << cfg.capsules[i].dim << '\n';
  }
  os << "routing_iters=" << cfg.routing_iters << '\n'
     << "share_capsule_weights=" << (cfg.share_capsule_weights ? 1 : 0) << '\n'
     << "loss.m_plus=" << detail::format_real(cfg.loss.m_plus) << '\n'
     << "loss.m_minus=" << detail::format_real(cfg.loss.m_minus) << '\n'
     << "loss.lambda=" << detail::format_real(cfg.loss.lambda) << '\n'
     << "seed=" << cfg.seed << '\n'
     << "head_generation=" << cfg.head_generation << '\n';
  return os.str();
}

inline std::map<std::string, std::string> parse_key_values(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line without '=': " + std::string(line));
    }
    kv[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 1));
  }
  return kv;
}

namespace detail {

inline const std::string& require_key(const std::map<std::string, std::string>& kv,
                                      const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ConfigError("config is missing key " + key);
  return it->second;
}

inline std::uint64_t parse_uint(const std::string& s, const std::string& key) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": not an unsigned integer: " + s);
  }
}

inline double parse_double(const std::string& s, const std::string& key) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": not a number: " + s);
  }
}

inline std::vector<std::uint64_t> parse_uint_list(const std::string& s,
                                                  const std::string& key) {
  std::vector<std::uint64_t> out;
  std::size_t pos = 0;
  while (true) {
    const auto comma = s.find(',', pos);
    out.push_back(parse_uint(s.substr(pos, comma - pos), key));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace detail

inline ArchitectureConfig from_canonical_text(
    const std::map<std::string, std::string>& kv) {
  using detail::parse_uint;
  using detail::require_key;
  ArchitectureConfig cfg;
  auto u = [&](const std::string& k) { return parse_uint(require_key(kv, k), k); };
  cfg.input_height = u("input_height");
  cfg.input_width = u("input_width");
  cfg.input_channels = u("input_channels");
  const auto nconv = u("conv_count");
  for (std::size_t i = 0; i < nconv; ++i) {
    const std::string key = "conv." + std::to_string(i);
    const auto v = detail::parse_uint_list(require_key(kv, key), key);
    if (v.size() != 6) throw ConfigError(key + ": expected 6 fields");
    cfg.convs.push_back({v[0], v[1], v[2], v[3], v[4] != 0, v[5]});
  }
  cfg.primary_capsule_dim = u("primary_capsule_dim");
  const auto ncaps = u("capsule_count");
  for (std::size_t i = 0; i < ncaps; ++i) {
    const std::string key = "capsule." + std::to_string(i);
    const auto v = detail::parse_uint_list(require_key(kv, key), key);
    if (v.size() != 2) throw ConfigError(key + ": expected 2 fields");
    cfg.capsules.push_back({v[0], v[1]});
  }
  cfg.routing_iters = u("routing_iters");
  cfg.share_capsule_weights = u("share_capsule_weights") != 0;
  cfg.loss.m_plus = detail::parse_double(require_key(kv, "loss.m_plus"), "loss.m_plus");
  cfg.loss.m_minus =
      detail::parse_double(require_key(kv, "loss.m_minus"), "loss.m_minus");
  cfg.loss.lambda = detail::parse_double(require_key(kv, "loss.lambda"), "loss.lambda");
  cfg.seed = u("seed");
  cfg.head_generation = u("head_generation");
  return cfg;
}

inline ArchitectureConfig from_canonical_text(std::string_view text) {
  return from_canonical_text(parse_key_values(text));
}

}  // namespace covidcaps
