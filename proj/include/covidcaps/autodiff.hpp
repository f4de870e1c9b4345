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

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "covidcaps/tensor.hpp"

namespace covidcaps {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// While alive, operations on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <std::floating_point T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Receives this node's gradient and accumulates into the parents.
  std::function<void(const Tensor<T>&)> backward;

  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (grad.empty()) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

/// Handle onto a node of the recorded computation graph.
///
/// Copies share the node. Leaves created with `requires_grad` act as
/// parameters: their gradient accumulates across `backward` calls until
/// `zero_grad`.
template <std::floating_point T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>()) {}

  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }

  /// Gradient, or zeros shaped like the value when nothing has flowed in.
  Tensor<T> grad() const {
    if (node_->grad.empty()) return Tensor<T>(node_->value.shape());
    return node_->grad;
  }
  const Tensor<T>& raw_grad() const { return node_->grad; }

  void zero_grad() { node_->grad = Tensor<T>(node_->value.shape()); }
  void clear_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  /// Deep copy with no graph history.
  Var detached_clone() const {
    Var out(node_->value, node_->requires_grad);
    out.node_->grad = node_->grad;
    return out;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Records an operation result. `backward` is stored only when grad mode is on
/// and at least one input requires a gradient.
template <std::floating_point T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(const Tensor<T>&)> backward) {
  Var<T> out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

/// Reverse-mode sweep from a scalar output. Populates `grad` on every
/// reachable node that requires a gradient.
template <std::floating_point T>
void backward(const Var<T>& output) {
  if (output.value().size() != 1) {
    throw ContractError("backward requires a scalar output, got shape " +
                        shape_string(output.shape()));
  }
  // Iterative post-order DFS for a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(output.node().get(), 0);
  seen.insert(output.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // Interior nodes start clean so a graph can be swept more than once.
  for (Node<T>* n : order) {
    if (n->backward) n->grad = Tensor<T>();
  }
  Node<T>& root = *output.node();
  if (!root.requires_grad) return;
  root.accumulate(Tensor<T>(root.value.shape(), T{1}));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(n->grad);
  }
}

namespace ops {

template <std::floating_point T>
Var<T> sum(const Var<T>& x) {
  double acc = 0.0;
  for (T v : x.value().data()) acc += v;
  auto xn = x.node();
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(acc)), {x},
                        [xn](const Tensor<T>& g) {
                          xn->accumulate(Tensor<T>(xn->value.shape(), g[0]));
                        });
}

template <std::floating_point T>
Var<T> mean(const Var<T>& x) {
  double acc = 0.0;
  for (T v : x.value().data()) acc += v;
  const auto n = static_cast<double>(x.value().size());
  auto xn = x.node();
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(acc / n)), {x},
                        [xn, n](const Tensor<T>& g) {
                          xn->accumulate(Tensor<T>(
                              xn->value.shape(), static_cast<T>(g[0] / n)));
                        });
}

template <std::floating_point T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v *= factor;
  auto xn = x.node();
  return make_result<T>(std::move(out), {x}, [xn, factor](const Tensor<T>& g) {
    Tensor<T> gx = g;
    for (T& v : gx.data()) v *= factor;
    xn->accumulate(gx);
  });
}

template <std::floating_point T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>(std::move(out), {a, b}, [an, bn](const Tensor<T>& g) {
    an->accumulate(g);
    bn->accumulate(g);
  });
}

/// Elementwise product.
template <std::floating_point T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>(std::move(out), {a, b}, [an, bn](const Tensor<T>& g) {
    if (an->requires_grad) {
      Tensor<T> ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bn->value[i];
      an->accumulate(ga);
    }
    if (bn->requires_grad) {
      Tensor<T> gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= an->value[i];
      bn->accumulate(gb);
    }
  });
}

template <std::floating_point T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = v < T{0} ? T{0} : v;
  auto xn = x.node();
  return make_result<T>(std::move(out), {x}, [xn](const Tensor<T>& g) {
    Tensor<T> gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (!(xn->value[i] > T{0})) gx[i] = T{0};
    }
    xn->accumulate(gx);
  });
}

template <std::floating_point T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  auto xn = x.node();
  return make_result<T>(std::move(out), {x}, [xn](const Tensor<T>& g) {
    xn->accumulate(g.reshaped(xn->value.shape()));
  });
}

/// x[N, in] · Wᵀ + b, with W[out, in] and b[out].
template <std::floating_point T>
Var<T> dense(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1) {
    throw DimensionError("dense expects x[N,in], W[out,in], b[out]; got " +
                         shape_string(xv.shape()) + ", " +
                         shape_string(wv.shape()) + ", " +
                         shape_string(bv.shape()));
  }
  const std::size_t n = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
  if (wv.dim(1) != in || bv.dim(0) != out_dim) {
    throw DimensionError("dense: input width " + std::to_string(in) +
                         " vs weight " + shape_string(wv.shape()) +
                         " and bias " + shape_string(bv.shape()));
  }
  Tensor<T> out(Shape{n, out_dim});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = bv[o];
      for (std::size_t k = 0; k < in; ++k) acc += wv[o * in + k] * xv[r * in + k];
      out[r * out_dim + o] = static_cast<T>(acc);
    }
  }
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return make_result<T>(
      std::move(out), {x, weight, bias},
      [xn, wn, bn, n, in, out_dim](const Tensor<T>& g) {
        if (xn->requires_grad) {
          Tensor<T> gx(xn->value.shape());
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t o = 0; o < out_dim; ++o) {
              const T go = g[r * out_dim + o];
              for (std::size_t k = 0; k < in; ++k)
                gx[r * in + k] += go * wn->value[o * in + k];
            }
          xn->accumulate(gx);
        }
        if (wn->requires_grad) {
          Tensor<T> gw(wn->value.shape());
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t o = 0; o < out_dim; ++o) {
              const T go = g[r * out_dim + o];
              for (std::size_t k = 0; k < in; ++k)
                gw[o * in + k] += go * xn->value[r * in + k];
            }
          wn->accumulate(gw);
        }
        if (bn->requires_grad) {
          Tensor<T> gb(bn->value.shape());
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[r * out_dim + o];
          bn->accumulate(gb);
        }
      });
}

}  // namespace ops
}  // namespace covidcaps
