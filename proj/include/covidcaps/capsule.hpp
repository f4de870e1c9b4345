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
#include <vector>

#include "covidcaps/autodiff.hpp"

namespace covidcaps {

/// Capsule activations of one sample: values[num_capsules, capsule_dim].
template <std::floating_point T>
struct CapsuleTensor {
  Tensor<T> values;

  CapsuleTensor() = default;
  explicit CapsuleTensor(Tensor<T> v) : values(std::move(v)) {
    if (values.rank() != 2) {
      throw DimensionError("capsule tensor must be [num_capsules, dim], got " +
                           shape_string(values.shape()));
    }
  }
  std::size_t num_capsules() const { return values.dim(0); }
  std::size_t capsule_dim() const { return values.dim(1); }
};

/// Predictions of every input capsule i for every output capsule j:
/// values[num_in, num_out, out_dim].
template <std::floating_point T>
struct VoteTensor {
  Tensor<T> values;

  VoteTensor() = default;
  explicit VoteTensor(Tensor<T> v) : values(std::move(v)) {
    if (values.rank() != 3) {
      throw DimensionError("vote tensor must be [num_in, num_out, out_dim], got " +
                           shape_string(values.shape()));
    }
  }
  std::size_t num_in() const { return values.dim(0); }
  std::size_t num_out() const { return values.dim(1); }
  std::size_t out_dim() const { return values.dim(2); }
};

/// Transform weights W[num_in, num_out, out_dim, in_dim]. A leading extent of
/// 1 shares one transform per output capsule across all input capsules.
template <std::floating_point T>
struct CapsuleLayerParams {
  Tensor<T> weights;
  std::size_t routing_iters = 3;
};

/// Routing quantities of one iteration, each [num_in, num_out] per sample
/// (batched as [batch, num_in, num_out]). `logits` are the values c was
/// computed from; `agreement` is what gets added to them afterwards.
template <std::floating_point T>
struct RoutingState {
  Tensor<T> logits;
  Tensor<T> couplings;
  Tensor<T> agreement;
};

namespace ops {

/// Votes û[b,i,j,:] = W[i,j] · u[b,i,:].
template <std::floating_point T>
Var<T> capsule_votes(const Var<T>& inputs, const Var<T>& weights) {
  const auto& u = inputs.value();
  const auto& w = weights.value();
  if (u.rank() != 3 || w.rank() != 4) {
    throw DimensionError("capsule_votes expects u[B,I,Din] and W[I,J,Dout,Din]; "
                         "got " + shape_string(u.shape()) + ", " +
                         shape_string(w.shape()));
  }
  const std::size_t batch = u.dim(0), ni = u.dim(1), din = u.dim(2);
  const std::size_t wi = w.dim(0), nj = w.dim(1), dout = w.dim(2);
  if (w.dim(3) != din) {
    throw DimensionError("capsule_votes: input capsule dim " +
                         std::to_string(din) + " but W expects " +
                         std::to_string(w.dim(3)));
  }
  if (wi != 1 && wi != ni) {
    throw DimensionError("capsule_votes: W has " + std::to_string(wi) +
                         " input slots for " + std::to_string(ni) +
                         " input capsules");
  }
  const bool shared = wi == 1 && ni != 1;
  Tensor<T> out(Shape{batch, ni, nj, dout});
  const std::size_t jo = nj * dout;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < ni; ++i) {
      const T* up = u.data().data() + (b * ni + i) * din;
      const T* wp = w.data().data() + (shared ? 0 : i) * jo * din;
      T* op = out.data().data() + (b * ni + i) * jo;
      for (std::size_t r = 0; r < jo; ++r) {
        const T* wr = wp + r * din;
        T acc = 0;
        for (std::size_t d = 0; d < din; ++d) acc += wr[d] * up[d];
        op[r] = acc;
      }
    }
  auto un = inputs.node(), wn = weights.node();
  return make_result<T>(
      std::move(out), {inputs, weights},
      [un, wn, batch, ni, din, jo, shared](const Tensor<T>& g) {
        Tensor<T> du, dw;
        if (un->requires_grad) du = Tensor<T>(un->value.shape());
        if (wn->requires_grad) dw = Tensor<T>(wn->value.shape());
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < ni; ++i) {
            const T* up = un->value.data().data() + (b * ni + i) * din;
            const std::size_t wo = (shared ? 0 : i) * jo * din;
            const T* wp = wn->value.data().data() + wo;
            const T* gp = g.data().data() + (b * ni + i) * jo;
            T* dup = du.empty() ? nullptr : du.data().data() + (b * ni + i) * din;
            T* dwp = dw.empty() ? nullptr : dw.data().data() + wo;
            for (std::size_t r = 0; r < jo; ++r) {
              const T gr = gp[r];
              if (dup) {
                const T* wr = wp + r * din;
                for (std::size_t d = 0; d < din; ++d) dup[d] += gr * wr[d];
              }
              if (dwp) {
                T* dwr = dwp + r * din;
                for (std::size_t d = 0; d < din; ++d) dwr[d] += gr * up[d];
              }
            }
          }
        if (!du.empty()) un->accumulate(du);
        if (!dw.empty()) wn->accumulate(dw);
      });
}

/// v = s · ‖s‖ / (1 + ‖s‖²) along the last axis, so ‖v‖ = ‖s‖²/(1+‖s‖²).
template <std::floating_point T>
Var<T> squash(const Var<T>& s) {
  const auto& sv = s.value();
  if (sv.rank() < 1) throw DimensionError("squash: empty tensor");
  const std::size_t dim = sv.shape().back();
  const std::size_t rows = sv.size() / dim;
  Tensor<T> out(sv.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = sv.data().data() + r * dim;
    double n2 = 0;
    for (std::size_t k = 0; k < dim; ++k) n2 += double(p[k]) * p[k];
    const double n = std::sqrt(n2);
    norms[r] = n;
    const double f = n / (1.0 + n2);
    T* o = out.data().data() + r * dim;
    for (std::size_t k = 0; k < dim; ++k) o[k] = static_cast<T>(p[k] * f);
  }
  auto sn = s.node();
  return make_result<T>(
      std::move(out), {s}, [sn, norms = std::move(norms), dim, rows](const Tensor<T>& g) {
        Tensor<T> gs(sn->value.shape());
        for (std::size_t r = 0; r < rows; ++r) {
          const T* p = sn->value.data().data() + r * dim;
          const T* gp = g.data().data() + r * dim;
          T* o = gs.data().data() + r * dim;
          const double n = norms[r], n2 = n * n;
          const double f = n / (1.0 + n2);
          double dot = 0;
          for (std::size_t k = 0; k < dim; ++k) dot += double(gp[k]) * p[k];
          // d f(n)/dn / n; the s s^T term vanishes at s = 0.
          const double coef =
              n > 0 ? (1.0 - n2) / (n * (1.0 + n2) * (1.0 + n2)) : 0.0;
          for (std::size_t k = 0; k < dim; ++k)
            o[k] = static_cast<T>(f * gp[k] + coef * dot * p[k]);
        }
        sn->accumulate(gs);
      });
}

/// Softmax along the last axis.
template <std::floating_point T>
Var<T> softmax_last(const Var<T>& logits) {
  const auto& lv = logits.value();
  const std::size_t k = lv.shape().back();
  const std::size_t rows = lv.size() / k;
  Tensor<T> out(lv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = lv.data().data() + r * k;
    T* o = out.data().data() + r * k;
    const T mx = *std::max_element(p, p + k);
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(double(p[j]) - mx);
    for (std::size_t j = 0; j < k; ++j)
      o[j] = static_cast<T>(std::exp(double(p[j]) - mx) / z);
  }
  auto ln = logits.node();
  Tensor<T> probs = out;
  return make_result<T>(std::move(out), {logits},
                        [ln, probs = std::move(probs), k, rows](const Tensor<T>& g) {
                          Tensor<T> gl(probs.shape());
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* c = probs.data().data() + r * k;
                            const T* gp = g.data().data() + r * k;
                            double dot = 0;
                            for (std::size_t j = 0; j < k; ++j) dot += double(gp[j]) * c[j];
                            T* o = gl.data().data() + r * k;
                            for (std::size_t j = 0; j < k; ++j)
                              o[j] = static_cast<T>(c[j] * (gp[j] - dot));
                          }
                          ln->accumulate(gl);
                        });
}

/// s[b,j,:] = Σ_i c[b,i,j] · û[b,i,j,:].
template <std::floating_point T>
Var<T> weighted_votes(const Var<T>& couplings, const Var<T>& votes) {
  const auto& c = couplings.value();
  const auto& u = votes.value();
  if (u.rank() != 4 || c.shape() != Shape{u.dim(0), u.dim(1), u.dim(2)}) {
    throw DimensionError("weighted_votes: couplings " + shape_string(c.shape()) +
                         " do not match votes " + shape_string(u.shape()));
  }
  const std::size_t batch = u.dim(0), ni = u.dim(1), nj = u.dim(2), d = u.dim(3);
  Tensor<T> out(Shape{batch, nj, d});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < ni; ++i)
      for (std::size_t j = 0; j < nj; ++j) {
        const T cij = c[(b * ni + i) * nj + j];
        const T* up = u.data().data() + ((b * ni + i) * nj + j) * d;
        T* o = out.data().data() + (b * nj + j) * d;
        for (std::size_t k = 0; k < d; ++k) o[k] += cij * up[k];
      }
  auto cn = couplings.node(), un = votes.node();
  return make_result<T>(
      std::move(out), {couplings, votes},
      [cn, un, batch, ni, nj, d](const Tensor<T>& g) {
        Tensor<T> gc, gu;
        if (cn->requires_grad) gc = Tensor<T>(cn->value.shape());
        if (un->requires_grad) gu = Tensor<T>(un->value.shape());
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < ni; ++i)
            for (std::size_t j = 0; j < nj; ++j) {
              const std::size_t cij = (b * ni + i) * nj + j;
              const T* gp = g.data().data() + (b * nj + j) * d;
              const T* up = un->value.data().data() + cij * d;
              if (!gc.empty()) {
                T acc = 0;
                for (std::size_t k = 0; k < d; ++k) acc += gp[k] * up[k];
                gc[cij] = acc;
              }
              if (!gu.empty()) {
                const T cv = cn->value[cij];
                T* gup = gu.data().data() + cij * d;
                for (std::size_t k = 0; k < d; ++k) gup[k] = cv * gp[k];
              }
            }
        if (!gc.empty()) cn->accumulate(gc);
        if (!gu.empty()) un->accumulate(gu);
      });
}

/// a[b,i,j] = v[b,j,:] · û[b,i,j,:].
template <std::floating_point T>
Var<T> agreement(const Var<T>& outputs, const Var<T>& votes) {
  const auto& v = outputs.value();
  const auto& u = votes.value();
  if (u.rank() != 4 || v.shape() != Shape{u.dim(0), u.dim(2), u.dim(3)}) {
    throw DimensionError("agreement: outputs " + shape_string(v.shape()) +
                         " do not match votes " + shape_string(u.shape()));
  }
  const std::size_t batch = u.dim(0), ni = u.dim(1), nj = u.dim(2), d = u.dim(3);
  Tensor<T> out(Shape{batch, ni, nj});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < ni; ++i)
      for (std::size_t j = 0; j < nj; ++j) {
        const T* vp = v.data().data() + (b * nj + j) * d;
        const T* up = u.data().data() + ((b * ni + i) * nj + j) * d;
        T acc = 0;
        for (std::size_t k = 0; k < d; ++k) acc += vp[k] * up[k];
        out[(b * ni + i) * nj + j] = acc;
      }
  auto vn = outputs.node(), un = votes.node();
  return make_result<T>(
      std::move(out), {outputs, votes},
      [vn, un, batch, ni, nj, d](const Tensor<T>& g) {
        Tensor<T> gv, gu;
        if (vn->requires_grad) gv = Tensor<T>(vn->value.shape());
        if (un->requires_grad) gu = Tensor<T>(un->value.shape());
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < ni; ++i)
            for (std::size_t j = 0; j < nj; ++j) {
              const std::size_t ij = (b * ni + i) * nj + j;
              const T gij = g[ij];
              const T* vp = vn->value.data().data() + (b * nj + j) * d;
              const T* up = un->value.data().data() + ij * d;
              if (!gv.empty()) {
                T* o = gv.data().data() + (b * nj + j) * d;
                for (std::size_t k = 0; k < d; ++k) o[k] += gij * up[k];
              }
              if (!gu.empty()) {
                T* o = gu.data().data() + ij * d;
                for (std::size_t k = 0; k < d; ++k) o[k] = gij * vp[k];
              }
            }
        if (!gv.empty()) vn->accumulate(gv);
        if (!gu.empty()) un->accumulate(gu);
      });
}

/// Euclidean norm along the last axis.
template <std::floating_point T>
Var<T> capsule_lengths(const Var<T>& capsules) {
  const auto& v = capsules.value();
  const std::size_t d = v.shape().back();
  const std::size_t rows = v.size() / d;
  Shape shape(v.shape().begin(), v.shape().end() - 1);
  if (shape.empty()) shape = {1};
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = v.data().data() + r * d;
    double n2 = 0;
    for (std::size_t k = 0; k < d; ++k) n2 += double(p[k]) * p[k];
    out[r] = static_cast<T>(std::sqrt(n2));
  }
  auto vn = capsules.node();
  Tensor<T> lengths = out;
  return make_result<T>(std::move(out), {capsules},
                        [vn, lengths = std::move(lengths), d, rows](const Tensor<T>& g) {
                          Tensor<T> gv(vn->value.shape());
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T len = lengths[r];
                            if (!(len > T{0})) continue;
                            const T* p = vn->value.data().data() + r * d;
                            T* o = gv.data().data() + r * d;
                            const T scale = g[r] / len;
                            for (std::size_t k = 0; k < d; ++k) o[k] = scale * p[k];
                          }
                          vn->accumulate(gv);
                        });
}

/// Regroups a feature map x[B,C,H,W] into capsules [B, C·H·W/dim, dim],
/// walking positions in H,W order with channels fastest, so with dim == C
/// each spatial location becomes one capsule.
template <std::floating_point T>
Var<T> to_capsules(const Var<T>& features, std::size_t dim) {
  const auto& x = features.value();
  if (x.rank() != 4) {
    throw DimensionError("to_capsules expects [N,C,H,W], got " +
                         shape_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::size_t volume = c * hw;
  if (dim == 0 || volume % dim != 0) {
    throw DimensionError("to_capsules: capsule dim " + std::to_string(dim) +
                         " does not divide feature volume " +
                         std::to_string(volume));
  }
  Tensor<T> out(Shape{n, volume / dim, dim});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p)
        out[b * volume + p * c + ch] = x[(b * c + ch) * hw + p];
  auto xn = features.node();
  return make_result<T>(std::move(out), {features},
                        [xn, n, c, hw, volume](const Tensor<T>& g) {
                          Tensor<T> gx(xn->value.shape());
                          for (std::size_t b = 0; b < n; ++b)
                            for (std::size_t ch = 0; ch < c; ++ch)
                              for (std::size_t p = 0; p < hw; ++p)
                                gx[(b * c + ch) * hw + p] = g[b * volume + p * c + ch];
                          xn->accumulate(gx);
                        });
}

/// Unrolled routing by agreement over votes û[B,I,J,D]. Every iteration
/// couplings c = softmax_j(b), outputs s_j = Σ_i c_ij û_{j|i}, v_j = squash(s_j),
/// agreement a_ij = v_j · û_{j|i}, and b += a; b starts at zero on every call.
/// Returns v[B,J,D] from the last iteration. When `trace` is non-null it
/// receives one RoutingState per iteration.
template <std::floating_point T>
Var<T> route(const Var<T>& votes, std::size_t iters,
             std::vector<RoutingState<T>>* trace = nullptr) {
  if (iters < 1) throw ParameterError("route: routing iterations must be >= 1");
  const auto& u = votes.value();
  if (u.rank() != 4) {
    throw DimensionError("route expects votes [B,I,J,D], got " +
                         shape_string(u.shape()));
  }
  Var<T> logits(Tensor<T>(Shape{u.dim(0), u.dim(1), u.dim(2)}));
  Var<T> outputs;
  if (trace) trace->clear();
  for (std::size_t it = 0; it < iters; ++it) {
    Var<T> couplings = softmax_last(logits);
    outputs = squash(weighted_votes(couplings, votes));
    const bool last = it + 1 == iters;
    if (last && !trace) break;
    Var<T> agree = agreement(outputs, votes);
    if (trace) {
      trace->push_back({logits.value(), couplings.value(), agree.value()});
    }
    if (!last) logits = add(logits, agree);
  }
  return outputs;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Single-sample API
// ---------------------------------------------------------------------------

template <std::floating_point T>
VoteTensor<T> predict_votes(const CapsuleTensor<T>& inputs,
                            const CapsuleLayerParams<T>& params) {
  const auto& w = params.weights;
  if (w.rank() != 4) {
    throw DimensionError("capsule weights must be [num_in, num_out, out_dim, "
                         "in_dim], got " + shape_string(w.shape()));
  }
  if (inputs.capsule_dim() != w.dim(3)) {
    throw DimensionError("predict_votes: capsule dim " +
                         std::to_string(inputs.capsule_dim()) +
                         " but W expects " + std::to_string(w.dim(3)));
  }
  NoGradGuard guard;
  const std::size_t ni = inputs.num_capsules();
  Var<T> u(inputs.values.reshaped(Shape{1, ni, inputs.capsule_dim()}));
  Var<T> votes = ops::capsule_votes(u, Var<T>(w));
  return VoteTensor<T>(votes.value().reshaped(Shape{ni, w.dim(1), w.dim(2)}));
}

template <std::floating_point T>
std::vector<T> squash(const std::vector<T>& s) {
  NoGradGuard guard;
  Tensor<T> t(Shape{s.size()}, std::vector<T>(s.begin(), s.end()));
  return ops::squash(Var<T>(std::move(t))).value().vector();
}

template <std::floating_point T>
struct RoutingResult {
  CapsuleTensor<T> outputs;
  RoutingState<T> state;               // final iteration, [num_in, num_out]
  std::vector<RoutingState<T>> trace;  // every iteration
};

template <std::floating_point T>
RoutingResult<T> route(const VoteTensor<T>& votes, std::size_t iters) {
  NoGradGuard guard;
  const std::size_t ni = votes.num_in(), nj = votes.num_out(), d = votes.out_dim();
  Var<T> batched(votes.values.reshaped(Shape{1, ni, nj, d}));
  std::vector<RoutingState<T>> trace;
  Var<T> out = ops::route(batched, iters, &trace);
  RoutingResult<T> result;
  result.outputs = CapsuleTensor<T>(out.value().reshaped(Shape{nj, d}));
  for (auto& st : trace) {
    st.logits = st.logits.reshaped(Shape{ni, nj});
    st.couplings = st.couplings.reshaped(Shape{ni, nj});
    st.agreement = st.agreement.reshaped(Shape{ni, nj});
  }
  result.state = trace.back();
  result.trace = std::move(trace);
  return result;
}

template <std::floating_point T>
std::vector<T> capsule_probabilities(const CapsuleTensor<T>& outputs) {
  NoGradGuard guard;
  return ops::capsule_lengths(Var<T>(outputs.values)).value().vector();
}

}  // namespace covidcaps
