/* Copyright 2026 The qzlm Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

// Reverse-mode differentiation specialized to the fixed computation graph
// embedding -> masked conv -> fo-pooling -> tied projection -> cross-entropy,
// with three parameter selections: all weights (baseline training), the
// hard concrete gate parameters (weights frozen), or the rank-1 update
// factors (weights frozen). A general autodiff system would buy nothing
// here; the graph never changes.
//
// Truncation boundaries: the initial cell state and the convolution history
// carried in from the previous BPTT block are treated as constants, as is
// standard for truncated backpropagation through time.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "qzlm/common.hpp"
#include "qzlm/gates.hpp"
#include "qzlm/matrix.hpp"
#include "qzlm/model.hpp"
#include "qzlm/rng.hpp"
#include "qzlm/sru.hpp"

namespace qzlm {

enum class ParamSelector { kAllWeights, kGateLogAlphas, kSruFactors };

template <typename T>
struct Tape {
  struct LayerRecord {
    Matrix<T> x_stacked;   // s x n, inputs stacked per window (history included)
    Matrix<T> z, f, o;     // m x n, post-activation
    Matrix<T> c;           // m x n, cell state after each step
    std::vector<T> c0;     // cell state at block entry (constant)
    Matrix<T> pre_z_raw;   // W_z * X before gate scaling; only kept when gated
  };
  struct LaneRecord {
    std::vector<std::int32_t> inputs, targets;
    std::vector<LayerRecord> layers;
    Matrix<T> probs;  // vocab x n softmax of the logits
  };

  std::vector<LaneRecord> lanes;
  std::size_t total_targets = 0;

  // Gate values shared by every lane of the step (one Monte Carlo sample).
  bool gated = false;
  std::vector<std::vector<T>> gate_value;
  std::vector<std::vector<T>> gate_dz;  // dz/dlog_alpha under the fixed sample

  // Effective weights W + u v^T when a rank-1 update participates.
  bool has_effective = false;
  std::vector<QrnnLayerWeights<T>> effective;

  const QrnnLayerWeights<T>& weights(const QrnnModel<T>& model, std::size_t l) const {
    return has_effective ? effective[l] : model.layers[l];
  }
};

template <typename T>
struct ModelGrads {
  Matrix<T> embedding;
  std::vector<QrnnLayerWeights<T>> layers;

  static ModelGrads zeros_like(const QrnnModel<T>& model) {
    ModelGrads g;
    g.embedding = Matrix<T>(model.embedding.rows(), model.embedding.cols());
    g.layers.reserve(model.layers.size());
    for (const auto& w : model.layers) {
      g.layers.push_back({Matrix<T>(w.w_z.rows(), w.w_z.cols()),
                          Matrix<T>(w.w_f.rows(), w.w_f.cols()),
                          Matrix<T>(w.w_o.rows(), w.w_o.cols())});
    }
    return g;
  }
};

template <typename T>
struct GateGrads {
  std::vector<std::vector<T>> log_alpha;

  static GateGrads zeros_like(const HardConcreteGates<T>& gates) {
    GateGrads g;
    for (const auto& layer : gates.log_alpha) g.log_alpha.emplace_back(layer.size(), T{0});
    return g;
  }
};

template <typename T>
struct SruGrads {
  std::vector<typename SruUpdate<T>::Layer> layers;

  static SruGrads zeros_like(const SruUpdate<T>& sru) {
    SruGrads g;
    g.layers.reserve(sru.layers.size());
    for (const auto& layer : sru.layers) {
      typename SruUpdate<T>::Layer zero;
      for (auto [src, dst] : {std::pair{&layer.z, &zero.z}, std::pair{&layer.f, &zero.f},
                              std::pair{&layer.o, &zero.o}}) {
        dst->u.assign(src->u.size(), T{0});
        dst->v.assign(src->v.size(), T{0});
      }
      g.layers.push_back(std::move(zero));
    }
    return g;
  }
};

// dW += dPre * X^T accumulated in place.
template <typename T>
void accumulate_nt(Matrix<T>& acc, const Matrix<T>& dpre, const Matrix<T>& x_stacked) {
  for (std::size_t i = 0; i < dpre.rows(); ++i) {
    const T* d_row = dpre.data() + i * dpre.cols();
    for (std::size_t j = 0; j < x_stacked.rows(); ++j) {
      const T* x_row = x_stacked.data() + j * x_stacked.cols();
      T sum{0};
      for (std::size_t t = 0; t < dpre.cols(); ++t) sum += d_row[t] * x_row[t];
      acc(i, j) += sum;
    }
  }
}

// du += dW v, dv += dW^T u with dW = dPre X^T, contracted without
// materializing dW.
template <typename T>
void accumulate_rank_one_grads(typename SruUpdate<T>::Factors& grads, const Matrix<T>& dpre,
                               const Matrix<T>& x_stacked,
                               const typename SruUpdate<T>::Factors& factors) {
  const std::size_t n = dpre.cols();
  // xv[t] = sum_j x_stacked(j, t) * v[j]
  std::vector<T> xv(n, T{0});
  for (std::size_t j = 0; j < x_stacked.rows(); ++j) {
    const T* x_row = x_stacked.data() + j * n;
    const T vj = factors.v[j];
    for (std::size_t t = 0; t < n; ++t) xv[t] += x_row[t] * vj;
  }
  // ud[t] = sum_i u[i] * dpre(i, t)
  std::vector<T> ud(n, T{0});
  for (std::size_t i = 0; i < dpre.rows(); ++i) {
    const T* d_row = dpre.data() + i * n;
    const T ui = factors.u[i];
    for (std::size_t t = 0; t < n; ++t) ud[t] += ui * d_row[t];
  }
  for (std::size_t i = 0; i < dpre.rows(); ++i) {
    const T* d_row = dpre.data() + i * n;
    T sum{0};
    for (std::size_t t = 0; t < n; ++t) sum += d_row[t] * xv[t];
    grads.u[i] += sum;
  }
  for (std::size_t j = 0; j < x_stacked.rows(); ++j) {
    const T* x_row = x_stacked.data() + j * n;
    T sum{0};
    for (std::size_t t = 0; t < n; ++t) sum += x_row[t] * ud[t];
    grads.v[j] += sum;
  }
}

// Evaluates every gate once for the step: sampled when `sample` is given,
// the deterministic test estimator otherwise.
template <typename T>
void eval_gates(const HardConcreteGates<T>& gates, const GateSample<T>* sample,
                Tape<T>& tape) {
  tape.gated = true;
  tape.gate_value.clear();
  tape.gate_dz.clear();
  if (sample != nullptr && sample->logit_u.size() != gates.log_alpha.size()) {
    throw shape_error("gate sample covers a different number of layers than the gates");
  }
  for (std::size_t l = 0; l < gates.log_alpha.size(); ++l) {
    const auto& la = gates.log_alpha[l];
    if (sample != nullptr && sample->logit_u[l].size() != la.size()) {
      throw shape_error("gate sample for layer " + std::to_string(l) + " has wrong length");
    }
    std::vector<T> value(la.size()), dz(la.size());
    for (std::size_t i = 0; i < la.size(); ++i) {
      if (sample != nullptr) {
        GateEval<T> e = sample_gate_eval(la[i], sample->logit_u[l][i], gates.hyper);
        value[i] = e.z;
        dz[i] = e.dz_dlog_alpha;
      } else {
        const T gamma = static_cast<T>(gates.hyper.gamma);
        const T zeta = static_cast<T>(gates.hyper.zeta);
        T s = sigmoid_scalar(la[i]);
        T stretched = s * (zeta - gamma) + gamma;
        if (stretched <= T{0}) {
          value[i] = T{0};
          dz[i] = T{0};
        } else if (stretched >= T{1}) {
          value[i] = T{1};
          dz[i] = T{0};
        } else {
          value[i] = stretched;
          dz[i] = (zeta - gamma) * s * (T{1} - s);
        }
      }
    }
    tape.gate_value.push_back(std::move(value));
    tape.gate_dz.push_back(std::move(dz));
  }
}

// Forward pass recording everything backward() needs. Returns the mean token
// cross-entropy over all lanes (the caller adds any penalty terms). Lane
// states, when given, are consumed and updated so consecutive blocks chain.
template <typename T>
T forward_with_tape(const QrnnModel<T>& model, const HardConcreteGates<T>* gates,
                    const GateSample<T>* sample, const SruUpdate<T>* sru,
                    std::span<const std::span<const std::int32_t>> inputs,
                    std::span<const std::span<const std::int32_t>> targets,
                    std::vector<ModelState<T>>* states, Tape<T>& tape) {
  if (inputs.empty() || inputs.size() != targets.size()) {
    throw shape_error("forward_with_tape: need matching non-empty input/target lanes");
  }
  if (states != nullptr && states->size() != inputs.size()) {
    throw shape_error("forward_with_tape: state count does not match lane count");
  }
  const std::size_t num_layers = model.config.num_layers();
  tape.lanes.clear();
  tape.total_targets = 0;
  tape.gated = false;
  tape.has_effective = false;
  tape.effective.clear();

  if (gates != nullptr) {
    if (gates->log_alpha.size() + 1 != num_layers) {
      throw shape_error("forward_with_tape: gate layer count mismatch");
    }
    eval_gates(*gates, sample, tape);
  }
  if (sru != nullptr) {
    sru->validate_shapes(model.config);
    tape.has_effective = true;
    tape.effective.reserve(num_layers);
    for (std::size_t l = 0; l < num_layers; ++l) {
      QrnnLayerWeights<T> w = model.layers[l];
      detail::add_rank_one(w.w_z, sru->layers[l].z.u, sru->layers[l].z.v);
      detail::add_rank_one(w.w_f, sru->layers[l].f.u, sru->layers[l].f.v);
      detail::add_rank_one(w.w_o, sru->layers[l].o.u, sru->layers[l].o.v);
      tape.effective.push_back(std::move(w));
    }
  }

  T total_ce{0};
  for (std::size_t lane = 0; lane < inputs.size(); ++lane) {
    if (inputs[lane].size() != targets[lane].size() || inputs[lane].empty()) {
      throw shape_error("forward_with_tape: lane " + std::to_string(lane) +
                        " has mismatched or empty input/target spans");
    }
    typename Tape<T>::LaneRecord rec;
    rec.inputs.assign(inputs[lane].begin(), inputs[lane].end());
    rec.targets.assign(targets[lane].begin(), targets[lane].end());
    rec.layers.resize(num_layers);

    ModelState<T> fresh = ModelState<T>::initial(model.config);
    ModelState<T>& state = states != nullptr ? (*states)[lane] : fresh;

    Matrix<T> x = embed_tokens(model, rec.inputs);
    for (std::size_t l = 0; l < num_layers; ++l) {
      auto& lr = rec.layers[l];
      const QrnnLayerWeights<T>& w = tape.weights(model, l);
      const std::size_t window = model.config.window_sizes[l];
      lr.x_stacked = stack_window(x, window, window > 1 ? &state.layers[l].history : nullptr);

      // Update the conv history before x moves on.
      if (window > 1) {
        const std::size_t keep = window - 1;
        Matrix<T> next_history(x.rows(), keep);
        for (std::size_t j = 0; j < keep; ++j) {
          std::ptrdiff_t src = static_cast<std::ptrdiff_t>(x.cols()) -
                               static_cast<std::ptrdiff_t>(keep) +
                               static_cast<std::ptrdiff_t>(j);
          for (std::size_t i = 0; i < x.rows(); ++i) {
            next_history(i, j) =
                src >= 0 ? x(i, static_cast<std::size_t>(src))
                         : state.layers[l].history(
                               i, static_cast<std::size_t>(src + static_cast<std::ptrdiff_t>(keep)));
          }
        }
        state.layers[l].history = std::move(next_history);
      }

      Matrix<T> pre_z = matmul(w.w_z, lr.x_stacked);
      if (tape.gated && l + 1 < num_layers) {
        lr.pre_z_raw = pre_z;
        const auto& gv = tape.gate_value[l];
        for (std::size_t i = 0; i < pre_z.rows(); ++i) {
          for (T& v : pre_z.row(i)) v *= gv[i];
        }
      }
      lr.z = tanh(pre_z);
      lr.f = sigmoid(matmul(w.w_f, lr.x_stacked));
      lr.o = sigmoid(matmul(w.w_o, lr.x_stacked));

      lr.c0 = state.layers[l].c;
      const std::size_t m = lr.z.rows();
      const std::size_t n = lr.z.cols();
      lr.c = Matrix<T>(m, n);
      Matrix<T> h(m, n);
      std::vector<T> cell = lr.c0;
      for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t i = 0; i < m; ++i) {
          T ft = lr.f(i, t);
          cell[i] = ft * cell[i] + (T{1} - ft) * lr.z(i, t);
          lr.c(i, t) = cell[i];
          h(i, t) = lr.o(i, t) * cell[i];
        }
      }
      state.layers[l].c = std::move(cell);
      x = std::move(h);
    }

    Matrix<T> logits = matmul(model.embedding, x);
    rec.probs = Matrix<T>(logits.rows(), logits.cols());
    for (std::size_t t = 0; t < logits.cols(); ++t) {
      std::vector<T> col = logits.col_vector(t);
      std::int32_t target = rec.targets[t];
      if (target < 0 || static_cast<std::size_t>(target) >= model.config.vocab_size) {
        throw data_error("target token id " + std::to_string(target) + " out of range");
      }
      std::vector<T> p = softmax(std::span<const T>(col));
      for (std::size_t i = 0; i < p.size(); ++i) rec.probs(i, t) = p[i];
      total_ce -= std::log(std::max(p[static_cast<std::size_t>(target)],
                                    std::numeric_limits<T>::min()));
    }
    tape.total_targets += rec.targets.size();
    tape.lanes.push_back(std::move(rec));
  }
  return total_ce / static_cast<T>(tape.total_targets);
}

// Gradients of the mean cross-entropy recorded on the tape, written only
// into the structures selected: the backward pass never touches anything
// else, which is what makes the frozen-weight guarantees trivial to audit.
template <typename T>
void backward(const QrnnModel<T>& model, const Tape<T>& tape, ParamSelector selector,
              ModelGrads<T>* weight_grads, GateGrads<T>* gate_grads,
              SruGrads<T>* sru_grads, const SruUpdate<T>* sru = nullptr) {
  const bool want_weights = selector == ParamSelector::kAllWeights;
  const bool want_gates = selector == ParamSelector::kGateLogAlphas;
  const bool want_sru = selector == ParamSelector::kSruFactors;
  if (want_weights && weight_grads == nullptr) {
    throw config_error("backward: selector AllWeights needs a ModelGrads sink");
  }
  if (want_gates && (gate_grads == nullptr || !tape.gated)) {
    throw config_error("backward: selector GateLogAlphas needs gates on the tape");
  }
  if (want_sru && (sru_grads == nullptr || sru == nullptr || !tape.has_effective)) {
    throw config_error("backward: selector SruFactors needs the rank-1 update on the tape");
  }

  const std::size_t num_layers = model.config.num_layers();
  const T inv_n = T{1} / static_cast<T>(tape.total_targets);

  for (const auto& lane : tape.lanes) {
    const std::size_t n = lane.inputs.size();

    // d(mean CE)/d(logits) = (softmax - onehot) / total_targets.
    Matrix<T> dlogits = lane.probs;
    for (T& v : dlogits.flat()) v *= inv_n;
    for (std::size_t t = 0; t < n; ++t) {
      dlogits(static_cast<std::size_t>(lane.targets[t]), t) -= inv_n;
    }

    // Tied projection: logits = E * h_last.
    const auto& top = lane.layers[num_layers - 1];
    Matrix<T> h_last = hadamard(top.o, top.c);
    if (want_weights) {
      Matrix<T> de = matmul_nt(dlogits, h_last);
      for (std::size_t i = 0; i < de.size(); ++i) {
        weight_grads->embedding.data()[i] += de.data()[i];
      }
    }
    Matrix<T> dh = matmul_tn(model.embedding, dlogits);

    for (std::size_t l = num_layers; l-- > 0;) {
      const auto& lr = lane.layers[l];
      const std::size_t m = lr.z.rows();

      // fo-pooling backward: walk time in reverse, carrying dc.
      Matrix<T> dz_post(m, n), df_post(m, n), do_post(m, n);
      std::vector<T> dc(m, T{0});
      for (std::size_t t = n; t-- > 0;) {
        for (std::size_t i = 0; i < m; ++i) {
          T c_prev = t == 0 ? lr.c0[i] : lr.c(i, t - 1);
          T dct = dc[i] + dh(i, t) * lr.o(i, t);
          do_post(i, t) = dh(i, t) * lr.c(i, t);
          df_post(i, t) = dct * (c_prev - lr.z(i, t));
          dz_post(i, t) = dct * (T{1} - lr.f(i, t));
          dc[i] = dct * lr.f(i, t);
        }
      }

      // Activation backward.
      Matrix<T> dpre_z(m, n), dpre_f(m, n), dpre_o(m, n);
      for (std::size_t i = 0; i < m * n; ++i) {
        T z = lr.z.data()[i];
        T f = lr.f.data()[i];
        T o = lr.o.data()[i];
        dpre_z.data()[i] = dz_post.data()[i] * (T{1} - z * z);
        dpre_f.data()[i] = df_post.data()[i] * f * (T{1} - f);
        dpre_o.data()[i] = do_post.data()[i] * o * (T{1} - o);
      }

      // Gate backward: pre_gated = gate_i * pre_raw, row-broadcast.
      const bool layer_gated = tape.gated && l + 1 < num_layers;
      if (layer_gated) {
        if (want_gates) {
          auto& dla = gate_grads->log_alpha[l];
          for (std::size_t i = 0; i < m; ++i) {
            T acc{0};
            for (std::size_t t = 0; t < n; ++t) {
              acc += dpre_z(i, t) * lr.pre_z_raw(i, t);
            }
            dla[i] += acc * tape.gate_dz[l][i];
          }
        }
        const auto& gv = tape.gate_value[l];
        for (std::size_t i = 0; i < m; ++i) {
          for (T& v : dpre_z.row(i)) v *= gv[i];
        }
      }

      if (want_weights) {
        auto& wg = weight_grads->layers[l];
        accumulate_nt(wg.w_z, dpre_z, lr.x_stacked);
        accumulate_nt(wg.w_f, dpre_f, lr.x_stacked);
        accumulate_nt(wg.w_o, dpre_o, lr.x_stacked);
      }
      if (want_sru) {
        auto& sg = sru_grads->layers[l];
        accumulate_rank_one_grads(sg.z, dpre_z, lr.x_stacked, sru->layers[l].z);
        accumulate_rank_one_grads(sg.f, dpre_f, lr.x_stacked, sru->layers[l].f);
        accumulate_rank_one_grads(sg.o, dpre_o, lr.x_stacked, sru->layers[l].o);
      }

      // Propagate into the stacked input, then unstack. Gradients that land
      // on history or padding columns fall off the truncation edge.
      const bool need_dx = l > 0 || want_weights;
      if (!need_dx) continue;
      const QrnnLayerWeights<T>& w = tape.weights(model, l);
      Matrix<T> dxs = matmul_tn(w.w_z, dpre_z);
      {
        Matrix<T> tmp = matmul_tn(w.w_f, dpre_f);
        for (std::size_t i = 0; i < dxs.size(); ++i) dxs.data()[i] += tmp.data()[i];
        tmp = matmul_tn(w.w_o, dpre_o);
        for (std::size_t i = 0; i < dxs.size(); ++i) dxs.data()[i] += tmp.data()[i];
      }
      const std::size_t window = model.config.window_sizes[l];
      const std::size_t k = dxs.rows() / window;
      Matrix<T> dx(k, n);
      for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t block = 0; block < window; ++block) {
          std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + block + 1) -
                               static_cast<std::ptrdiff_t>(window);
          if (src < 0) continue;
          for (std::size_t i = 0; i < k; ++i) {
            dx(i, static_cast<std::size_t>(src)) += dxs(block * k + i, t);
          }
        }
      }
      if (l == 0) {
        if (want_weights) {
          for (std::size_t t = 0; t < n; ++t) {
            auto row = weight_grads->embedding.row(static_cast<std::size_t>(lane.inputs[t]));
            for (std::size_t i = 0; i < k; ++i) row[i] += dx(i, t);
          }
        }
      } else {
        dh = std::move(dx);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Adam (no weight decay), with bias correction.

template <typename T>
struct AdamState {
  T lr;
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  std::size_t step_count = 0;
  std::vector<std::vector<T>> m, v;

  static AdamState init(std::span<const std::span<T>> params, T lr) {
    AdamState state;
    state.lr = lr;
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), T{0});
      state.v.emplace_back(p.size(), T{0});
    }
    return state;
  }
};

template <typename T>
void adam_step(AdamState<T>& state, std::span<const std::span<T>> params,
               std::span<const std::span<const T>> grads) {
  if (params.size() != state.m.size() || grads.size() != params.size()) {
    throw shape_error("adam_step: parameter/gradient/state group counts disagree");
  }
  ++state.step_count;
  const T bc1 = T{1} - std::pow(state.beta1, static_cast<T>(state.step_count));
  const T bc2 = T{1} - std::pow(state.beta2, static_cast<T>(state.step_count));
  for (std::size_t g = 0; g < params.size(); ++g) {
    if (params[g].size() != grads[g].size() || params[g].size() != state.m[g].size()) {
      throw shape_error("adam_step: group " + std::to_string(g) + " sizes disagree");
    }
    auto p = params[g];
    auto gr = grads[g];
    auto& m = state.m[g];
    auto& v = state.v[g];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (T{1} - state.beta1) * gr[i];
      v[i] = state.beta2 * v[i] + (T{1} - state.beta2) * gr[i] * gr[i];
      T m_hat = m[i] / bc1;
      T v_hat = v[i] / bc2;
      p[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

template <typename T>
double global_norm(std::span<const std::span<const T>> grads) {
  double acc = 0;
  for (const auto& g : grads) {
    for (T v : g) acc += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(acc);
}

template <typename T>
void clip_by_global_norm(std::span<const std::span<T>> grads, double max_norm) {
  double acc = 0;
  for (const auto& g : grads) {
    for (T v : g) acc += static_cast<double>(v) * static_cast<double>(v);
  }
  double norm = std::sqrt(acc);
  if (norm <= max_norm || norm == 0) return;
  const T scale = static_cast<T>(max_norm / norm);
  for (const auto& g : grads) {
    for (T& v : g) v *= scale;
  }
}

// ---------------------------------------------------------------------------
// Parameter/gradient span collections for the three training problems.

template <typename T>
std::vector<std::span<T>> trainable_spans(QrnnModel<T>& model) {
  std::vector<std::span<T>> spans;
  spans.push_back(model.embedding.flat());
  for (auto& w : model.layers) {
    spans.push_back(w.w_z.flat());
    spans.push_back(w.w_f.flat());
    spans.push_back(w.w_o.flat());
  }
  return spans;
}

template <typename T>
std::vector<std::span<T>> trainable_spans(HardConcreteGates<T>& gates) {
  std::vector<std::span<T>> spans;
  for (auto& layer : gates.log_alpha) spans.emplace_back(layer);
  return spans;
}

template <typename T>
std::vector<std::span<T>> trainable_spans(SruUpdate<T>& sru) {
  std::vector<std::span<T>> spans;
  for (auto& layer : sru.layers) {
    for (auto* g : {&layer.z, &layer.f, &layer.o}) {
      spans.emplace_back(g->u);
      spans.emplace_back(g->v);
    }
  }
  return spans;
}

template <typename T>
std::vector<std::span<const T>> grad_spans(const ModelGrads<T>& grads) {
  std::vector<std::span<const T>> spans;
  spans.push_back(grads.embedding.flat());
  for (const auto& w : grads.layers) {
    spans.push_back(w.w_z.flat());
    spans.push_back(w.w_f.flat());
    spans.push_back(w.w_o.flat());
  }
  return spans;
}

template <typename T>
std::vector<std::span<const T>> grad_spans(const GateGrads<T>& grads) {
  std::vector<std::span<const T>> spans;
  for (const auto& layer : grads.log_alpha) spans.emplace_back(layer);
  return spans;
}

template <typename T>
std::vector<std::span<const T>> grad_spans(const SruGrads<T>& grads) {
  std::vector<std::span<const T>> spans;
  for (const auto& layer : grads.layers) {
    for (const auto* g : {&layer.z, &layer.f, &layer.o}) {
      spans.emplace_back(g->u);
      spans.emplace_back(g->v);
    }
  }
  return spans;
}

template <typename T>
std::vector<std::span<T>> mutable_grad_spans(ModelGrads<T>& grads) {
  std::vector<std::span<T>> spans;
  spans.push_back(grads.embedding.flat());
  for (auto& w : grads.layers) {
    spans.push_back(w.w_z.flat());
    spans.push_back(w.w_f.flat());
    spans.push_back(w.w_o.flat());
  }
  return spans;
}

// ---------------------------------------------------------------------------
// Central finite differences against the analytic gradients. Only meaningful
// in 64-bit; the float path would drown in rounding noise.

struct FdReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t worst_group = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// `loss` re-evaluates the full objective at the current parameter values.
// Checks all coordinates when there are at most `max_coords`, otherwise a
// seeded sample of that many (at least 50).
template <typename LossFn>
FdReport finite_diff_check(std::span<const std::span<double>> params,
                           std::span<const std::span<const double>> grads, LossFn&& loss,
                           double h = 1e-4, std::size_t max_coords = 200,
                           std::uint64_t seed = 0) {
  if (params.size() != grads.size()) {
    throw shape_error("finite_diff_check: parameter/gradient group counts disagree");
  }
  max_coords = std::max<std::size_t>(max_coords, 50);
  std::size_t total = 0;
  for (const auto& p : params) total += p.size();
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  if (total <= max_coords) {
    for (std::size_t g = 0; g < params.size(); ++g) {
      for (std::size_t i = 0; i < params[g].size(); ++i) coords.emplace_back(g, i);
    }
  } else {
    Rng rng(derive_seed(seed, "fd.coords"));
    for (std::size_t c = 0; c < max_coords; ++c) {
      std::size_t flat = static_cast<std::size_t>(rng.bounded(total));
      std::size_t g = 0;
      while (flat >= params[g].size()) {
        flat -= params[g].size();
        ++g;
      }
      coords.emplace_back(g, flat);
    }
  }
  FdReport report;
  for (auto [g, i] : coords) {
    double saved = params[g][i];
    params[g][i] = saved + h;
    double up = loss();
    params[g][i] = saved - h;
    double down = loss();
    params[g][i] = saved;
    double numeric = (up - down) / (2.0 * h);
    double analytic = grads[g][i];
    double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    double rel = std::abs(analytic - numeric) / denom;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_group = g;
      report.worst_index = i;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
    ++report.checked;
  }
  return report;
}

}  // namespace qzlm
