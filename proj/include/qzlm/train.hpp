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

// The three training problems, all Adam over truncated BPTT with contiguous
// batching and carried state:
//   - baseline: every weight (desk-scale pre-training; this artifact's stand-in
//     for a fully regularized large-scale run),
//   - gates: hard concrete log_alpha only, weights frozen, one Monte Carlo
//     noise sample per step,
//   - rank-1 update: u, v factors only, pruned base weights frozen.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "qzlm/data.hpp"
#include "qzlm/gates.hpp"
#include "qzlm/grad.hpp"
#include "qzlm/model.hpp"
#include "qzlm/pruning.hpp"
#include "qzlm/sru.hpp"

namespace qzlm {

template <typename T>
struct TrainOptions {
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  std::size_t bptt_len = 35;
  T lr = static_cast<T>(2e-3);
  double clip_norm = 0.25;  // global-norm gradient clip; 0 disables
  std::uint64_t seed = 0;
  std::size_t log_every = 0;
  std::function<void(std::size_t step, double loss)> logger;
  std::size_t eval_every = 0;  // extra hook cadence (e.g. validation perplexity)
  std::function<void(std::size_t step)> on_eval;
};

namespace detail {

// Cycles BPTT blocks over the stream, carrying lane state across consecutive
// blocks and resetting it at each wrap (epoch boundary).
template <typename T>
class BlockCycler {
 public:
  BlockCycler(const TokenStream& stream, const ModelConfig& config, std::size_t batch_size,
              std::size_t bptt_len)
      : batches_(stream, batch_size, bptt_len), config_(config) {
    reset();
  }

  BpttBlock next() {
    if (index_ == batches_.size()) reset();
    return batches_.block(index_++);
  }

  std::vector<ModelState<T>>* states() { return &states_; }

 private:
  void reset() {
    index_ = 0;
    states_.assign(batches_.batch_size(), ModelState<T>::initial(config_));
  }

  BpttBatches batches_;
  ModelConfig config_;
  std::vector<ModelState<T>> states_;
  std::size_t index_ = 0;
};

inline void require_finite(double loss, std::size_t step, const char* what) {
  if (!std::isfinite(loss)) {
    throw numeric_error(std::string(what) + " diverged (non-finite loss) at step " +
                        std::to_string(step));
  }
}

template <typename T>
void maybe_log(const TrainOptions<T>& opts, std::size_t step, double loss) {
  if (opts.logger && opts.log_every != 0 && (step % opts.log_every == 0 || step == opts.steps)) {
    opts.logger(step, loss);
  }
  if (opts.on_eval && opts.eval_every != 0 && (step % opts.eval_every == 0 || step == opts.steps)) {
    opts.on_eval(step);
  }
}

}  // namespace detail

// Desk-scale baseline training over all weights. Returns the last step loss.
template <typename T>
double train_baseline(QrnnModel<T>& model, const TokenStream& train,
                      const TrainOptions<T>& opts) {
  model.validate();
  if (opts.steps == 0) return std::numeric_limits<double>::quiet_NaN();
  detail::BlockCycler<T> cycler(train, model.config, opts.batch_size, opts.bptt_len);
  auto params = trainable_spans(model);
  AdamState<T> adam = AdamState<T>::init(std::span<const std::span<T>>(params), opts.lr);
  Tape<T> tape;
  double loss = 0;
  for (std::size_t step = 1; step <= opts.steps; ++step) {
    BpttBlock block = cycler.next();
    loss = static_cast<double>(forward_with_tape<T>(model, nullptr, nullptr, nullptr,
                                                    block.inputs, block.targets,
                                                    cycler.states(), tape));
    detail::require_finite(loss, step, "baseline training");
    ModelGrads<T> grads = ModelGrads<T>::zeros_like(model);
    backward<T>(model, tape, ParamSelector::kAllWeights, &grads, nullptr, nullptr);
    auto grad_mut = mutable_grad_spans(grads);
    if (opts.clip_norm > 0) {
      clip_by_global_norm(std::span<const std::span<T>>(grad_mut), opts.clip_norm);
    }
    auto grad_view = grad_spans(grads);
    adam_step(adam, std::span<const std::span<T>>(params),
              std::span<const std::span<const T>>(grad_view));
    detail::maybe_log(opts, step, loss);
  }
  return loss;
}

// Learns the mask parameters only; the model is untouched (and checksummed by
// the caller if it wants proof). Objective: mean cross-entropy under one
// fresh gate sample per step, plus lambda times the closed-form expected L0.
template <typename T>
HardConcreteGates<T> train_gates(const QrnnModel<T>& model, const TokenStream& train,
                                 T lambda, const TrainOptions<T>& opts,
                                 T initial_log_alpha = T{2}) {
  model.validate();
  HardConcreteGates<T> gates = HardConcreteGates<T>::init(model.config, lambda,
                                                          initial_log_alpha);
  if (opts.steps == 0) return gates;
  detail::BlockCycler<T> cycler(train, model.config, opts.batch_size, opts.bptt_len);
  auto params = trainable_spans(gates);
  AdamState<T> adam = AdamState<T>::init(std::span<const std::span<T>>(params), opts.lr);
  Rng noise(derive_seed(opts.seed, "gate.noise"));
  Tape<T> tape;
  const T shift = static_cast<T>(gates.hyper.penalty_shift());
  for (std::size_t step = 1; step <= opts.steps; ++step) {
    BpttBlock block = cycler.next();
    GateSample<T> sample = draw_gate_sample(gates, noise);
    T ce = forward_with_tape<T>(model, &gates, &sample, nullptr, block.inputs, block.targets,
                                cycler.states(), tape);
    double objective = static_cast<double>(ce) +
                       static_cast<double>(lambda) *
                           static_cast<double>(expected_l0_penalty(gates));
    detail::require_finite(objective, step, "gate training");
    GateGrads<T> grads = GateGrads<T>::zeros_like(gates);
    backward<T>(model, tape, ParamSelector::kGateLogAlphas, nullptr, &grads, nullptr);
    for (std::size_t l = 0; l < grads.log_alpha.size(); ++l) {
      for (std::size_t i = 0; i < grads.log_alpha[l].size(); ++i) {
        T s = sigmoid_scalar(gates.log_alpha[l][i] + shift);
        grads.log_alpha[l][i] += lambda * s * (T{1} - s);
      }
    }
    auto grad_view = grad_spans(grads);
    adam_step(adam, std::span<const std::span<T>>(params),
              std::span<const std::span<const T>>(grad_view));
    detail::maybe_log(opts, step, objective);
  }
  return gates;
}

// Trains the rank-1 factors over a pruned model whose weights stay frozen.
template <typename T>
SruUpdate<T> train_sru(const QrnnModel<T>& pruned, const TokenStream& train,
                       const TrainOptions<T>& opts, const std::string& mask_sha256 = "",
                       const std::string& tag = "", double flops_fraction = 1.0) {
  pruned.validate();
  SruUpdate<T> sru = init_sru(pruned, opts.seed, mask_sha256, tag);
  sru.flops_fraction = flops_fraction;
  if (opts.steps == 0) return sru;
  detail::BlockCycler<T> cycler(train, pruned.config, opts.batch_size, opts.bptt_len);
  auto params = trainable_spans(sru);
  AdamState<T> adam = AdamState<T>::init(std::span<const std::span<T>>(params), opts.lr);
  Tape<T> tape;
  for (std::size_t step = 1; step <= opts.steps; ++step) {
    BpttBlock block = cycler.next();
    double loss = static_cast<double>(forward_with_tape<T>(pruned, nullptr, nullptr, &sru,
                                                           block.inputs, block.targets,
                                                           cycler.states(), tape));
    detail::require_finite(loss, step, "rank-1 update training");
    SruGrads<T> grads = SruGrads<T>::zeros_like(sru);
    backward<T>(pruned, tape, ParamSelector::kSruFactors, nullptr, nullptr, &grads, &sru);
    auto grad_view = grad_spans(grads);
    if (opts.clip_norm > 0) {
      // Clip on a mutable view of the same buffers.
      std::vector<std::span<T>> mut;
      mut.reserve(grads.layers.size() * 6);
      for (auto& layer : grads.layers) {
        for (auto* g : {&layer.z, &layer.f, &layer.o}) {
          mut.emplace_back(g->u);
          mut.emplace_back(g->v);
        }
      }
      clip_by_global_norm(std::span<const std::span<T>>(mut), opts.clip_norm);
    }
    adam_step(adam, std::span<const std::span<T>>(params),
              std::span<const std::span<const T>>(grad_view));
    detail::maybe_log(opts, step, loss);
  }
  return sru;
}

// One trained-and-discretized L0 operating point.
template <typename T>
struct L0OperatingPoint {
  T lambda;
  HardConcreteGates<T> gates;
  DiscretizedGates<T> discretized;
};

// Trains gates at each penalty weight and discretizes them. Points whose
// gates close an entire layer are dropped (reported through `on_failure`).
// Useful penalty weights depend on the model and corpus scale, so picking
// lambda for a FLOPs target is a sweep, not a formula.
template <typename T>
std::vector<L0OperatingPoint<T>> lambda_sweep(
    const QrnnModel<T>& model, const TokenStream& train, std::span<const T> lambdas,
    const TrainOptions<T>& opts,
    const std::function<void(T lambda, const std::string& reason)>& on_failure = {}) {
  std::vector<L0OperatingPoint<T>> points;
  for (T lambda : lambdas) {
    TrainOptions<T> point_opts = opts;
    point_opts.seed = derive_seed(opts.seed, "lambda." + std::to_string(lambda));
    HardConcreteGates<T> gates = train_gates(model, train, lambda, point_opts);
    try {
      DiscretizedGates<T> disc = gates_to_mask_and_scale(model, gates);
      points.push_back({lambda, std::move(gates), std::move(disc)});
    } catch (const error& e) {
      if (on_failure) on_failure(lambda, e.what());
    }
  }
  return points;
}

}  // namespace qzlm
