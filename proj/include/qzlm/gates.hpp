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

// Hard concrete stochastic gates for feature-map-level L0 regularization.
// One gate per filter of every prunable layer multiplies the rows of that
// layer's Z pre-activation, so a closed gate silences the whole feature map
// (h_i stays zero whenever c_0 = 0). Training learns only the gate
// parameters log_alpha; the network weights stay frozen.
//
//   sampled: s = sigmoid((logit(u) + log_alpha) / beta), u ~ Uniform(0,1)
//            z = clamp((zeta - gamma) s + gamma, 0, 1)
//   penalty: P(z > 0) = sigmoid(log_alpha - beta log(-gamma/zeta))
//   test:    z = clamp(sigmoid(log_alpha)(zeta - gamma) + gamma, 0, 1)
//
// With the fixed stretch (gamma, zeta, beta) = (-0.1, 1.1, 2/3) the penalty
// shift is (2/3) ln 11 and the test gate closes exactly at
// log_alpha <= -ln 11.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qzlm/common.hpp"
#include "qzlm/matrix.hpp"
#include "qzlm/model.hpp"
#include "qzlm/pruning.hpp"
#include "qzlm/rng.hpp"

namespace qzlm {

struct HardConcreteHyper {
  double gamma = -0.1;
  double zeta = 1.1;
  double beta = 2.0 / 3.0;

  void validate() const {
    if (!(gamma < 0.0) || !(zeta > 1.0) || !(beta > 0.0)) {
      throw config_error("hard concrete stretch must satisfy gamma < 0 < 1 < zeta, beta > 0");
    }
  }

  // The constant added to log_alpha inside the expected-L0 sigmoid:
  // -beta * log(-gamma/zeta), ~1.5986 for the defaults.
  double penalty_shift() const { return -beta * std::log(-gamma / zeta); }
};

// Mask parameters phi = log_alpha for every prunable layer (the final layer
// keeps no gates; it is never pruned).
template <typename T>
struct HardConcreteGates {
  std::vector<std::vector<T>> log_alpha;
  HardConcreteHyper hyper;
  T lambda = T{0};

  static HardConcreteGates init(const ModelConfig& config, T lambda,
                                T initial_log_alpha = T{2}) {
    config.validate();
    HardConcreteGates gates;
    gates.lambda = lambda;
    for (std::size_t l = 0; l + 1 < config.num_layers(); ++l) {
      gates.log_alpha.emplace_back(config.hidden_sizes[l], initial_log_alpha);
    }
    return gates;
  }

  std::size_t total_gates() const {
    std::size_t n = 0;
    for (const auto& layer : log_alpha) n += layer.size();
    return n;
  }
};

// One evaluated gate: its value and the derivative dz/dlog_alpha (zero when
// the clamp is active, the min/max subgradient).
template <typename T>
struct GateEval {
  T z;
  T dz_dlog_alpha;
};

template <typename T>
GateEval<T> sample_gate_eval(T log_alpha, T logit_u, const HardConcreteHyper& hyper) {
  const T beta = static_cast<T>(hyper.beta);
  const T gamma = static_cast<T>(hyper.gamma);
  const T zeta = static_cast<T>(hyper.zeta);
  T s = sigmoid_scalar((logit_u + log_alpha) / beta);
  T stretched = (zeta - gamma) * s + gamma;
  if (stretched <= T{0}) return {T{0}, T{0}};
  if (stretched >= T{1}) return {T{1}, T{0}};
  T ds = s * (T{1} - s) / beta;
  return {stretched, (zeta - gamma) * ds};
}

// The per-filter noise that fixes one Monte Carlo sample: logit(u) with
// u ~ Uniform(0,1). Holding it fixed makes the sampled objective a smooth
// deterministic function of log_alpha.
template <typename T>
struct GateSample {
  std::vector<std::vector<T>> logit_u;
};

template <typename T>
GateSample<T> draw_gate_sample(const HardConcreteGates<T>& gates, Rng& rng) {
  GateSample<T> sample;
  sample.logit_u.reserve(gates.log_alpha.size());
  for (const auto& layer : gates.log_alpha) {
    std::vector<T> lu(layer.size());
    for (T& v : lu) {
      double u = rng.uniform01();
      v = static_cast<T>(std::log(u) - std::log1p(-u));
    }
    sample.logit_u.push_back(std::move(lu));
  }
  return sample;
}

// Stochastic gate vector for one layer (the z = clamp(stretch(s)) draw).
template <typename T>
std::vector<T> sample_gate(std::span<const T> log_alpha, const HardConcreteHyper& hyper,
                           Rng& rng) {
  std::vector<T> z(log_alpha.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    double u = rng.uniform01();
    T logit_u = static_cast<T>(std::log(u) - std::log1p(-u));
    z[i] = sample_gate_eval(log_alpha[i], logit_u, hyper).z;
  }
  return z;
}

// Closed-form expected L0: sum_i P(z_i > 0).
template <typename T>
T expected_l0_penalty(std::span<const T> log_alpha, const HardConcreteHyper& hyper) {
  const T shift = static_cast<T>(hyper.penalty_shift());
  T total{0};
  for (T la : log_alpha) total += sigmoid_scalar(la + shift);
  return total;
}

template <typename T>
T expected_l0_penalty(const HardConcreteGates<T>& gates) {
  T total{0};
  for (const auto& layer : gates.log_alpha) {
    total += expected_l0_penalty(std::span<const T>(layer), gates.hyper);
  }
  return total;
}

// Deterministic test-time estimator.
template <typename T>
std::vector<T> test_gate(std::span<const T> log_alpha, const HardConcreteHyper& hyper) {
  const T gamma = static_cast<T>(hyper.gamma);
  const T zeta = static_cast<T>(hyper.zeta);
  std::vector<T> z(log_alpha.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    T stretched = sigmoid_scalar(log_alpha[i]) * (zeta - gamma) + gamma;
    z[i] = std::min(T{1}, std::max(T{0}, stretched));
  }
  return z;
}

template <typename T>
struct DiscretizedGates {
  PruneMask mask;
  QrnnModel<T> model;  // pruned, with surviving W_z rows scaled by their gate
  double flops_fraction;
};

// Turns trained gates into a hard mask plus scale absorption: filters whose
// test gate is zero are dropped; surviving W_z rows are multiplied by their
// gate value, so the deterministic pruned model reproduces the test-time
// gated model exactly.
template <typename T>
DiscretizedGates<T> gates_to_mask_and_scale(const QrnnModel<T>& model,
                                            const HardConcreteGates<T>& gates) {
  if (gates.log_alpha.size() + 1 != model.config.num_layers()) {
    throw config_error("gates cover " + std::to_string(gates.log_alpha.size()) +
                       " layers, model has " +
                       std::to_string(model.config.num_layers() - 1) + " prunable ones");
  }
  PruneMask mask = PruneMask::full(model.config);
  std::vector<std::vector<T>> kept_scale(gates.log_alpha.size());
  for (std::size_t l = 0; l < gates.log_alpha.size(); ++l) {
    if (gates.log_alpha[l].size() != model.config.hidden_sizes[l]) {
      throw config_error("gate vector for layer " + std::to_string(l) +
                         " has wrong length");
    }
    std::vector<T> z = test_gate(std::span<const T>(gates.log_alpha[l]), gates.hyper);
    std::vector<std::uint32_t> kept;
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (z[i] > T{0}) {
        kept.push_back(static_cast<std::uint32_t>(i));
        kept_scale[l].push_back(z[i]);
      }
    }
    if (kept.empty()) {
      throw config_error("every gate of layer " + std::to_string(l) +
                         " is closed; the mask would keep no filters");
    }
    mask.kept[l] = std::move(kept);
  }
  DiscretizedGates<T> out{mask, apply_mask(model, mask), 0.0};
  for (std::size_t l = 0; l < kept_scale.size(); ++l) {
    Matrix<T>& wz = out.model.layers[l].w_z;
    for (std::size_t i = 0; i < wz.rows(); ++i) {
      for (T& v : wz.row(i)) v *= kept_scale[l][i];
    }
  }
  out.flops_fraction = FlopsModel(model.config).fraction(mask);
  return out;
}

}  // namespace qzlm
