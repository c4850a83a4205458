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

// Single-rank update (SRU): a trained rank-1 correction dW = u v^T added to
// every gate weight of every convolution layer of a pruned model, with the
// base weights frozen. Storage grows with m' + s' instead of m' * s', so a
// few operating points cost kilobytes. At inference the correction is
// materialized into the weights once, keeping per-query FLOPs unchanged.

#include <cstdint>
#include <string>
#include <vector>

#include "qzlm/common.hpp"
#include "qzlm/model.hpp"
#include "qzlm/pruning.hpp"
#include "qzlm/rng.hpp"

namespace qzlm {

// Fixed bookkeeping charged per stored update (tag, mask hash, shapes).
inline constexpr std::size_t kSruHeaderBytes = 64;

template <typename T>
struct SruUpdate {
  struct Factors {
    std::vector<T> u;  // length m' (output channels)
    std::vector<T> v;  // length s' (stacked input width)
  };
  struct Layer {
    Factors z, f, o;
  };

  std::vector<Layer> layers;
  std::string mask_sha256;     // identity of the mask this was trained against
  std::string tag;             // operating-point label
  double flops_fraction = 1.0;

  void validate_shapes(const ModelConfig& config) const {
    if (layers.size() != config.num_layers()) {
      throw shape_error("sru update covers " + std::to_string(layers.size()) +
                        " layers, model has " + std::to_string(config.num_layers()));
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::size_t m = config.hidden_sizes[l];
      std::size_t s = config.layer_stacked_dim(l);
      for (const Factors* g : {&layers[l].z, &layers[l].f, &layers[l].o}) {
        if (g->u.size() != m || g->v.size() != s) {
          throw shape_error("sru factors for layer " + std::to_string(l) + " are " +
                            std::to_string(g->u.size()) + "/" + std::to_string(g->v.size()) +
                            ", expected " + std::to_string(m) + "/" + std::to_string(s));
        }
      }
    }
  }
};

// Every u, v entry drawn i.i.d. Normal(0, 0.1); deterministic given the seed.
template <typename T>
SruUpdate<T> init_sru(const QrnnModel<T>& model, std::uint64_t seed,
                      const std::string& mask_sha256 = "", const std::string& tag = "") {
  Rng rng(derive_seed(seed, "sru.init"));
  SruUpdate<T> sru;
  sru.mask_sha256 = mask_sha256;
  sru.tag = tag;
  sru.layers.reserve(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    std::size_t m = model.config.hidden_sizes[l];
    std::size_t s = model.config.layer_stacked_dim(l);
    typename SruUpdate<T>::Layer layer;
    for (auto* g : {&layer.z, &layer.f, &layer.o}) {
      g->u.resize(m);
      g->v.resize(s);
      for (T& x : g->u) x = static_cast<T>(rng.normal(0.0, 0.1));
      for (T& x : g->v) x = static_cast<T>(rng.normal(0.0, 0.1));
    }
    sru.layers.push_back(std::move(layer));
  }
  return sru;
}

namespace detail {

template <typename T>
void add_rank_one(Matrix<T>& w, const std::vector<T>& u, const std::vector<T>& v) {
  for (std::size_t i = 0; i < w.rows(); ++i) {
    T* row = w.data() + i * w.cols();
    const T ui = u[i];
    for (std::size_t j = 0; j < w.cols(); ++j) {
      row[j] += ui * v[j];
    }
  }
}

}  // namespace detail

// W* = W + u v^T for every gate of every layer; the input model is untouched.
// Refuses to apply an update trained against a different mask.
template <typename T>
QrnnModel<T> apply_sru(const QrnnModel<T>& model, const SruUpdate<T>& sru,
                       std::string_view model_mask_sha256) {
  if (!sru.mask_sha256.empty() && sru.mask_sha256 != model_mask_sha256) {
    throw data_error("sru update was trained against mask " + sru.mask_sha256 +
                     " but the model carries mask " + std::string(model_mask_sha256));
  }
  sru.validate_shapes(model.config);
  QrnnModel<T> out = model;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    detail::add_rank_one(out.layers[l].w_z, sru.layers[l].z.u, sru.layers[l].z.v);
    detail::add_rank_one(out.layers[l].w_f, sru.layers[l].f.u, sru.layers[l].f.v);
    detail::add_rank_one(out.layers[l].w_o, sru.layers[l].o.u, sru.layers[l].o.v);
  }
  return out;
}

// Accounting: element_width * sum over layers and gates of (m' + s'), plus a
// fixed header. Linear in the surviving dimensions, not their product.
template <typename T>
std::uint64_t sru_storage_bytes(const SruUpdate<T>& sru, std::size_t element_width = 4) {
  std::uint64_t elements = 0;
  for (const auto& layer : sru.layers) {
    for (const auto* g : {&layer.z, &layer.f, &layer.o}) {
      elements += g->u.size() + g->v.size();
    }
  }
  return elements * element_width + kSruHeaderBytes;
}

// Same accounting straight from a config (no materialized update needed).
inline std::uint64_t sru_storage_bytes(const ModelConfig& config,
                                       std::size_t element_width = 4) {
  std::uint64_t elements = 0;
  for (std::size_t l = 0; l < config.num_layers(); ++l) {
    elements += 3ull * (config.hidden_sizes[l] + config.layer_stacked_dim(l));
  }
  return elements * element_width + kSruHeaderBytes;
}

}  // namespace qzlm
