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

// The QRNN language model: a tied embedding feeding stacked layers of
// time-masked convolution plus fo-pooling, with the embedding reused as the
// output projection. Supports batch forward over a token sequence and a
// stateful single-token step for incremental next-word prediction; the two
// paths share kernels, so a stepped prefix reproduces the batch forward
// column for column.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qzlm/common.hpp"
#include "qzlm/detail/sha256.hpp"
#include "qzlm/matrix.hpp"
#include "qzlm/rng.hpp"

namespace qzlm {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 0;
  std::vector<std::size_t> hidden_sizes;   // output channels m per layer
  std::vector<std::size_t> window_sizes;   // temporal window r per layer

  std::size_t num_layers() const { return hidden_sizes.size(); }

  // Input channels k of layer l: embeddings for the first layer, the previous
  // layer's output for the rest.
  std::size_t layer_input_dim(std::size_t layer) const {
    return layer == 0 ? embed_dim : hidden_sizes[layer - 1];
  }

  // Stacked width s = k * r seen by the layer's weight matrices.
  std::size_t layer_stacked_dim(std::size_t layer) const {
    return layer_input_dim(layer) * window_sizes[layer];
  }

  void validate() const {
    if (vocab_size == 0 || embed_dim == 0) {
      throw config_error("model config: vocab_size and embed_dim must be positive");
    }
    if (hidden_sizes.empty() || hidden_sizes.size() != window_sizes.size()) {
      throw config_error("model config: need one hidden size and one window size per layer");
    }
    for (std::size_t r : window_sizes) {
      if (r == 0) throw config_error("model config: window sizes must be >= 1");
    }
    for (std::size_t m : hidden_sizes) {
      if (m == 0) throw config_error("model config: hidden sizes must be >= 1");
    }
    // Weight tying requires the last layer to land back on the embedding width.
    if (hidden_sizes.back() != embed_dim) {
      throw config_error("model config: last hidden size (" +
                         std::to_string(hidden_sizes.back()) +
                         ") must equal embed_dim (" + std::to_string(embed_dim) +
                         ") for weight tying");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct QrnnLayerWeights {
  Matrix<T> w_z;  // m x s, input gate (through tanh)
  Matrix<T> w_f;  // m x s, forget gate (through sigmoid)
  Matrix<T> w_o;  // m x s, output gate (through sigmoid)
};

template <typename T>
struct QrnnModel {
  ModelConfig config;
  // vocab x embed. Rows are input embeddings; the same matrix is the output
  // projection, so there is exactly one copy of these weights.
  Matrix<T> embedding;
  std::vector<QrnnLayerWeights<T>> layers;

  void validate() const {
    config.validate();
    if (embedding.rows() != config.vocab_size || embedding.cols() != config.embed_dim) {
      throw config_error("model: embedding is " + embedding.shape_string() +
                         ", config wants " + std::to_string(config.vocab_size) + "x" +
                         std::to_string(config.embed_dim));
    }
    if (layers.size() != config.num_layers()) {
      throw config_error("model: layer count mismatch");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& w = layers[l];
      std::size_t m = config.hidden_sizes[l];
      std::size_t s = config.layer_stacked_dim(l);
      for (const Matrix<T>* g : {&w.w_z, &w.w_f, &w.w_o}) {
        if (g->rows() != m || g->cols() != s) {
          throw config_error("model: layer " + std::to_string(l) + " weight is " +
                             g->shape_string() + ", expected " + std::to_string(m) +
                             "x" + std::to_string(s));
        }
      }
    }
  }

  template <typename U>
  QrnnModel<U> cast() const {
    QrnnModel<U> out;
    out.config = config;
    out.embedding = embedding.template cast<U>();
    out.layers.reserve(layers.size());
    for (const auto& w : layers) {
      out.layers.push_back({w.w_z.template cast<U>(), w.w_f.template cast<U>(),
                            w.w_o.template cast<U>()});
    }
    return out;
  }

  static QrnnModel random_init(const ModelConfig& config, Rng& rng, T scale = T(0.1)) {
    config.validate();
    QrnnModel model;
    model.config = config;
    model.embedding = Matrix<T>(config.vocab_size, config.embed_dim);
    for (T& v : model.embedding.flat()) {
      v = static_cast<T>(rng.uniform(-scale, scale));
    }
    for (std::size_t l = 0; l < config.num_layers(); ++l) {
      std::size_t m = config.hidden_sizes[l];
      std::size_t s = config.layer_stacked_dim(l);
      QrnnLayerWeights<T> w{Matrix<T>(m, s), Matrix<T>(m, s), Matrix<T>(m, s)};
      for (Matrix<T>* g : {&w.w_z, &w.w_f, &w.w_o}) {
        for (T& v : g->flat()) v = static_cast<T>(rng.uniform(-scale, scale));
      }
      model.layers.push_back(std::move(w));
    }
    return model;
  }
};

// Recurrent state of one layer: the cell vector plus the last (r-1) input
// columns the masked convolution still needs. History columns are ordered
// oldest first.
template <typename T>
struct LayerState {
  std::vector<T> c;
  Matrix<T> history;  // k x (r-1)
};

template <typename T>
struct ModelState {
  std::vector<LayerState<T>> layers;

  static ModelState initial(const ModelConfig& config) {
    ModelState state;
    state.layers.reserve(config.num_layers());
    for (std::size_t l = 0; l < config.num_layers(); ++l) {
      LayerState<T> s;
      s.c.assign(config.hidden_sizes[l], T{0});
      s.history = Matrix<T>(config.layer_input_dim(l), config.window_sizes[l] - 1);
      state.layers.push_back(std::move(s));
    }
    return state;
  }
};

// Stacks each input column with its r-1 predecessors: column t of the result
// is x_{t-r+1} (+) ... (+) x_t, oldest block first. Missing predecessors come
// from `history` when given, otherwise they are zero (sequence start).
template <typename T>
Matrix<T> stack_window(const Matrix<T>& inputs, std::size_t window,
                       const Matrix<T>* history = nullptr) {
  const std::size_t k = inputs.rows();
  const std::size_t n = inputs.cols();
  Matrix<T> stacked(k * window, n);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t block = 0; block < window; ++block) {
      std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + block + 1) -
                           static_cast<std::ptrdiff_t>(window);
      if (src >= 0) {
        for (std::size_t i = 0; i < k; ++i) {
          stacked(block * k + i, t) = inputs(i, static_cast<std::size_t>(src));
        }
      } else if (history != nullptr) {
        std::size_t h = static_cast<std::size_t>(src + static_cast<std::ptrdiff_t>(window) - 1);
        for (std::size_t i = 0; i < k; ++i) {
          stacked(block * k + i, t) = (*history)(i, h);
        }
      }
      // else: zero left-padding, already the default
    }
  }
  return stacked;
}

template <typename T>
struct ConvOut {
  Matrix<T> z, f, o;  // m x n, post-activation
};

// Time-masked convolution: column t of each gate pre-activation is
// W * (x_{t-r+1} (+) ... (+) x_t); Z goes through tanh, F and O through
// sigmoid. The window is inferred from the weight width.
template <typename T>
ConvOut<T> masked_conv(const QrnnLayerWeights<T>& weights, const Matrix<T>& inputs,
                       OpCounter* counter = nullptr, const Matrix<T>* history = nullptr) {
  const std::size_t k = inputs.rows();
  if (k == 0 || weights.w_z.cols() % k != 0) {
    throw shape_error("masked_conv: weights " + weights.w_z.shape_string() +
                      " do not divide into windows of " + std::to_string(k) +
                      " input channels");
  }
  const std::size_t window = weights.w_z.cols() / k;
  Matrix<T> stacked = stack_window(inputs, window, history);
  ConvOut<T> out;
  out.z = tanh(matmul(weights.w_z, stacked, counter));
  out.f = sigmoid(matmul(weights.w_f, stacked, counter));
  out.o = sigmoid(matmul(weights.w_o, stacked, counter));
  return out;
}

template <typename T>
struct PoolOut {
  Matrix<T> h;        // m x n
  std::vector<T> c;   // final cell state
};

// fo-pooling: c_t = f_t . c_{t-1} + (1 - f_t) . z_t, h_t = o_t . c_t.
// Counts 5 operations per element (3 mul, 2 add) when instrumented.
template <typename T>
PoolOut<T> fo_pool(const Matrix<T>& z, const Matrix<T>& f, const Matrix<T>& o,
                   std::span<const T> c0, OpCounter* counter = nullptr) {
  detail::require_same_shape(z, f, "fo_pool");
  detail::require_same_shape(z, o, "fo_pool");
  const std::size_t m = z.rows();
  const std::size_t n = z.cols();
  if (c0.size() != m) {
    throw shape_error("fo_pool: c0 has length " + std::to_string(c0.size()) +
                      ", expected " + std::to_string(m));
  }
  PoolOut<T> out;
  out.h = Matrix<T>(m, n);
  out.c.assign(c0.begin(), c0.end());
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t i = 0; i < m; ++i) {
      T ft = f(i, t);
      T ct = ft * out.c[i] + (T{1} - ft) * z(i, t);
      out.c[i] = ct;
      out.h(i, t) = o(i, t) * ct;
    }
  }
  if (counter != nullptr) {
    counter->multiplications += 3ull * m * n;
    counter->additions += 2ull * m * n;
  }
  return out;
}

// Embedding lookup: column t is the embedding row of token t. Not counted as
// FLOPs (it is a copy, not arithmetic).
template <typename T>
Matrix<T> embed_tokens(const QrnnModel<T>& model, std::span<const std::int32_t> tokens) {
  Matrix<T> x(model.config.embed_dim, tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    std::int32_t id = tokens[t];
    if (id < 0 || static_cast<std::size_t>(id) >= model.config.vocab_size) {
      throw data_error("token id " + std::to_string(id) + " out of range for vocab of " +
                       std::to_string(model.config.vocab_size));
    }
    for (std::size_t i = 0; i < model.config.embed_dim; ++i) {
      x(i, t) = model.embedding(static_cast<std::size_t>(id), i);
    }
  }
  return x;
}

namespace detail {
struct NoLayerHook {
  template <typename T>
  void operator()(std::size_t, const Matrix<T>&) const {}
};
}  // namespace detail

// Batch forward that carries recurrent state and reports each layer's output
// to `hook(layer, H)`. Returns vocab x n logits via the tied projection.
template <typename T, typename Hook = detail::NoLayerHook>
Matrix<T> forward_with_state(const QrnnModel<T>& model, std::span<const std::int32_t> tokens,
                             ModelState<T>& state, OpCounter* counter = nullptr,
                             Hook&& hook = Hook{}) {
  if (state.layers.size() != model.config.num_layers()) {
    throw shape_error("forward: state has " + std::to_string(state.layers.size()) +
                      " layers, model has " + std::to_string(model.config.num_layers()));
  }
  Matrix<T> x = embed_tokens(model, tokens);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    LayerState<T>& ls = state.layers[l];
    const std::size_t window = model.config.window_sizes[l];
    ConvOut<T> conv = masked_conv(model.layers[l], x, counter,
                                  window > 1 ? &ls.history : nullptr);
    // Stash the trailing r-1 input columns before x is replaced.
    if (window > 1) {
      const std::size_t keep = window - 1;
      Matrix<T> next_history(x.rows(), keep);
      for (std::size_t j = 0; j < keep; ++j) {
        std::ptrdiff_t src = static_cast<std::ptrdiff_t>(x.cols()) -
                             static_cast<std::ptrdiff_t>(keep) +
                             static_cast<std::ptrdiff_t>(j);
        for (std::size_t i = 0; i < x.rows(); ++i) {
          next_history(i, j) = src >= 0
                                   ? x(i, static_cast<std::size_t>(src))
                                   : ls.history(i, static_cast<std::size_t>(
                                                       src + static_cast<std::ptrdiff_t>(keep)));
        }
      }
      ls.history = std::move(next_history);
    }
    PoolOut<T> pool = fo_pool(conv.z, conv.f, conv.o, std::span<const T>(ls.c), counter);
    ls.c = std::move(pool.c);
    hook(l, pool.h);
    x = std::move(pool.h);
  }
  return matmul(model.embedding, x, counter);
}

// Batch forward from a fresh zero state.
template <typename T>
Matrix<T> forward(const QrnnModel<T>& model, std::span<const std::int32_t> tokens,
                  OpCounter* counter = nullptr) {
  ModelState<T> state = ModelState<T>::initial(model.config);
  return forward_with_state(model, tokens, state, counter);
}

// Checksum over every weight byte; the frozen-weight guarantee of the gate
// and rank-1 trainers is asserted against this.
template <typename T>
std::string weights_sha256(const QrnnModel<T>& model) {
  detail::Sha256 h;
  auto feed = [&](const Matrix<T>& m) {
    h.update(m.data(), m.size() * sizeof(T));
  };
  feed(model.embedding);
  for (const auto& w : model.layers) {
    feed(w.w_z);
    feed(w.w_f);
    feed(w.w_o);
  }
  return detail::to_hex(h.digest());
}

// Single-token step for incremental prediction. Shares the batch kernel, so
// stepping a prefix reproduces the batch forward exactly.
template <typename T>
std::vector<T> step(const QrnnModel<T>& model, ModelState<T>& state, std::int32_t token,
                    OpCounter* counter = nullptr) {
  std::int32_t tokens[1] = {token};
  Matrix<T> logits = forward_with_state(model, std::span<const std::int32_t>(tokens, 1),
                                        state, counter);
  return logits.col_vector(0);
}

}  // namespace qzlm
