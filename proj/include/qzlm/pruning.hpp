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

// Structured filter pruning. Dropping filter i of layer l removes row i from
// all three gate weights of that layer (tied indices) and the matching input
// columns of layer l+1 -- one column per window block when the next layer has
// a window wider than one. The result is a physically smaller dense model.
//
// The last layer is never pruned: its output width is tied to the embedding,
// so removing its filters would break the tied projection. Only its input
// columns shrink. This puts a floor on the reachable FLOPs fraction, which
// solve_operating_point reports when a target is below it.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "qzlm/common.hpp"
#include "qzlm/data.hpp"
#include "qzlm/detail/sha256.hpp"
#include "qzlm/model.hpp"

namespace qzlm {

// Per-layer sorted kept-filter indices. The mask is the "knob" position.
struct PruneMask {
  std::vector<std::vector<std::uint32_t>> kept;

  static PruneMask full(const ModelConfig& config) {
    PruneMask mask;
    mask.kept.reserve(config.num_layers());
    for (std::size_t m : config.hidden_sizes) {
      std::vector<std::uint32_t> all(m);
      std::iota(all.begin(), all.end(), 0u);
      mask.kept.push_back(std::move(all));
    }
    return mask;
  }

  bool is_full(const ModelConfig& config) const {
    if (kept.size() != config.num_layers()) return false;
    for (std::size_t l = 0; l < kept.size(); ++l) {
      if (kept[l].size() != config.hidden_sizes[l]) return false;
    }
    return true;
  }

  void validate(const ModelConfig& config) const {
    if (kept.size() != config.num_layers()) {
      throw config_error("prune mask covers " + std::to_string(kept.size()) +
                         " layers, model has " + std::to_string(config.num_layers()));
    }
    for (std::size_t l = 0; l < kept.size(); ++l) {
      const auto& k = kept[l];
      if (k.empty()) {
        throw config_error("prune mask keeps no filters in layer " + std::to_string(l));
      }
      if (!std::is_sorted(k.begin(), k.end()) ||
          std::adjacent_find(k.begin(), k.end()) != k.end()) {
        throw config_error("prune mask for layer " + std::to_string(l) +
                           " must be sorted and unique");
      }
      if (k.back() >= config.hidden_sizes[l]) {
        throw config_error("prune mask index " + std::to_string(k.back()) +
                           " out of range in layer " + std::to_string(l));
      }
    }
    if (!kept.empty() && kept.back().size() != config.hidden_sizes.back()) {
      throw config_error("prune mask must keep every filter of the final layer");
    }
  }

  // Stable identity used to pair rank-1 updates with the mask they were
  // trained against.
  std::string sha256() const {
    detail::Sha256 h;
    std::uint64_t layers = kept.size();
    h.update(&layers, sizeof layers);
    for (const auto& k : kept) {
      std::uint64_t n = k.size();
      h.update(&n, sizeof n);
      h.update(k.data(), k.size() * sizeof(std::uint32_t));
    }
    return detail::to_hex(h.digest());
  }

  bool operator==(const PruneMask&) const = default;
};

// Mean |h| per filter, collected over a corpus pass.
struct ActivationStats {
  std::vector<std::vector<double>> mean_abs;  // one vector per layer
  std::uint64_t tokens = 0;
};

namespace detail {

inline std::size_t drop_count(std::size_t filters, double fraction) {
  if (fraction < 0.0 || fraction >= 1.0) {
    throw config_error("prune fraction must lie in [0, 1), got " +
                       std::to_string(fraction));
  }
  return static_cast<std::size_t>(fraction * static_cast<double>(filters));
}

// Keep everything except the `drop` smallest scores; ties drop the lower
// index first.
inline std::vector<std::uint32_t> keep_largest(const std::vector<double>& scores,
                                               std::size_t drop) {
  std::vector<std::uint32_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return a < b;
  });
  std::vector<std::uint32_t> kept(order.begin() + static_cast<std::ptrdiff_t>(drop),
                                  order.end());
  std::sort(kept.begin(), kept.end());
  return kept;
}

}  // namespace detail

// Uniformly samples floor(fraction * m) filters to drop in every prunable
// layer. Deterministic given the seed.
inline PruneMask random_mask(const ModelConfig& config, double fraction, std::uint64_t seed) {
  PruneMask mask = PruneMask::full(config);
  Rng rng(derive_seed(seed, "prune.random"));
  for (std::size_t l = 0; l + 1 < config.num_layers(); ++l) {
    std::size_t m = config.hidden_sizes[l];
    std::size_t drop = detail::drop_count(m, fraction);
    std::vector<std::uint32_t> ids(m);
    std::iota(ids.begin(), ids.end(), 0u);
    // Partial Fisher-Yates: the first `drop` entries are the dropped set.
    for (std::size_t i = 0; i < drop; ++i) {
      std::size_t j = i + static_cast<std::size_t>(rng.bounded(m - i));
      std::swap(ids[i], ids[j]);
    }
    std::vector<std::uint32_t> kept(ids.begin() + static_cast<std::ptrdiff_t>(drop), ids.end());
    std::sort(kept.begin(), kept.end());
    mask.kept[l] = std::move(kept);
  }
  return mask;
}

// Drops the filters whose W_z rows have the smallest L1 norms.
template <typename T>
PruneMask filter_norm_mask(const QrnnModel<T>& model, double fraction) {
  PruneMask mask = PruneMask::full(model.config);
  for (std::size_t l = 0; l + 1 < model.config.num_layers(); ++l) {
    const Matrix<T>& wz = model.layers[l].w_z;
    std::vector<double> norms(wz.rows());
    for (std::size_t i = 0; i < wz.rows(); ++i) {
      double acc = 0;
      for (T v : wz.row(i)) acc += std::abs(static_cast<double>(v));
      norms[i] = acc;
    }
    mask.kept[l] = detail::keep_largest(norms, detail::drop_count(wz.rows(), fraction));
  }
  return mask;
}

// Single deterministic pass over (a prefix of) the stream, batch 1, state
// carried, accumulating mean |h_t[i]| per filter. max_tokens = 0 means the
// whole stream.
template <typename T>
ActivationStats collect_activation_stats(const QrnnModel<T>& model, const TokenStream& stream,
                                         std::size_t max_tokens = 0) {
  if (stream.ids.empty()) {
    throw data_error("collect_activation_stats: empty stream");
  }
  std::size_t limit = max_tokens == 0 ? stream.size() : std::min(max_tokens, stream.size());
  ActivationStats stats;
  stats.mean_abs.reserve(model.config.num_layers());
  for (std::size_t m : model.config.hidden_sizes) {
    stats.mean_abs.emplace_back(m, 0.0);
  }
  ModelState<T> state = ModelState<T>::initial(model.config);
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < limit; start += kChunk) {
    std::size_t len = std::min(kChunk, limit - start);
    std::span<const std::int32_t> chunk(stream.ids.data() + start, len);
    forward_with_state(model, chunk, state, nullptr,
                       [&](std::size_t layer, const Matrix<T>& h) {
                         auto& acc = stats.mean_abs[layer];
                         for (std::size_t i = 0; i < h.rows(); ++i) {
                           for (T v : h.row(i)) acc[i] += std::abs(static_cast<double>(v));
                         }
                       });
  }
  for (auto& layer : stats.mean_abs) {
    for (double& v : layer) v /= static_cast<double>(limit);
  }
  stats.tokens = limit;
  return stats;
}

// Drops the filters with the smallest mean activation magnitude.
inline PruneMask mean_activation_mask(const ModelConfig& config, const ActivationStats& stats,
                                      double fraction) {
  if (stats.mean_abs.size() != config.num_layers()) {
    throw config_error("mean-activation pruning needs stats for all " +
                       std::to_string(config.num_layers()) +
                       " layers; collect stats first");
  }
  PruneMask mask = PruneMask::full(config);
  for (std::size_t l = 0; l + 1 < config.num_layers(); ++l) {
    if (stats.mean_abs[l].size() != config.hidden_sizes[l]) {
      throw config_error("activation stats for layer " + std::to_string(l) +
                         " cover " + std::to_string(stats.mean_abs[l].size()) +
                         " filters, layer has " + std::to_string(config.hidden_sizes[l]));
    }
    mask.kept[l] = detail::keep_largest(stats.mean_abs[l],
                                        detail::drop_count(config.hidden_sizes[l], fraction));
  }
  return mask;
}

// Returns the physically smaller model: kept rows of each gate weight, and
// the surviving input columns of the next layer, replicated across its
// window blocks. The input model is untouched.
template <typename T>
QrnnModel<T> apply_mask(const QrnnModel<T>& model, const PruneMask& mask) {
  mask.validate(model.config);
  QrnnModel<T> out;
  out.config = model.config;
  out.embedding = model.embedding;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    out.config.hidden_sizes[l] = mask.kept[l].size();
  }
  out.layers.reserve(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    // Surviving input columns: every kept input channel once per window block.
    std::size_t in_dim = model.config.layer_input_dim(l);
    std::size_t window = model.config.window_sizes[l];
    std::vector<std::uint32_t> cols;
    if (l == 0) {
      cols.resize(in_dim * window);
      std::iota(cols.begin(), cols.end(), 0u);
    } else {
      cols.reserve(mask.kept[l - 1].size() * window);
      for (std::size_t block = 0; block < window; ++block) {
        for (std::uint32_t i : mask.kept[l - 1]) {
          cols.push_back(static_cast<std::uint32_t>(block * in_dim + i));
        }
      }
    }
    const auto& rows = mask.kept[l];
    auto shrink = [&](const Matrix<T>& w) {
      Matrix<T> s(rows.size(), cols.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < cols.size(); ++j) {
          s(i, j) = w(rows[i], cols[j]);
        }
      }
      return s;
    };
    const auto& w = model.layers[l];
    out.layers.push_back({shrink(w.w_z), shrink(w.w_f), shrink(w.w_o)});
  }
  out.validate();
  return out;
}

// Analytic FLOPs per predicted token as a function of the kept-filter counts.
// Convolution: 3 gates of m'(2s'-1); pooling: 5m'; output projection:
// V(2d-1); embedding lookup free.
class FlopsModel {
 public:
  // Accepts degenerate configs a real model cannot have (e.g. zero layers,
  // projection only); the accounting is still well defined for them.
  explicit FlopsModel(const ModelConfig& config) : config_(config) {
    if (config_.vocab_size == 0 || config_.embed_dim == 0 ||
        config_.hidden_sizes.size() != config_.window_sizes.size()) {
      throw config_error("flops model: inconsistent config");
    }
  }

  std::uint64_t flops(const PruneMask& mask) const {
    mask.validate(config_);
    std::uint64_t total = 0;
    for (std::size_t l = 0; l < config_.num_layers(); ++l) {
      std::uint64_t m = mask.kept[l].size();
      std::uint64_t in = l == 0 ? config_.embed_dim : mask.kept[l - 1].size();
      std::uint64_t s = in * config_.window_sizes[l];
      total += 3 * m * (2 * s - 1);  // conv: m*s mults + m*(s-1) adds per gate
      total += 5 * m;                // pooling
    }
    total += static_cast<std::uint64_t>(config_.vocab_size) * (2 * config_.embed_dim - 1);
    return total;
  }

  std::uint64_t flops_full() const { return flops(PruneMask::full(config_)); }

  double fraction(const PruneMask& mask) const {
    return static_cast<double>(flops(mask)) / static_cast<double>(flops_full());
  }

  const ModelConfig& config() const { return config_; }

 private:
  ModelConfig config_;
};

inline std::uint64_t flops_per_token(const ModelConfig& config, const PruneMask& mask) {
  return FlopsModel(config).flops(mask);
}

inline std::uint64_t flops_per_token(const ModelConfig& config) {
  return FlopsModel(config).flops(PruneMask::full(config));
}

// Uniform per-layer drop fraction whose FLOPs ratio lands nearest the target,
// found by binary search over the distinct floor(n*m) breakpoints. Throws
// when even maximal pruning leaves the ratio more than half a percentage
// point above the target (the untouched output projection and final layer
// set a floor).
inline double solve_operating_point(const ModelConfig& config, double target_flops_fraction) {
  if (!(target_flops_fraction > 0.0) || target_flops_fraction > 1.0) {
    throw config_error("target FLOPs fraction must lie in (0, 1], got " +
                       std::to_string(target_flops_fraction));
  }
  FlopsModel flops(config);
  const double full = static_cast<double>(flops.flops_full());

  // Candidate fractions where some layer's drop count changes.
  std::vector<double> candidates{0.0};
  for (std::size_t l = 0; l + 1 < config.num_layers(); ++l) {
    std::size_t m = config.hidden_sizes[l];
    for (std::size_t j = 1; j < m; ++j) {
      candidates.push_back(static_cast<double>(j) / static_cast<double>(m));
    }
  }
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  auto achieved = [&](double fraction) {
    PruneMask mask = PruneMask::full(config);
    for (std::size_t l = 0; l + 1 < config.num_layers(); ++l) {
      std::size_t m = config.hidden_sizes[l];
      std::size_t drop = detail::drop_count(m, fraction);
      mask.kept[l].assign(m - drop, 0);
      std::iota(mask.kept[l].begin(), mask.kept[l].end(), 0u);  // identity of kept set is irrelevant for FLOPs
    }
    return static_cast<double>(flops.flops(mask)) / full;
  };

  double min_ratio = achieved(candidates.back());
  if (min_ratio - target_flops_fraction > 0.005) {
    throw config_error("target FLOPs fraction " + std::to_string(target_flops_fraction) +
                       " unreachable; minimum achievable is " + std::to_string(min_ratio));
  }

  // Ratio is non-increasing in the drop fraction: binary search for the first
  // candidate at or below the target, then keep the nearer neighbour.
  std::size_t lo = 0, hi = candidates.size() - 1;
  if (achieved(candidates[lo]) <= target_flops_fraction) {
    return candidates[lo];
  }
  while (lo + 1 < hi) {
    std::size_t mid = (lo + hi) / 2;
    if (achieved(candidates[mid]) <= target_flops_fraction) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  double above = achieved(candidates[lo]);   // > target
  double below = achieved(candidates[hi]);   // <= target, or last candidate
  if (below > target_flops_fraction) return candidates[hi];  // floor case, nearest possible
  double err_above = above - target_flops_fraction;
  double err_below = target_flops_fraction - below;
  return err_above <= err_below ? candidates[lo] : candidates[hi];
}

}  // namespace qzlm
