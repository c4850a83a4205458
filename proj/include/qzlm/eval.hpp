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

// Metrics and measurement: word-level perplexity, recall-at-3, single-token
// latency benchmarking, and the operating-point sweep that emits the data
// behind accuracy-efficiency tradeoff curves.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "qzlm/common.hpp"
#include "qzlm/data.hpp"
#include "qzlm/gates.hpp"
#include "qzlm/model.hpp"
#include "qzlm/pruning.hpp"
#include "qzlm/sru.hpp"
#include "qzlm/train.hpp"

namespace qzlm {

// One operating point's scorecard. Energy is never measured here (no meter);
// the field exists so externally supplied readings can ride along in reports.
struct EvalReport {
  std::string split;
  double perplexity = 0;
  double r_at_3 = 0;
  double flops_fraction = 1.0;
  double ms_per_query = std::numeric_limits<double>::quiet_NaN();
  double energy_mj_per_query = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t tokens_evaluated = 0;
  std::string tag;
};

namespace detail {

// Rank of the true token under "larger logit first, ties to the lower id".
template <typename T>
bool truth_in_top3(std::span<const T> logits, std::int32_t truth) {
  const T truth_logit = logits[static_cast<std::size_t>(truth)];
  std::size_t ahead = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (logits[j] > truth_logit ||
        (logits[j] == truth_logit && j < static_cast<std::size_t>(truth))) {
      if (++ahead >= 3) return false;
    }
  }
  return true;
}

}  // namespace detail

struct PerplexityAndRecall {
  double perplexity;
  double r_at_3;
  std::uint64_t tokens;
};

// One pass over the stream predicting every next token, hidden state carried
// across the whole split. batch_size > 1 splits the stream into contiguous
// lanes with per-lane state (the layout invariance of perplexity is a tested
// property, not an assumption).
template <typename T>
PerplexityAndRecall perplexity_and_recall(const QrnnModel<T>& model, const TokenStream& stream,
                                          std::size_t batch_size = 1) {
  if (stream.size() < 2) {
    throw data_error("perplexity: stream '" + stream.split + "' is too short");
  }
  if (batch_size == 0 || stream.size() / batch_size < 2) {
    throw config_error("perplexity: batch size too large for the stream");
  }
  const std::size_t per_lane = stream.size() / batch_size;
  constexpr std::size_t kChunk = 128;
  double total_ce = 0;
  std::uint64_t hits = 0, predictions = 0;
  for (std::size_t lane = 0; lane < batch_size; ++lane) {
    const std::int32_t* base = stream.ids.data() + lane * per_lane;
    ModelState<T> state = ModelState<T>::initial(model.config);
    for (std::size_t start = 0; start + 1 < per_lane; start += kChunk) {
      std::size_t len = std::min(kChunk, per_lane - 1 - start);
      std::span<const std::int32_t> inputs(base + start, len);
      Matrix<T> logits = forward_with_state(model, inputs, state);
      for (std::size_t t = 0; t < len; ++t) {
        std::int32_t truth = base[start + t + 1];
        if (truth < 0 || static_cast<std::size_t>(truth) >= model.config.vocab_size) {
          throw data_error("perplexity: token id out of range");
        }
        std::vector<T> col = logits.col_vector(t);
        total_ce += static_cast<double>(
            cross_entropy(std::span<const T>(col), static_cast<std::size_t>(truth)));
        if (detail::truth_in_top3(std::span<const T>(col), truth)) ++hits;
        ++predictions;
      }
    }
  }
  PerplexityAndRecall out;
  out.tokens = predictions;
  out.perplexity = std::exp(total_ce / static_cast<double>(predictions));
  out.r_at_3 = static_cast<double>(hits) / static_cast<double>(predictions);
  return out;
}

template <typename T>
double perplexity(const QrnnModel<T>& model, const TokenStream& stream,
                  std::size_t batch_size = 1) {
  return perplexity_and_recall(model, stream, batch_size).perplexity;
}

template <typename T>
double recall_at_3(const QrnnModel<T>& model, const TokenStream& stream) {
  return perplexity_and_recall(model, stream).r_at_3;
}

struct LatencyReport {
  double ms_mean = 0;
  double ms_std = 0;
  std::size_t queries = 0;
  std::size_t warmup = 0;
};

// Wall-clock of single-token step() calls, averaged over `queries` after
// `warmup` discarded iterations, tokens drawn from the given stream. Must run
// single-threaded and alone; the numbers mean nothing under contention.
template <typename T>
LatencyReport bench_latency(const QrnnModel<T>& model, const TokenStream& feed,
                            std::size_t queries = 350, std::size_t warmup = 50) {
  if (feed.ids.empty()) {
    throw data_error("bench: empty token stream");
  }
  if (queries == 0) {
    throw config_error("bench: need at least one query");
  }
  ModelState<T> state = ModelState<T>::initial(model.config);
  std::vector<double> samples;
  samples.reserve(queries);
  const std::size_t total = warmup + queries;
  for (std::size_t q = 0; q < total; ++q) {
    std::int32_t token = feed.ids[q % feed.ids.size()];
    auto t0 = std::chrono::steady_clock::now();
    volatile T sink = step(model, state, token)[0];  // keep the call alive
    (void)sink;
    auto t1 = std::chrono::steady_clock::now();
    if (q >= warmup) {
      samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
  }
  LatencyReport report;
  report.queries = queries;
  report.warmup = warmup;
  double sum = 0;
  for (double s : samples) sum += s;
  report.ms_mean = sum / static_cast<double>(samples.size());
  double var = 0;
  for (double s : samples) var += (s - report.ms_mean) * (s - report.ms_mean);
  report.ms_std = std::sqrt(var / static_cast<double>(samples.size()));
  return report;
}

inline double pearson_r2(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw config_error("pearson_r2: need two equally sized samples of >= 2 points");
  }
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  double cov = sxy - sx * sy / n;
  double vx = sxx - sx * sx / n;
  double vy = syy - sy * sy / n;
  if (vx == 0 || vy == 0) return 0;
  double r = cov / std::sqrt(vx * vy);
  return r * r;
}

// ---------------------------------------------------------------------------
// Operating-point sweep.

struct SweepRow {
  std::string method;
  double target_flops = 1.0;
  double achieved_flops = 1.0;
  double val_ppl = std::numeric_limits<double>::quiet_NaN();
  double test_ppl = std::numeric_limits<double>::quiet_NaN();
  double r_at_3 = std::numeric_limits<double>::quiet_NaN();
  double ms_per_query = std::numeric_limits<double>::quiet_NaN();
  bool sru = false;
  std::uint64_t seed = 0;
  bool flagged = false;       // perplexity above the display ceiling
  std::string error;          // non-empty when the cell failed
};

struct SweepOptions {
  std::vector<std::string> methods;  // random | filter-norm | mean-activation | l0
  std::vector<double> targets;       // FLOPs fractions
  bool with_sru = false;             // adds a +SRU row per pruned cell
  std::uint64_t seed = 0;
  std::size_t bench_queries = 0;     // 0 skips latency measurement
  std::size_t bench_warmup = 50;
  double ppl_ceiling = 100.0;
  std::size_t threads = 1;
  TrainOptions<float> sru_opts;      // steps/lr/batch for per-cell SRU training
};

template <typename T>
struct SweepInputs {
  const QrnnModel<T>* model = nullptr;
  const TokenStream* train = nullptr;
  const TokenStream* valid = nullptr;
  const TokenStream* test = nullptr;
  const ActivationStats* stats = nullptr;                  // for mean-activation
  std::span<const L0OperatingPoint<T>> l0_points;          // for l0
};

namespace detail {

template <typename T>
struct PreparedCell {
  PruneMask mask;
  QrnnModel<T> model;
  double achieved = 1.0;
};

// Builds the pruned model for one (method, target) cell. Target fractions at
// or above 1 short-circuit to the identity operating point for every method,
// so the unpruned row is reproduced bit for bit.
template <typename T>
PreparedCell<T> prepare_cell(const SweepInputs<T>& in, const std::string& method,
                             double target, std::uint64_t seed) {
  const QrnnModel<T>& model = *in.model;
  PreparedCell<T> cell;
  if (target >= 1.0) {
    cell.mask = PruneMask::full(model.config);
    cell.model = model;
    cell.achieved = 1.0;
    return cell;
  }
  if (method == "l0") {
    if (in.l0_points.empty()) {
      throw config_error("l0 sweep cell needs trained gates; run train-gates first");
    }
    const L0OperatingPoint<T>* best = nullptr;
    for (const auto& p : in.l0_points) {
      if (best == nullptr || std::abs(p.discretized.flops_fraction - target) <
                                 std::abs(best->discretized.flops_fraction - target)) {
        best = &p;
      }
    }
    cell.mask = best->discretized.mask;
    cell.model = best->discretized.model;
    cell.achieved = best->discretized.flops_fraction;
    return cell;
  }
  double fraction = solve_operating_point(model.config, target);
  if (method == "random") {
    cell.mask = random_mask(model.config, fraction, seed);
  } else if (method == "filter-norm") {
    cell.mask = filter_norm_mask(model, fraction);
  } else if (method == "mean-activation") {
    if (in.stats == nullptr) {
      throw config_error("mean-activation sweep cell needs activation stats; run collect-stats first");
    }
    cell.mask = mean_activation_mask(model.config, *in.stats, fraction);
  } else {
    throw config_error("unknown pruning method '" + method + "'");
  }
  cell.model = apply_mask(model, cell.mask);
  cell.achieved = FlopsModel(model.config).fraction(cell.mask);
  return cell;
}

}  // namespace detail

// Runs every (method, target) cell: prune, optionally train a rank-1 update,
// evaluate, and (serially, afterwards) bench. The first row is always the
// unpruned baseline. Cells that fail produce an error row and the sweep
// continues.
template <typename T>
std::vector<SweepRow> sweep(const SweepInputs<T>& in, const SweepOptions& options) {
  if (in.model == nullptr || in.train == nullptr || in.valid == nullptr || in.test == nullptr) {
    throw config_error("sweep: model and train/valid/test streams are required");
  }
  struct Cell {
    std::string method;
    double target;
    bool sru;
  };
  std::vector<Cell> cells;
  cells.push_back({"none", 1.0, false});
  for (const std::string& method : options.methods) {
    for (double target : options.targets) {
      cells.push_back({method, target, false});
      if (options.with_sru && target < 1.0) cells.push_back({method, target, true});
    }
  }

  std::vector<SweepRow> rows(cells.size());
  std::vector<std::optional<QrnnModel<T>>> bench_models(cells.size());

  auto run_cell = [&](std::size_t index) {
    const Cell& cell = cells[index];
    SweepRow& row = rows[index];
    row.method = cell.method;
    row.target_flops = cell.target;
    row.sru = cell.sru;
    row.seed = options.seed;
    try {
      std::uint64_t cell_seed = derive_seed(
          options.seed, cell.method + "@" + std::to_string(cell.target));
      detail::PreparedCell<T> prepared =
          detail::prepare_cell(in, cell.method, cell.target, cell_seed);
      row.achieved_flops = prepared.achieved;
      QrnnModel<T> scored = prepared.model;
      if (cell.sru) {
        TrainOptions<T> sru_opts = options.sru_opts;
        sru_opts.seed = derive_seed(cell_seed, "sweep.sru");
        SruUpdate<T> update = train_sru(prepared.model, *in.train, sru_opts,
                                        prepared.mask.sha256(), cell.method,
                                        prepared.achieved);
        scored = apply_sru(prepared.model, update, prepared.mask.sha256());
      }
      PerplexityAndRecall val = perplexity_and_recall(scored, *in.valid);
      PerplexityAndRecall test = perplexity_and_recall(scored, *in.test);
      row.val_ppl = val.perplexity;
      row.test_ppl = test.perplexity;
      row.r_at_3 = test.r_at_3;
      row.flagged = test.perplexity > options.ppl_ceiling;
      if (options.bench_queries > 0) bench_models[index] = std::move(scored);
    } catch (const error& e) {
      row.error = e.what();
    }
    return true;
  };

  if (options.threads <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (std::size_t w = 0; w < options.threads; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1)) {
          run_cell(i);
        }
      });
    }
    for (auto& t : pool) t.join();
  }

  // Latency runs serialized after everything else; timing under a worker pool
  // would be garbage.
  if (options.bench_queries > 0) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (!bench_models[i].has_value() || !rows[i].error.empty()) continue;
      LatencyReport lat = bench_latency(*bench_models[i], *in.test, options.bench_queries,
                                        options.bench_warmup);
      rows[i].ms_per_query = lat.ms_mean;
      bench_models[i].reset();
    }
  }
  return rows;
}

inline std::string sweep_csv_header() {
  return "method,target_flops,achieved_flops,val_ppl,test_ppl,r_at_3,ms_per_query,sru,seed";
}

namespace detail {

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace detail

inline std::string sweep_row_csv(const SweepRow& row) {
  std::string out;
  out += row.method;
  out += ',' + detail::format_double(row.target_flops);
  out += ',' + detail::format_double(row.achieved_flops);
  out += ',' + detail::format_double(row.val_ppl);
  out += ',' + detail::format_double(row.test_ppl);
  out += ',' + detail::format_double(row.r_at_3);
  out += ',' + detail::format_double(row.ms_per_query);
  out += ',' + std::string(row.sru ? "1" : "0");
  out += ',' + std::to_string(row.seed);
  return out;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows,
                            const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write sweep CSV " + path.string());
  out << sweep_csv_header() << '\n';
  for (const SweepRow& row : rows) out << sweep_row_csv(row) << '\n';
}

inline void write_sweep_json(const std::vector<SweepRow>& rows,
                             const std::filesystem::path& path) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::array();
  auto number_or_null = [](double v) {
    return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v);
  };
  for (const SweepRow& row : rows) {
    nlohmann::ordered_json j;
    j["method"] = row.method;
    j["target_flops"] = row.target_flops;
    j["achieved_flops"] = row.achieved_flops;
    j["val_ppl"] = number_or_null(row.val_ppl);
    j["test_ppl"] = number_or_null(row.test_ppl);
    j["r_at_3"] = number_or_null(row.r_at_3);
    j["ms_per_query"] = number_or_null(row.ms_per_query);
    j["sru"] = row.sru;
    j["seed"] = row.seed;
    j["flagged"] = row.flagged;
    if (!row.error.empty()) j["error"] = row.error;
    doc.push_back(std::move(j));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write sweep JSON " + path.string());
  out << doc.dump(2) << '\n';
}

}  // namespace qzlm
