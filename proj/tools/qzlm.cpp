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

// qzlm: train, prune, recover and measure QRNN language models.
//
// The pipeline mirrors the library modules: make-corpus -> train-baseline ->
// collect-stats / train-gates -> prune -> train-sru -> eval / bench / sweep.
// Every command is deterministic given its flags and seed (bench timing
// excepted) and writes a reproducibility stamp beside its outputs.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qzlm/qzlm.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace qzlm;

namespace {

// Exit classes: 0 success, 2 configuration error, 3 data error, 4 numeric
// divergence, 1 anything else.
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

fs::path sibling_vocab(const fs::path& model_path) {
  fs::path p = model_path;
  p.replace_extension(".vocab");
  return p;
}

std::string file_sha256(const fs::path& path) {
  std::string bytes = read_text_file(path);
  return detail::sha256_hex(bytes.data(), bytes.size());
}

void write_stamp(const fs::path& out_path, const std::string& command,
                 const ordered_json& params) {
  ordered_json stamp;
  stamp["command"] = command;
  stamp["qzlm_version"] = kVersion;
  stamp["checkpoint_format_version"] = kCheckpointVersion;
  stamp["params"] = params;
  fs::path path = out_path;
  path += ".stamp.json";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write stamp " + path.string());
  out << stamp.dump(2) << '\n';
}

struct CorpusBundle {
  Vocab vocab;
  std::string vocab_sha;
  TokenStream train, valid, test;
};

CorpusBundle load_corpus(const fs::path& dir, const fs::path& vocab_path,
                         const std::optional<std::string>& expected_sha) {
  if (!fs::exists(vocab_path)) {
    throw data_error("vocab file " + vocab_path.string() +
                     " not found; pass --vocab or keep it beside the checkpoint");
  }
  CorpusBundle bundle;
  bundle.vocab = Vocab::load(vocab_path);
  bundle.vocab_sha = file_sha256(vocab_path);
  if (expected_sha.has_value() && *expected_sha != bundle.vocab_sha) {
    throw data_error("vocab file " + vocab_path.string() +
                     " does not match the checkpoint (sha " + bundle.vocab_sha +
                     " vs expected " + *expected_sha + ")");
  }
  CorpusText text = CorpusText::load(dir);
  bundle.train = encode(text.train, bundle.vocab, "train");
  bundle.valid = encode(text.valid, bundle.vocab, "valid");
  bundle.test = encode(text.test, bundle.vocab, "test");
  return bundle;
}

const TokenStream& pick_split(const CorpusBundle& bundle, const std::string& split) {
  if (split == "valid") return bundle.valid;
  if (split == "test") return bundle.test;
  throw config_error("unknown split '" + split + "' (use valid or test)");
}

HardConcreteGates<float> gates_from_stored(const StoredGates& stored) {
  HardConcreteGates<float> gates;
  gates.lambda = stored.lambda;
  gates.log_alpha = stored.log_alpha;
  return gates;
}

// ----------------------------------------------------------------------------
// Command options.

struct MakeCorpusArgs {
  std::string out;
  SyntheticCorpusOptions options;
};

struct TrainBaselineArgs {
  std::string corpus, out, vocab_out;
  std::size_t vocab_cap = 10000;
  std::size_t embed = 64;
  std::vector<std::size_t> hidden{64, 64};
  std::vector<std::size_t> window{2, 1};
  std::size_t steps = 2000;
  double lr = 2e-3;
  std::size_t batch = 16, bptt = 35;
  double clip = 0.25;
  std::uint64_t seed = 1;
  std::size_t log_every = 100, eval_every = 500;
};

struct CollectStatsArgs {
  std::string model, corpus, vocab, out;
  std::size_t max_tokens = 0;
};

struct PruneArgs {
  std::string model, method, out, stats_file, gates_tag;
  double target = 0.8;
  std::uint64_t seed = 0;
};

struct TrainGatesArgs {
  std::string model, corpus, vocab, out, tag;
  double lambda = 5.5e-4;
  std::size_t steps = 5000;
  double lr = 5e-3;
  std::size_t batch = 16, bptt = 35;
  std::uint64_t seed = 1;
  std::size_t log_every = 200;
};

struct TrainSruArgs {
  std::string model, corpus, vocab, out, tag;
  std::size_t steps = 2000;
  double lr = 5e-3;
  std::size_t batch = 16, bptt = 35;
  std::uint64_t seed = 1;
  std::size_t width = 4;
  std::size_t log_every = 200;
};

struct EvalArgs {
  std::string model, corpus, vocab, split = "valid", sru_tag;
  bool use_sru = false;
  bool json = false;
};

struct BenchArgs {
  std::string model, corpus, vocab, split = "test", sru_tag;
  bool use_sru = false;
  std::size_t queries = 350, warmup = 50;
};

struct SweepArgs {
  std::string model, corpus, vocab, out, json_out;
  std::vector<std::string> methods{"random", "filter-norm", "mean-activation"};
  std::vector<double> targets{0.8, 0.6};
  bool with_sru = false;
  std::uint64_t seed = 1;
  std::size_t bench_queries = 350, warmup = 50;
  double ppl_ceiling = 100.0;
  std::size_t threads = 1;
  std::vector<double> l0_lambdas;
  std::size_t l0_steps = 800;
  double l0_lr = 5e-3;
  std::size_t sru_steps = 500;
  double sru_lr = 5e-3;
  std::size_t batch = 16, bptt = 35;
};

// ----------------------------------------------------------------------------
// Command runners.

int run_make_corpus(const MakeCorpusArgs& args) {
  write_synthetic_corpus(args.out, args.options);
  ordered_json params{{"out", args.out},
                      {"vocab", args.options.vocab},
                      {"train_tokens", args.options.train_tokens},
                      {"valid_tokens", args.options.valid_tokens},
                      {"test_tokens", args.options.test_tokens},
                      {"branch", args.options.branch},
                      {"seed", args.options.seed}};
  write_stamp(fs::path(args.out) / "corpus", "make-corpus", params);
  std::printf("wrote synthetic corpus to %s (vocab %zu, %zu/%zu/%zu tokens)\n",
              args.out.c_str(), args.options.vocab, args.options.train_tokens,
              args.options.valid_tokens, args.options.test_tokens);
  return 0;
}

int run_train_baseline(const TrainBaselineArgs& args) {
  CorpusText text = CorpusText::load(args.corpus);
  Vocab vocab = Vocab::build(text.train, args.vocab_cap);
  fs::path vocab_path = args.vocab_out.empty() ? sibling_vocab(args.out) : fs::path(args.vocab_out);
  vocab.save(vocab_path);
  std::string vocab_sha = file_sha256(vocab_path);

  TokenStream train = encode(text.train, vocab, "train");
  TokenStream valid = encode(text.valid, vocab, "valid");
  TokenStream test = encode(text.test, vocab, "test");
  std::printf("vocab %zu tokens; train/valid/test %zu/%zu/%zu ids; OOV rate valid %.2f%% test %.2f%%\n",
              vocab.size(), train.size(), valid.size(), test.size(),
              100.0 * oov_rate(text.valid, vocab), 100.0 * oov_rate(text.test, vocab));

  ModelConfig config;
  config.vocab_size = vocab.size();
  config.embed_dim = args.embed;
  config.hidden_sizes = args.hidden;
  config.window_sizes = args.window;
  config.validate();

  Rng init(derive_seed(args.seed, "init"));
  QrnnModel<float> model = QrnnModel<float>::random_init(config, init, 0.1f);

  TrainOptions<float> opts;
  opts.steps = args.steps;
  opts.batch_size = args.batch;
  opts.bptt_len = args.bptt;
  opts.lr = static_cast<float>(args.lr);
  opts.clip_norm = args.clip;
  opts.seed = args.seed;
  opts.log_every = args.log_every;
  opts.logger = [](std::size_t step, double loss) {
    std::printf("[step %zu] train loss %.4f\n", step, loss);
  };
  opts.eval_every = args.eval_every;
  opts.on_eval = [&](std::size_t step) {
    std::printf("[step %zu] validation perplexity %.3f\n", step,
                perplexity(model, valid));
  };
  train_baseline(model, train, opts);

  Checkpoint ckpt;
  ckpt.model = std::move(model);
  ckpt.mask = PruneMask::full(config);
  ckpt.flops_fraction = 1.0;
  ckpt.base_flops_per_token = flops_per_token(config);
  ckpt.vocab_sha256 = vocab_sha;
  save_checkpoint(args.out, ckpt);

  ordered_json params{{"corpus", args.corpus}, {"vocab_cap", args.vocab_cap},
                      {"embed", args.embed},   {"hidden", args.hidden},
                      {"window", args.window}, {"steps", args.steps},
                      {"lr", args.lr},         {"batch", args.batch},
                      {"bptt", args.bptt},     {"clip", args.clip},
                      {"seed", args.seed},     {"vocab_file", vocab_path.string()}};
  write_stamp(args.out, "train-baseline", params);

  std::printf("final validation perplexity %.3f; FLOPs/token %" PRIu64 "\n",
              perplexity(ckpt.model, valid), ckpt.base_flops_per_token);
  std::printf("wrote %s and %s\n", args.out.c_str(), vocab_path.string().c_str());
  return 0;
}

int run_collect_stats(const CollectStatsArgs& args) {
  Checkpoint ckpt = load_checkpoint(args.model);
  fs::path vocab_path = args.vocab.empty() ? sibling_vocab(args.model) : fs::path(args.vocab);
  CorpusBundle corpus = load_corpus(args.corpus, vocab_path, ckpt.vocab_sha256);
  ckpt.stats = collect_activation_stats(ckpt.model, corpus.train, args.max_tokens);
  save_checkpoint(args.out, ckpt);
  ordered_json params{{"model", args.model},
                      {"corpus", args.corpus},
                      {"max_tokens", args.max_tokens}};
  write_stamp(args.out, "collect-stats", params);
  std::printf("collected activation stats over %" PRIu64 " tokens; wrote %s\n",
              ckpt.stats->tokens, args.out.c_str());
  return 0;
}

int run_prune(const PruneArgs& args) {
  Checkpoint ckpt = load_checkpoint(args.model);
  const ModelConfig& config = ckpt.model.config;
  FlopsModel flops(config);

  Checkpoint out;
  out.vocab_sha256 = ckpt.vocab_sha256;
  out.base_flops_per_token = ckpt.base_flops_per_token != 0
                                 ? ckpt.base_flops_per_token
                                 : flops.flops_full();

  if (args.method == "l0") {
    const StoredGates* stored = nullptr;
    if (!args.gates_tag.empty()) {
      stored = ckpt.find_gates(args.gates_tag);
    } else if (ckpt.gates.size() == 1) {
      stored = &ckpt.gates.front();
    }
    if (stored == nullptr) {
      std::string tags;
      for (const auto& g : ckpt.gates) tags += " " + g.tag;
      throw config_error("l0 pruning needs trained gates" +
                         (ckpt.gates.empty()
                              ? std::string("; run train-gates first")
                              : "; pick one of:" + tags));
    }
    HardConcreteGates<float> gates = gates_from_stored(*stored);
    DiscretizedGates<float> disc = gates_to_mask_and_scale(ckpt.model, gates);
    out.model = std::move(disc.model);
    out.mask = disc.mask;
    out.tag = "l0@" + stored->tag;
    out.flops_fraction = disc.flops_fraction;
  } else {
    double fraction = solve_operating_point(config, args.target);
    PruneMask mask;
    if (args.method == "random") {
      mask = random_mask(config, fraction, derive_seed(args.seed, "mask"));
    } else if (args.method == "filter-norm") {
      mask = filter_norm_mask(ckpt.model, fraction);
    } else if (args.method == "mean-activation") {
      const ActivationStats* stats = nullptr;
      Checkpoint stats_ckpt;
      if (!args.stats_file.empty()) {
        stats_ckpt = load_checkpoint(args.stats_file);
        if (stats_ckpt.stats.has_value()) stats = &*stats_ckpt.stats;
      } else if (ckpt.stats.has_value()) {
        stats = &*ckpt.stats;
      }
      if (stats == nullptr) {
        throw config_error("mean-activation pruning needs activation stats; run collect-stats first");
      }
      mask = mean_activation_mask(config, *stats, fraction);
    } else {
      throw config_error("unknown method '" + args.method +
                         "' (random | filter-norm | mean-activation | l0)");
    }
    out.model = apply_mask(ckpt.model, mask);
    out.mask = mask;
    char tag[64];
    std::snprintf(tag, sizeof tag, "%s@%.3f", args.method.c_str(), args.target);
    out.tag = tag;
    out.flops_fraction = flops.fraction(mask);
  }

  save_checkpoint(args.out, out);
  ordered_json params{{"model", args.model},   {"method", args.method},
                      {"target_flops", args.target}, {"seed", args.seed},
                      {"gates_tag", args.gates_tag}};
  write_stamp(args.out, "prune", params);
  std::printf("achieved FLOPs fraction %.4f (%" PRIu64 " of %" PRIu64 " FLOPs/token); wrote %s\n",
              out.flops_fraction,
              FlopsModel(out.model.config).flops_full(),
              out.base_flops_per_token, args.out.c_str());
  return 0;
}

int run_train_gates(const TrainGatesArgs& args) {
  Checkpoint ckpt = load_checkpoint(args.model);
  fs::path vocab_path = args.vocab.empty() ? sibling_vocab(args.model) : fs::path(args.vocab);
  CorpusBundle corpus = load_corpus(args.corpus, vocab_path, ckpt.vocab_sha256);

  const std::string frozen = weights_sha256(ckpt.model);
  TrainOptions<float> opts;
  opts.steps = args.steps;
  opts.batch_size = args.batch;
  opts.bptt_len = args.bptt;
  opts.lr = static_cast<float>(args.lr);
  opts.clip_norm = 0;  // plain Adam on the mask parameters
  opts.seed = args.seed;
  opts.log_every = args.log_every;
  opts.logger = [](std::size_t step, double loss) {
    std::printf("[step %zu] objective %.4f\n", step, loss);
  };
  HardConcreteGates<float> gates =
      train_gates(ckpt.model, corpus.train, static_cast<float>(args.lambda), opts);
  if (weights_sha256(ckpt.model) != frozen) {
    throw numeric_error("internal: base weights changed during gate training");
  }

  std::string tag = args.tag;
  if (tag.empty()) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "lambda%.3g", args.lambda);
    tag = buf;
  }
  if (ckpt.find_gates(tag) != nullptr) {
    throw config_error("gates tag '" + tag + "' already present in " + args.model);
  }
  StoredGates stored;
  stored.tag = tag;
  stored.lambda = static_cast<float>(args.lambda);
  stored.log_alpha = gates.log_alpha;
  ckpt.gates.push_back(std::move(stored));
  save_checkpoint(args.out, ckpt);

  DiscretizedGates<float> preview = gates_to_mask_and_scale(ckpt.model, gates);
  std::size_t open = 0;
  for (const auto& k : preview.mask.kept) open += k.size();
  ordered_json params{{"model", args.model}, {"corpus", args.corpus},
                      {"lambda", args.lambda}, {"steps", args.steps},
                      {"lr", args.lr},       {"batch", args.batch},
                      {"bptt", args.bptt},   {"seed", args.seed},
                      {"tag", tag}};
  write_stamp(args.out, "train-gates", params);
  std::printf("gates '%s': discretized FLOPs fraction %.4f (%zu filters kept); wrote %s\n",
              tag.c_str(), preview.flops_fraction, open, args.out.c_str());
  return 0;
}

int run_train_sru(const TrainSruArgs& args) {
  Checkpoint ckpt = load_checkpoint(args.model);
  fs::path vocab_path = args.vocab.empty() ? sibling_vocab(args.model) : fs::path(args.vocab);
  CorpusBundle corpus = load_corpus(args.corpus, vocab_path, ckpt.vocab_sha256);

  const std::string frozen = weights_sha256(ckpt.model);
  TrainOptions<float> opts;
  opts.steps = args.steps;
  opts.batch_size = args.batch;
  opts.bptt_len = args.bptt;
  opts.lr = static_cast<float>(args.lr);
  opts.seed = args.seed;
  opts.log_every = args.log_every;
  opts.logger = [](std::size_t step, double loss) {
    std::printf("[step %zu] train loss %.4f\n", step, loss);
  };
  std::string tag = args.tag.empty() ? (ckpt.tag.empty() ? "sru" : ckpt.tag) : args.tag;
  SruUpdate<float> update = train_sru(ckpt.model, corpus.train, opts, ckpt.mask.sha256(),
                                      tag, ckpt.flops_fraction);
  if (weights_sha256(ckpt.model) != frozen) {
    throw numeric_error("internal: base weights changed during rank-1 training");
  }
  if (ckpt.find_sru(tag) != nullptr) {
    throw config_error("sru tag '" + tag + "' already present in " + args.model);
  }
  ckpt.sru.push_back({update, args.width});
  save_checkpoint(args.out, ckpt);

  ordered_json params{{"model", args.model}, {"corpus", args.corpus},
                      {"steps", args.steps}, {"lr", args.lr},
                      {"batch", args.batch}, {"bptt", args.bptt},
                      {"seed", args.seed},   {"tag", tag},
                      {"width", args.width}};
  write_stamp(args.out, "train-sru", params);
  std::printf("rank-1 update '%s': %" PRIu64 " bytes at width %zu; wrote %s\n", tag.c_str(),
              sru_storage_bytes(update, args.width), args.width, args.out.c_str());
  return 0;
}

// Returns the model with the requested rank-1 update applied (or untouched).
QrnnModel<float> resolve_model(const Checkpoint& ckpt, bool use_sru,
                               const std::string& sru_tag) {
  if (!use_sru) return ckpt.model;
  const StoredSru* block = nullptr;
  if (!sru_tag.empty()) {
    block = ckpt.find_sru(sru_tag);
  } else if (ckpt.sru.size() == 1) {
    block = &ckpt.sru.front();
  }
  if (block == nullptr) {
    std::string tags;
    for (const auto& s : ckpt.sru) tags += " " + s.update.tag;
    throw config_error(ckpt.sru.empty()
                           ? "checkpoint has no rank-1 update; run train-sru first"
                           : "pick an sru tag with --sru-tag; available:" + tags);
  }
  return apply_sru(ckpt.model, block->update, ckpt.mask.sha256());
}

int run_eval(const EvalArgs& args) {
  Checkpoint ckpt = load_checkpoint(args.model);
  fs::path vocab_path = args.vocab.empty() ? sibling_vocab(args.model) : fs::path(args.vocab);
  CorpusBundle corpus = load_corpus(args.corpus, vocab_path, ckpt.vocab_sha256);
  QrnnModel<float> model = resolve_model(ckpt, args.use_sru, args.sru_tag);
  const TokenStream& stream = pick_split(corpus, args.split);

  PerplexityAndRecall pr = perplexity_and_recall(model, stream);
  EvalReport report;
  report.split = args.split;
  report.perplexity = pr.perplexity;
  report.r_at_3 = pr.r_at_3;
  report.flops_fraction = ckpt.flops_fraction;
  report.tokens_evaluated = pr.tokens;
  report.tag = ckpt.tag;

  if (args.json) {
    ordered_json j{{"split", report.split},
                   {"perplexity", report.perplexity},
                   {"r_at_3", report.r_at_3},
                   {"flops_fraction", report.flops_fraction},
                   {"flops_per_token", FlopsModel(model.config).flops_full()},
                   {"tokens", report.tokens_evaluated},
                   {"tag", report.tag},
                   {"sru", args.use_sru}};
    std::printf("%s\n", j.dump(2).c_str());
  } else {
    std::printf("split %s: perplexity %.6f, R@3 %.4f, FLOPs fraction %.4f, tokens %" PRIu64 "%s\n",
                report.split.c_str(), report.perplexity, report.r_at_3,
                report.flops_fraction, report.tokens_evaluated,
                args.use_sru ? " (with rank-1 update)" : "");
  }
  return 0;
}

int run_bench(const BenchArgs& args) {
  Checkpoint ckpt = load_checkpoint(args.model);
  fs::path vocab_path = args.vocab.empty() ? sibling_vocab(args.model) : fs::path(args.vocab);
  CorpusBundle corpus = load_corpus(args.corpus, vocab_path, ckpt.vocab_sha256);
  QrnnModel<float> model = resolve_model(ckpt, args.use_sru, args.sru_tag);
  const TokenStream& stream = pick_split(corpus, args.split);

  LatencyReport lat = bench_latency(model, stream, args.queries, args.warmup);
  std::printf("queries %zu (warmup %zu): %.4f ms/q mean, %.4f ms std, "
              "%" PRIu64 " FLOPs/token (fraction %.4f)\n",
              lat.queries, lat.warmup, lat.ms_mean, lat.ms_std,
              FlopsModel(model.config).flops_full(), ckpt.flops_fraction);
  return 0;
}

int run_sweep(const SweepArgs& args) {
  Checkpoint ckpt = load_checkpoint(args.model);
  fs::path vocab_path = args.vocab.empty() ? sibling_vocab(args.model) : fs::path(args.vocab);
  CorpusBundle corpus = load_corpus(args.corpus, vocab_path, ckpt.vocab_sha256);

  bool want_l0 = false, want_stats = false;
  for (const std::string& m : args.methods) {
    want_l0 |= m == "l0";
    want_stats |= m == "mean-activation";
  }

  ActivationStats stats;
  bool have_stats = false;
  if (want_stats) {
    if (ckpt.stats.has_value()) {
      stats = *ckpt.stats;
      have_stats = true;
    } else {
      std::fprintf(stderr, "collecting activation stats (checkpoint has none)...\n");
      stats = collect_activation_stats(ckpt.model, corpus.train);
      have_stats = true;
    }
  }

  std::vector<L0OperatingPoint<float>> l0_points;
  if (want_l0) {
    for (const StoredGates& stored : ckpt.gates) {
      HardConcreteGates<float> gates = gates_from_stored(stored);
      try {
        DiscretizedGates<float> disc = gates_to_mask_and_scale(ckpt.model, gates);
        l0_points.push_back({stored.lambda, std::move(gates), std::move(disc)});
      } catch (const error& e) {
        std::fprintf(stderr, "skipping stored gates '%s': %s\n", stored.tag.c_str(), e.what());
      }
    }
    if (!args.l0_lambdas.empty()) {
      TrainOptions<float> gate_opts;
      gate_opts.steps = args.l0_steps;
      gate_opts.batch_size = args.batch;
      gate_opts.bptt_len = args.bptt;
      gate_opts.lr = static_cast<float>(args.l0_lr);
      gate_opts.clip_norm = 0;
      gate_opts.seed = derive_seed(args.seed, "sweep.gates");
      std::vector<float> lambdas(args.l0_lambdas.begin(), args.l0_lambdas.end());
      auto trained = lambda_sweep<float>(
          ckpt.model, corpus.train, std::span<const float>(lambdas), gate_opts,
          [](float lambda, const std::string& reason) {
            std::fprintf(stderr, "lambda %g produced no usable mask: %s\n",
                         static_cast<double>(lambda), reason.c_str());
          });
      for (auto& p : trained) {
        std::fprintf(stderr, "lambda %g -> FLOPs fraction %.4f\n",
                     static_cast<double>(p.lambda), p.discretized.flops_fraction);
        l0_points.push_back(std::move(p));
      }
    }
  }

  SweepInputs<float> inputs;
  inputs.model = &ckpt.model;
  inputs.train = &corpus.train;
  inputs.valid = &corpus.valid;
  inputs.test = &corpus.test;
  inputs.stats = have_stats ? &stats : nullptr;
  inputs.l0_points = l0_points;

  SweepOptions options;
  options.methods = args.methods;
  options.targets = args.targets;
  options.with_sru = args.with_sru;
  options.seed = args.seed;
  options.bench_queries = args.bench_queries;
  options.bench_warmup = args.warmup;
  options.ppl_ceiling = args.ppl_ceiling;
  options.threads = args.threads;
  options.sru_opts.steps = args.sru_steps;
  options.sru_opts.batch_size = args.batch;
  options.sru_opts.bptt_len = args.bptt;
  options.sru_opts.lr = static_cast<float>(args.sru_lr);

  std::vector<SweepRow> rows = sweep(inputs, options);
  write_sweep_csv(rows, args.out);
  if (!args.json_out.empty()) write_sweep_json(rows, args.json_out);

  ordered_json params{{"model", args.model},     {"corpus", args.corpus},
                      {"methods", args.methods}, {"targets", args.targets},
                      {"sru", args.with_sru},    {"seed", args.seed},
                      {"bench_queries", args.bench_queries},
                      {"l0_lambdas", args.l0_lambdas}};
  write_stamp(args.out, "sweep", params);

  std::printf("%-16s %7s %9s %10s %10s %7s %10s %4s\n", "method", "target", "achieved",
              "val_ppl", "test_ppl", "R@3", "ms/q", "sru");
  for (const SweepRow& row : rows) {
    if (!row.error.empty()) {
      std::printf("%-16s %7.3f %9s error: %s\n", row.method.c_str(), row.target_flops, "-",
                  row.error.c_str());
      continue;
    }
    std::printf("%-16s %7.3f %9.4f %10.3f %10.3f %7.4f %10.4f %4s%s\n", row.method.c_str(),
                row.target_flops, row.achieved_flops, row.val_ppl, row.test_ppl, row.r_at_3,
                row.ms_per_query, row.sru ? "yes" : "no",
                row.flagged ? "  [above ppl ceiling]" : "");
  }
  std::printf("wrote %s\n", args.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"QRNN language models with an inference-time accuracy-efficiency knob"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Read options from a TOML/INI file (flags win)");

  MakeCorpusArgs mc;
  auto* cmd_mc = app.add_subcommand("make-corpus", "Generate the synthetic desk-scale corpus");
  cmd_mc->add_option("--out", mc.out, "Output directory")->required();
  cmd_mc->add_option("--vocab", mc.options.vocab, "Vocabulary size");
  cmd_mc->add_option("--train-tokens", mc.options.train_tokens, "Training tokens");
  cmd_mc->add_option("--valid-tokens", mc.options.valid_tokens, "Validation tokens");
  cmd_mc->add_option("--test-tokens", mc.options.test_tokens, "Test tokens");
  cmd_mc->add_option("--branch", mc.options.branch, "Successors per context");
  cmd_mc->add_option("--seed", mc.options.seed, "Seed");

  TrainBaselineArgs tb;
  auto* cmd_tb = app.add_subcommand("train-baseline", "Train a desk-scale QRNN from scratch");
  cmd_tb->add_option("--corpus", tb.corpus, "Corpus directory")->required();
  cmd_tb->add_option("--out", tb.out, "Output checkpoint (.qz)")->required();
  cmd_tb->add_option("--vocab-out", tb.vocab_out, "Vocab file (default: <out>.vocab)");
  cmd_tb->add_option("--vocab-cap", tb.vocab_cap, "Vocabulary cap");
  cmd_tb->add_option("--embed", tb.embed, "Embedding width");
  cmd_tb->add_option("--hidden", tb.hidden, "Hidden sizes per layer")->delimiter(',');
  cmd_tb->add_option("--window", tb.window, "Window sizes per layer")->delimiter(',');
  cmd_tb->add_option("--steps", tb.steps, "Adam steps");
  cmd_tb->add_option("--lr", tb.lr, "Learning rate");
  cmd_tb->add_option("--batch", tb.batch, "Batch size");
  cmd_tb->add_option("--bptt", tb.bptt, "BPTT length");
  cmd_tb->add_option("--clip", tb.clip, "Gradient clip (global norm, 0 disables)");
  cmd_tb->add_option("--seed", tb.seed, "Seed");
  cmd_tb->add_option("--log-every", tb.log_every, "Loss log cadence (0 off)");
  cmd_tb->add_option("--eval-every", tb.eval_every, "Validation perplexity cadence (0 off)");

  CollectStatsArgs cs;
  auto* cmd_cs = app.add_subcommand("collect-stats", "Collect mean-activation statistics");
  cmd_cs->add_option("--model", cs.model, "Input checkpoint")->required();
  cmd_cs->add_option("--corpus", cs.corpus, "Corpus directory")->required();
  cmd_cs->add_option("--vocab", cs.vocab, "Vocab file (default: beside the model)");
  cmd_cs->add_option("--max-tokens", cs.max_tokens, "First N train tokens (0 = all)");
  cmd_cs->add_option("--out", cs.out, "Output checkpoint")->required();

  PruneArgs pr;
  auto* cmd_pr = app.add_subcommand("prune", "Prune to a FLOPs operating point");
  cmd_pr->add_option("--model", pr.model, "Input checkpoint")->required();
  cmd_pr->add_option("--method", pr.method, "random | filter-norm | mean-activation | l0")
      ->required();
  cmd_pr->add_option("--target-flops", pr.target, "Target FLOPs fraction in (0, 1]");
  cmd_pr->add_option("--seed", pr.seed, "Seed (random method)");
  cmd_pr->add_option("--stats", pr.stats_file, "Checkpoint holding activation stats");
  cmd_pr->add_option("--gates", pr.gates_tag, "Gates tag (l0 method)");
  cmd_pr->add_option("--out", pr.out, "Output checkpoint")->required();

  TrainGatesArgs tg;
  auto* cmd_tg = app.add_subcommand("train-gates", "Train hard concrete mask parameters");
  cmd_tg->add_option("--model", tg.model, "Input checkpoint")->required();
  cmd_tg->add_option("--corpus", tg.corpus, "Corpus directory")->required();
  cmd_tg->add_option("--vocab", tg.vocab, "Vocab file (default: beside the model)");
  cmd_tg->add_option("--lambda", tg.lambda, "Penalty weight")->required();
  cmd_tg->add_option("--steps", tg.steps, "Adam steps");
  cmd_tg->add_option("--lr", tg.lr, "Learning rate");
  cmd_tg->add_option("--batch", tg.batch, "Batch size");
  cmd_tg->add_option("--bptt", tg.bptt, "BPTT length");
  cmd_tg->add_option("--seed", tg.seed, "Seed");
  cmd_tg->add_option("--tag", tg.tag, "Operating-point tag (default: lambda<value>)");
  cmd_tg->add_option("--log-every", tg.log_every, "Objective log cadence");
  cmd_tg->add_option("--out", tg.out, "Output checkpoint")->required();

  TrainSruArgs ts;
  auto* cmd_ts = app.add_subcommand("train-sru", "Train a rank-1 recovery update");
  cmd_ts->add_option("--model", ts.model, "Pruned checkpoint")->required();
  cmd_ts->add_option("--corpus", ts.corpus, "Corpus directory")->required();
  cmd_ts->add_option("--vocab", ts.vocab, "Vocab file (default: beside the model)");
  cmd_ts->add_option("--steps", ts.steps, "Adam steps");
  cmd_ts->add_option("--lr", ts.lr, "Learning rate");
  cmd_ts->add_option("--batch", ts.batch, "Batch size");
  cmd_ts->add_option("--bptt", ts.bptt, "BPTT length");
  cmd_ts->add_option("--seed", ts.seed, "Seed");
  cmd_ts->add_option("--tag", ts.tag, "Tag (default: the checkpoint's operating point)");
  cmd_ts->add_option("--width", ts.width, "Stored element width: 4 or 2 bytes")
      ->check(CLI::IsMember({2, 4}));
  cmd_ts->add_option("--log-every", ts.log_every, "Loss log cadence");
  cmd_ts->add_option("--out", ts.out, "Output checkpoint")->required();

  EvalArgs ev;
  auto* cmd_ev = app.add_subcommand("eval", "Perplexity, R@3 and FLOPs for one checkpoint");
  cmd_ev->add_option("--model", ev.model, "Checkpoint")->required();
  cmd_ev->add_option("--corpus", ev.corpus, "Corpus directory")->required();
  cmd_ev->add_option("--vocab", ev.vocab, "Vocab file (default: beside the model)");
  cmd_ev->add_option("--split", ev.split, "valid | test");
  cmd_ev->add_flag("--sru", ev.use_sru, "Apply the stored rank-1 update");
  cmd_ev->add_option("--sru-tag", ev.sru_tag, "Which update to apply");
  cmd_ev->add_flag("--json", ev.json, "Emit JSON instead of text");

  BenchArgs be;
  auto* cmd_be = app.add_subcommand("bench", "Single-token latency benchmark");
  cmd_be->add_option("--model", be.model, "Checkpoint")->required();
  cmd_be->add_option("--corpus", be.corpus, "Corpus directory")->required();
  cmd_be->add_option("--vocab", be.vocab, "Vocab file (default: beside the model)");
  cmd_be->add_option("--split", be.split, "Token source split");
  cmd_be->add_option("--queries", be.queries, "Timed queries");
  cmd_be->add_option("--warmup", be.warmup, "Discarded warmup queries");
  cmd_be->add_flag("--sru", be.use_sru, "Apply the stored rank-1 update");
  cmd_be->add_option("--sru-tag", be.sru_tag, "Which update to apply");

  SweepArgs sw;
  auto* cmd_sw = app.add_subcommand("sweep", "Evaluate methods across FLOPs targets");
  cmd_sw->add_option("--model", sw.model, "Base checkpoint")->required();
  cmd_sw->add_option("--corpus", sw.corpus, "Corpus directory")->required();
  cmd_sw->add_option("--vocab", sw.vocab, "Vocab file (default: beside the model)");
  cmd_sw->add_option("--methods", sw.methods, "Methods to sweep")->delimiter(',');
  cmd_sw->add_option("--targets", sw.targets, "FLOPs fractions")->delimiter(',');
  cmd_sw->add_flag("--sru", sw.with_sru, "Also train and score a rank-1 update per cell");
  cmd_sw->add_option("--seed", sw.seed, "Seed");
  cmd_sw->add_option("--bench-queries", sw.bench_queries, "Latency queries per cell (0 off)");
  cmd_sw->add_option("--warmup", sw.warmup, "Latency warmup per cell");
  cmd_sw->add_option("--ppl-ceiling", sw.ppl_ceiling, "Flag rows above this perplexity");
  cmd_sw->add_option("--threads", sw.threads, "Worker threads for non-bench cells");
  cmd_sw->add_option("--l0-lambdas", sw.l0_lambdas, "Train gates at these penalty weights")
      ->delimiter(',');
  cmd_sw->add_option("--l0-steps", sw.l0_steps, "Gate training steps per lambda");
  cmd_sw->add_option("--l0-lr", sw.l0_lr, "Gate training learning rate");
  cmd_sw->add_option("--sru-steps", sw.sru_steps, "Rank-1 training steps per cell");
  cmd_sw->add_option("--sru-lr", sw.sru_lr, "Rank-1 training learning rate");
  cmd_sw->add_option("--batch", sw.batch, "Training batch size");
  cmd_sw->add_option("--bptt", sw.bptt, "Training BPTT length");
  cmd_sw->add_option("--out", sw.out, "Output CSV")->required();
  cmd_sw->add_option("--json", sw.json_out, "Also write JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (cmd_mc->parsed()) return run_make_corpus(mc);
    if (cmd_tb->parsed()) return run_train_baseline(tb);
    if (cmd_cs->parsed()) return run_collect_stats(cs);
    if (cmd_pr->parsed()) return run_prune(pr);
    if (cmd_tg->parsed()) return run_train_gates(tg);
    if (cmd_ts->parsed()) return run_train_sru(ts);
    if (cmd_ev->parsed()) return run_eval(ev);
    if (cmd_be->parsed()) return run_bench(be);
    if (cmd_sw->parsed()) return run_sweep(sw);
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "error (numeric): %s\n", e.what());
    return kExitNumeric;
  } catch (const data_error& e) {
    std::fprintf(stderr, "error (data): %s\n", e.what());
    return kExitData;
  } catch (const config_error& e) {
    std::fprintf(stderr, "error (config): %s\n", e.what());
    return kExitConfig;
  } catch (const error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
