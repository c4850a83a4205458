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

// Corpus ingestion in the usual preprocessed-PTB layout: UTF-8 text, one
// sentence per line, whitespace tokens, a directory holding train.txt,
// valid.txt and test.txt. Vocabulary is frequency-ranked and capped, with
// <unk> and <eos> always reserved. Also ships a seeded synthetic corpus
// generator so the test suite and demos run without downloads.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qzlm/common.hpp"
#include "qzlm/rng.hpp"

namespace qzlm {

struct Vocab {
  static constexpr const char* kUnk = "<unk>";
  static constexpr const char* kEos = "<eos>";
  static constexpr std::int32_t kUnkId = 0;
  static constexpr std::int32_t kEosId = 1;

  std::vector<std::string> tokens;                     // id -> token
  std::unordered_map<std::string, std::int32_t> ids;   // token -> id

  std::size_t size() const { return tokens.size(); }

  std::int32_t lookup(std::string_view token) const {
    auto it = ids.find(std::string(token));
    return it == ids.end() ? kUnkId : it->second;
  }

  bool contains(std::string_view token) const {
    return ids.find(std::string(token)) != ids.end();
  }

  // Frequency-ranked (ties by first occurrence), truncated to `cap` total
  // entries including the two reserved tokens.
  static Vocab build(const std::string& train_text, std::size_t cap) {
    if (cap < 3) {
      throw config_error("vocab cap must be at least 3 (two reserved tokens plus one)");
    }
    struct Entry {
      std::int64_t count = 0;
      std::size_t first_seen = 0;
    };
    std::unordered_map<std::string, Entry> counts;
    std::size_t order = 0;
    bool any = false;
    std::istringstream lines(train_text);
    std::string line, word;
    while (std::getline(lines, line)) {
      std::istringstream ws(line);
      while (ws >> word) {
        any = true;
        if (word == kUnk || word == kEos) continue;  // reserved, never re-added
        auto [it, inserted] = counts.try_emplace(word);
        if (inserted) it->second.first_seen = order++;
        it->second.count++;
      }
    }
    if (!any) {
      throw data_error("vocab: training text has no tokens");
    }
    std::vector<std::pair<std::string, Entry>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second.count != b.second.count) return a.second.count > b.second.count;
      return a.second.first_seen < b.second.first_seen;
    });
    Vocab v;
    v.tokens = {kUnk, kEos};
    std::size_t keep = std::min(ranked.size(), cap - 2);
    for (std::size_t i = 0; i < keep; ++i) v.tokens.push_back(ranked[i].first);
    for (std::size_t i = 0; i < v.tokens.size(); ++i) {
      v.ids.emplace(v.tokens[i], static_cast<std::int32_t>(i));
    }
    return v;
  }

  // One token per line; line number = id.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot write vocab file " + path.string());
    for (const std::string& t : tokens) out << t << '\n';
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot read vocab file " + path.string());
    Vocab v;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      v.ids.emplace(line, static_cast<std::int32_t>(v.tokens.size()));
      v.tokens.push_back(line);
    }
    if (v.tokens.size() < 2 || v.tokens[0] != kUnk || v.tokens[1] != kEos) {
      throw data_error("vocab file " + path.string() +
                       " must start with <unk> and <eos>");
    }
    return v;
  }
};

struct TokenStream {
  std::vector<std::int32_t> ids;
  std::string split;

  std::size_t size() const { return ids.size(); }
};

// Every line contributes its tokens (unknowns mapped to <unk>) followed by
// one <eos>.
inline TokenStream encode(const std::string& text, const Vocab& vocab,
                          std::string split_name = "") {
  TokenStream stream;
  stream.split = std::move(split_name);
  std::istringstream lines(text);
  std::string line, word;
  while (std::getline(lines, line)) {
    std::istringstream ws(line);
    while (ws >> word) stream.ids.push_back(vocab.lookup(word));
    stream.ids.push_back(Vocab::kEosId);
  }
  return stream;
}

// Fraction of corpus words that map to <unk> (line-end <eos> not counted).
inline double oov_rate(const std::string& text, const Vocab& vocab) {
  std::istringstream lines(text);
  std::string line, word;
  std::uint64_t total = 0, unk = 0;
  while (std::getline(lines, line)) {
    std::istringstream ws(line);
    while (ws >> word) {
      ++total;
      if (vocab.lookup(word) == Vocab::kUnkId) ++unk;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(unk) / static_cast<double>(total);
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// train.txt / valid.txt / test.txt in one directory.
struct CorpusText {
  std::string train, valid, test;

  static CorpusText load(const std::filesystem::path& dir) {
    CorpusText c;
    c.train = read_text_file(dir / "train.txt");
    c.valid = read_text_file(dir / "valid.txt");
    c.test = read_text_file(dir / "test.txt");
    return c;
  }
};

// One truncated-BPTT block: `inputs[lane]` and `targets[lane]` are views of
// `bptt_len` consecutive ids, targets shifted one step ahead.
struct BpttBlock {
  std::vector<std::span<const std::int32_t>> inputs;
  std::vector<std::span<const std::int32_t>> targets;
};

// Reshapes a stream into `batch_size` contiguous lanes and walks them in
// blocks of `bptt_len`. Iteration is deterministic; the tail that does not
// fill a block is dropped. Lane state is meant to carry across consecutive
// blocks, so block k continues exactly where block k-1 stopped.
class BpttBatches {
 public:
  BpttBatches(const TokenStream& stream, std::size_t batch_size, std::size_t bptt_len)
      : stream_(&stream), batch_size_(batch_size), bptt_len_(bptt_len) {
    if (batch_size == 0 || bptt_len == 0) {
      throw config_error("bptt batches: batch size and bptt length must be positive");
    }
    per_lane_ = stream.size() / batch_size;
    if (stream.size() <= batch_size || per_lane_ < 2) {
      throw data_error("bptt batches: stream of " + std::to_string(stream.size()) +
                       " tokens is too short for batch size " +
                       std::to_string(batch_size));
    }
    num_blocks_ = (per_lane_ - 1) / bptt_len;
    if (num_blocks_ == 0) {
      throw data_error("bptt batches: stream too short for bptt length " +
                       std::to_string(bptt_len));
    }
  }

  std::size_t size() const { return num_blocks_; }
  std::size_t batch_size() const { return batch_size_; }
  std::size_t tokens_per_block() const { return batch_size_ * bptt_len_; }

  BpttBlock block(std::size_t index) const {
    if (index >= num_blocks_) {
      throw config_error("bptt batches: block index out of range");
    }
    BpttBlock b;
    b.inputs.reserve(batch_size_);
    b.targets.reserve(batch_size_);
    const std::int32_t* base = stream_->ids.data();
    for (std::size_t lane = 0; lane < batch_size_; ++lane) {
      const std::int32_t* lane_base = base + lane * per_lane_ + index * bptt_len_;
      b.inputs.emplace_back(lane_base, bptt_len_);
      b.targets.emplace_back(lane_base + 1, bptt_len_);
    }
    return b;
  }

 private:
  const TokenStream* stream_;
  std::size_t batch_size_;
  std::size_t bptt_len_;
  std::size_t per_lane_;
  std::size_t num_blocks_;
};

// ---------------------------------------------------------------------------
// Synthetic desk corpus: an order-2 Markov chain over a small vocabulary.
// The context (a, b) is bucketed before hashing so the conditional
// distributions are low-rank enough for a small model to learn, and each
// context spreads its mass over `branch` candidates with 1/(rank+1) weights.

struct SyntheticCorpusOptions {
  std::size_t vocab = 500;
  std::size_t train_tokens = 120000;
  std::size_t valid_tokens = 12000;
  std::size_t test_tokens = 12000;
  std::size_t branch = 6;
  std::size_t min_line = 5;
  std::size_t max_line = 24;
  std::uint64_t seed = 1;
};

namespace detail {

inline std::uint64_t mix3(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t s = a * 0x9e3779b97f4a7c15ULL + b * 0xc2b2ae3d27d4eb4fULL +
                    c * 0x165667b19e3779f9ULL;
  return splitmix64(s);
}

}  // namespace detail

class SyntheticCorpus {
 public:
  explicit SyntheticCorpus(const SyntheticCorpusOptions& options)
      : options_(options), salt_(derive_seed(options.seed, "corpus.structure")) {
    if (options.vocab < 2 || options.branch == 0) {
      throw config_error("synthetic corpus: vocab must be >= 2 and branch >= 1");
    }
  }

  std::size_t candidate(std::size_t prev2, std::size_t prev1, std::size_t rank) const {
    std::uint64_t ctx = detail::mix3(salt_ + prev2 % 8, prev1 % 32, rank);
    return static_cast<std::size_t>(ctx % options_.vocab);
  }

  // Next token under the Zipf-ish candidate weights 1/(rank+1).
  std::size_t sample_next(std::size_t prev2, std::size_t prev1, Rng& rng) const {
    double total = 0;
    for (std::size_t r = 0; r < options_.branch; ++r) total += 1.0 / double(r + 1);
    double pick = rng.uniform01() * total;
    for (std::size_t r = 0; r < options_.branch; ++r) {
      pick -= 1.0 / double(r + 1);
      if (pick <= 0) return candidate(prev2, prev1, r);
    }
    return candidate(prev2, prev1, options_.branch - 1);
  }

  std::string generate(std::size_t word_count, Rng& rng) const {
    std::ostringstream out;
    std::size_t prev2 = 0, prev1 = 1 % options_.vocab;
    std::size_t line_left = line_length(rng);
    for (std::size_t i = 0; i < word_count; ++i) {
      std::size_t next = sample_next(prev2, prev1, rng);
      out << word(next);
      prev2 = prev1;
      prev1 = next;
      if (--line_left == 0) {
        out << '\n';
        line_left = line_length(rng);
      } else {
        out << ' ';
      }
    }
    if (line_left != 0) out << '\n';
    return out.str();
  }

  std::string word(std::size_t id) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "w%03zu", id);
    return buf;
  }

  const SyntheticCorpusOptions& options() const { return options_; }

 private:
  std::size_t line_length(Rng& rng) const {
    return options_.min_line +
           static_cast<std::size_t>(rng.bounded(options_.max_line - options_.min_line + 1));
  }

  SyntheticCorpusOptions options_;
  std::uint64_t salt_;
};

// Writes train.txt / valid.txt / test.txt under `dir`.
inline void write_synthetic_corpus(const std::filesystem::path& dir,
                                   const SyntheticCorpusOptions& options) {
  std::filesystem::create_directories(dir);
  SyntheticCorpus corpus(options);
  struct Split {
    const char* name;
    std::size_t tokens;
    const char* purpose;
  };
  const Split splits[] = {{"train.txt", options.train_tokens, "corpus.train"},
                          {"valid.txt", options.valid_tokens, "corpus.valid"},
                          {"test.txt", options.test_tokens, "corpus.test"}};
  for (const Split& s : splits) {
    Rng rng(derive_seed(options.seed, s.purpose));
    std::ofstream out(dir / s.name, std::ios::binary);
    if (!out) throw data_error("cannot write " + (dir / s.name).string());
    out << corpus.generate(s.tokens, rng);
  }
}

}  // namespace qzlm
