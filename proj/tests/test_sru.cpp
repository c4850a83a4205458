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
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "qzlm/eval.hpp"
#include "qzlm/sru.hpp"
#include "qzlm/train.hpp"

using namespace qzlm;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 40;
  c.embed_dim = 8;
  c.hidden_sizes = {12, 8};
  c.window_sizes = {2, 1};
  return c;
}

TokenStream patterned_stream(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  TokenStream s;
  std::int32_t prev = 0;
  for (std::size_t i = 0; i < n; ++i) {
    prev = static_cast<std::int32_t>(
        (static_cast<std::size_t>(prev) * 7 + 1 + rng.bounded(2)) % vocab);
    s.ids.push_back(prev);
  }
  return s;
}

}  // namespace

TEST_CASE("init draws are deterministic given the seed") {
  Rng rng(1);
  QrnnModel<double> model = QrnnModel<double>::random_init(tiny_config(), rng);
  SruUpdate<double> a = init_sru(model, 99);
  SruUpdate<double> b = init_sru(model, 99);
  CHECK(a.layers[0].z.u == b.layers[0].z.u);
  CHECK(a.layers[1].o.v == b.layers[1].o.v);
  SruUpdate<double> c = init_sru(model, 100);
  CHECK(a.layers[0].z.u != c.layers[0].z.u);
}

TEST_CASE("init statistics match Normal(0, 0.1)") {
  ModelConfig config;
  config.vocab_size = 10;
  config.embed_dim = 600;
  config.hidden_sizes = {1200, 600};
  config.window_sizes = {1, 1};
  QrnnModel<double> model;  // zero weights; only the shapes matter here
  model.config = config;
  model.embedding = Matrix<double>(config.vocab_size, config.embed_dim);
  for (std::size_t l = 0; l < 2; ++l) {
    std::size_t m = config.hidden_sizes[l], s = config.layer_stacked_dim(l);
    model.layers.push_back({Matrix<double>(m, s), Matrix<double>(m, s), Matrix<double>(m, s)});
  }
  SruUpdate<double> sru = init_sru(model, 5);
  double sum = 0, sq = 0;
  std::size_t count = 0;
  for (const auto& layer : sru.layers) {
    for (const auto* g : {&layer.z, &layer.f, &layer.o}) {
      for (double v : g->u) { sum += v; sq += v * v; ++count; }
      for (double v : g->v) { sum += v; sq += v * v; ++count; }
    }
  }
  REQUIRE(count >= 10000);
  double mean = sum / static_cast<double>(count);
  double std_dev = std::sqrt(sq / static_cast<double>(count) - mean * mean);
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(std_dev - 0.1) < 0.01);
}

TEST_CASE("factor shapes follow the pruned dimensions") {
  ModelConfig config;
  config.vocab_size = 10;
  config.embed_dim = 80;
  config.hidden_sizes = {80};
  config.window_sizes = {1};
  Rng rng(7);
  QrnnModel<double> model = QrnnModel<double>::random_init(config, rng);
  SruUpdate<double> sru = init_sru(model, 9);
  for (const auto* g : {&sru.layers[0].z, &sru.layers[0].f, &sru.layers[0].o}) {
    CHECK(g->u.size() == 80);
    CHECK(g->v.size() == 80);
  }
}

TEST_CASE("zero factors leave the model bit-identical") {
  Rng rng(11);
  QrnnModel<float> model = QrnnModel<float>::random_init(tiny_config(), rng);
  SruUpdate<float> sru = init_sru(model, 13);
  for (auto& layer : sru.layers) {
    for (auto* g : {&layer.z, &layer.f, &layer.o}) {
      std::fill(g->u.begin(), g->u.end(), 0.0f);
    }
  }
  QrnnModel<float> out = apply_sru(model, sru, "");
  CHECK(out.layers[0].w_z == model.layers[0].w_z);
  CHECK(out.layers[1].w_o == model.layers[1].w_o);
  CHECK(out.embedding == model.embedding);  // tied matrix gets no update
}

TEST_CASE("rank-1 update hand arithmetic") {
  ModelConfig config;
  config.vocab_size = 4;
  config.embed_dim = 2;
  config.hidden_sizes = {1, 2};
  config.window_sizes = {1, 1};
  QrnnModel<double> model;
  model.config = config;
  model.embedding = Matrix<double>(4, 2);
  model.layers.push_back({Matrix<double>(1, 2, {1.0, 2.0}), Matrix<double>(1, 2),
                          Matrix<double>(1, 2)});
  model.layers.push_back({Matrix<double>(2, 1), Matrix<double>(2, 1), Matrix<double>(2, 1)});
  SruUpdate<double> sru = init_sru(model, 1);
  for (auto& layer : sru.layers) {
    for (auto* g : {&layer.z, &layer.f, &layer.o}) {
      std::fill(g->u.begin(), g->u.end(), 0.0);
      std::fill(g->v.begin(), g->v.end(), 0.0);
    }
  }
  sru.layers[0].z.u = {1.0};
  sru.layers[0].z.v = {0.5, -0.5};
  QrnnModel<double> out = apply_sru(model, sru, "");
  CHECK(out.layers[0].w_z(0, 0) == 1.5);
  CHECK(out.layers[0].w_z(0, 1) == 1.5);
}

TEST_CASE("applying and subtracting the same update round-trips") {
  Rng rng(17);
  QrnnModel<double> model = QrnnModel<double>::random_init(tiny_config(), rng);
  SruUpdate<double> sru = init_sru(model, 19);
  QrnnModel<double> applied = apply_sru(model, sru, "");
  SruUpdate<double> negated = sru;
  for (auto& layer : negated.layers) {
    for (auto* g : {&layer.z, &layer.f, &layer.o}) {
      for (double& v : g->u) v = -v;
    }
  }
  QrnnModel<double> back = apply_sru(applied, negated, "");
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (std::size_t i = 0; i < model.layers[l].w_z.size(); ++i) {
      CHECK(std::abs(back.layers[l].w_z.data()[i] - model.layers[l].w_z.data()[i]) < 1e-6);
    }
  }
}

TEST_CASE("mask hash mismatches are refused with both hashes") {
  Rng rng(23);
  QrnnModel<float> model = QrnnModel<float>::random_init(tiny_config(), rng);
  SruUpdate<float> sru = init_sru(model, 29, "aaa111", "op80");
  try {
    apply_sru(model, sru, "bbb222");
    FAIL("expected data_error");
  } catch (const data_error& e) {
    std::string msg = e.what();
    CHECK(msg.find("aaa111") != std::string::npos);
    CHECK(msg.find("bbb222") != std::string::npos);
  }
  CHECK_NOTHROW(apply_sru(model, sru, "aaa111"));
}

TEST_CASE("apply_sru validates factor shapes") {
  Rng rng(31);
  QrnnModel<float> model = QrnnModel<float>::random_init(tiny_config(), rng);
  SruUpdate<float> sru = init_sru(model, 37);
  sru.layers[0].f.v.pop_back();
  CHECK_THROWS_AS(apply_sru(model, sru, ""), shape_error);
}

TEST_CASE("zero training steps return the freshly initialized update") {
  Rng rng(41);
  QrnnModel<float> model = QrnnModel<float>::random_init(tiny_config(), rng, 0.1f);
  TokenStream stream = patterned_stream(400, model.config.vocab_size, 43);
  TrainOptions<float> opts;
  opts.steps = 0;
  opts.seed = 47;
  SruUpdate<float> trained = train_sru(model, stream, opts, "h", "t", 0.8);
  SruUpdate<float> fresh = init_sru(model, 47, "h", "t");
  CHECK(trained.layers[0].z.u == fresh.layers[0].z.u);
  CHECK(trained.mask_sha256 == "h");
  CHECK(trained.flops_fraction == 0.8);
}

TEST_CASE("rank-1 training recovers quality on a pruned model") {
  Rng rng(53);
  ModelConfig config = tiny_config();
  QrnnModel<float> model = QrnnModel<float>::random_init(config, rng, 0.1f);
  TokenStream train = patterned_stream(4000, config.vocab_size, 59);
  TokenStream valid = patterned_stream(800, config.vocab_size, 61);

  TrainOptions<float> base_opts;
  base_opts.steps = 400;
  base_opts.batch_size = 4;
  base_opts.bptt_len = 12;
  base_opts.lr = 5e-3f;
  train_baseline(model, train, base_opts);

  double fraction = solve_operating_point(config, 0.6);
  PruneMask mask = random_mask(config, fraction, 67);
  QrnnModel<float> pruned = apply_mask(model, mask);
  const std::string frozen = weights_sha256(pruned);
  double before = perplexity(pruned, valid);

  TrainOptions<float> sru_opts;
  sru_opts.steps = 500;
  sru_opts.batch_size = 4;
  sru_opts.bptt_len = 12;
  sru_opts.lr = 5e-3f;
  sru_opts.seed = 71;
  SruUpdate<float> update = train_sru(pruned, train, sru_opts, mask.sha256(), "op60",
                                      FlopsModel(config).fraction(mask));
  CHECK(weights_sha256(pruned) == frozen);

  QrnnModel<float> recovered = apply_sru(pruned, update, mask.sha256());
  double after = perplexity(recovered, valid);
  INFO("validation perplexity " << before << " -> " << after);
  CHECK(after < before);

  // The update never changes per-query compute.
  OpCounter c_before, c_after;
  std::vector<std::int32_t> one{1};
  forward(pruned, one, &c_before);
  forward(recovered, one, &c_after);
  CHECK(c_before.flops() == c_after.flops());
}

TEST_CASE("training loss does not increase over the run") {
  Rng rng(73);
  ModelConfig config = tiny_config();
  QrnnModel<float> model = QrnnModel<float>::random_init(config, rng, 0.1f);
  TokenStream train = patterned_stream(2000, config.vocab_size, 79);
  TrainOptions<float> opts;
  opts.steps = 150;
  opts.batch_size = 4;
  opts.bptt_len = 10;
  opts.lr = 5e-3f;
  opts.seed = 83;
  double first_loss = -1;
  opts.log_every = 1;
  opts.logger = [&](std::size_t step, double loss) {
    if (step == 1) first_loss = loss;
  };
  // Train on the raw (unpruned) model; the contract is loss improvement.
  SruUpdate<float> update = train_sru(model, train, opts);
  Tape<float> tape;
  BpttBatches batches(train, opts.batch_size, opts.bptt_len);
  BpttBlock block = batches.block(0);
  double final_loss = forward_with_tape<float>(model, nullptr, nullptr, &update, block.inputs,
                                               block.targets, nullptr, tape);
  CHECK(final_loss <= first_loss);
}

TEST_CASE("storage accounting is linear in the factor lengths") {
  ModelConfig config;
  config.vocab_size = 10;
  config.embed_dim = 100;
  config.hidden_sizes = {100};
  config.window_sizes = {1};
  Rng rng(89);
  QrnnModel<double> model = QrnnModel<double>::random_init(config, rng);
  SruUpdate<double> sru = init_sru(model, 97);
  CHECK(sru_storage_bytes(sru) == 3 * (100 + 100) * 4 + kSruHeaderBytes);
  CHECK(sru_storage_bytes(sru, 2) == 3 * (100 + 100) * 2 + kSruHeaderBytes);
  CHECK(sru_storage_bytes(config) == sru_storage_bytes(sru));

  // Doubling both dimensions doubles the payload (not quadruples).
  ModelConfig big = config;
  big.embed_dim = 200;
  big.hidden_sizes = {200};
  CHECK(sru_storage_bytes(big) - kSruHeaderBytes ==
        2 * (sru_storage_bytes(config) - kSruHeaderBytes));
}
