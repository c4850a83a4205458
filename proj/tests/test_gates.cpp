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

#include "qzlm/gates.hpp"
#include "qzlm/grad.hpp"
#include "qzlm/train.hpp"

using namespace qzlm;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 30;
  c.embed_dim = 6;
  c.hidden_sizes = {8, 6};
  c.window_sizes = {2, 1};
  return c;
}

TokenStream cyclic_stream(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  // Mildly structured: next = (prev * 3 + noise) % vocab.
  Rng rng(seed);
  TokenStream s;
  std::int32_t prev = 0;
  for (std::size_t i = 0; i < n; ++i) {
    prev = static_cast<std::int32_t>(
        (static_cast<std::size_t>(prev) * 3 + rng.bounded(3)) % vocab);
    s.ids.push_back(prev);
  }
  return s;
}

}  // namespace

TEST_CASE("sampled gate formula: u = 0.5 and log_alpha = 0 give z = 0.5") {
  HardConcreteHyper hyper;
  // u = 0.5 means logit(u) = 0.
  GateEval<double> e = sample_gate_eval(0.0, 0.0, hyper);
  CHECK(e.z == Catch::Approx(0.5).margin(1e-12));
  CHECK(e.dz_dlog_alpha > 0.0);
}

TEST_CASE("sampled gate clamps at the noise extremes") {
  HardConcreteHyper hyper;
  // u -> 0+ drives s -> 0 and z to the lower clamp.
  CHECK(sample_gate_eval(0.0, -60.0, hyper).z == 0.0);
  CHECK(sample_gate_eval(0.0, -60.0, hyper).dz_dlog_alpha == 0.0);
  // u -> 1- drives z to the upper clamp.
  CHECK(sample_gate_eval(0.0, 60.0, hyper).z == 1.0);
  CHECK(sample_gate_eval(0.0, 60.0, hyper).dz_dlog_alpha == 0.0);
}

TEST_CASE("sampled gates stay in [0,1] and are deterministic given the seed") {
  HardConcreteHyper hyper;
  std::vector<double> log_alpha{-2.0, 0.0, 1.5, 4.0};
  Rng a(99), b(99);
  std::vector<double> za = sample_gate(std::span<const double>(log_alpha), hyper, a);
  std::vector<double> zb = sample_gate(std::span<const double>(log_alpha), hyper, b);
  CHECK(za == zb);
  for (double z : za) {
    CHECK(z >= 0.0);
    CHECK(z <= 1.0);
  }
}

TEST_CASE("expected L0 penalty: closed form at log_alpha = 0") {
  HardConcreteHyper hyper;
  CHECK(hyper.penalty_shift() == Catch::Approx((2.0 / 3.0) * std::log(11.0)).margin(1e-12));
  std::vector<double> la{0.0};
  CHECK(expected_l0_penalty(std::span<const double>(la), hyper) ==
        Catch::Approx(0.8318).margin(1e-3));
  std::vector<double> closed{-40.0};
  CHECK(expected_l0_penalty(std::span<const double>(closed), hyper) ==
        Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("closed-form penalty matches Monte Carlo P(z > 0)") {
  HardConcreteHyper hyper;
  for (double la : {-3.0, 0.0, 3.0}) {
    Rng rng(derive_seed(7, "mc" + std::to_string(la)));
    std::size_t open = 0;
    const std::size_t n = 100000;
    for (std::size_t i = 0; i < n; ++i) {
      double u = rng.uniform01();
      double logit_u = std::log(u) - std::log1p(-u);
      if (sample_gate_eval(la, logit_u, hyper).z > 0.0) ++open;
    }
    std::vector<double> one{la};
    double closed = expected_l0_penalty(std::span<const double>(one), hyper);
    double mc = static_cast<double>(open) / static_cast<double>(n);
    INFO("log_alpha " << la << " closed " << closed << " mc " << mc);
    CHECK(std::abs(closed - mc) < 0.01);
  }
}

TEST_CASE("closed-form penalty matches Monte Carlo for fuzzed log_alpha") {
  HardConcreteHyper hyper;
  Rng fuzz(13);
  for (int round = 0; round < 20; ++round) {
    double la = fuzz.uniform(-4, 4);
    Rng rng(derive_seed(100 + round, "mc-fuzz"));
    std::size_t open = 0;
    const std::size_t n = 100000;
    for (std::size_t i = 0; i < n; ++i) {
      double u = rng.uniform01();
      double logit_u = std::log(u) - std::log1p(-u);
      if (sample_gate_eval(la, logit_u, hyper).z > 0.0) ++open;
    }
    std::vector<double> one{la};
    double closed = expected_l0_penalty(std::span<const double>(one), hyper);
    CHECK(std::abs(closed - static_cast<double>(open) / n) < 0.01);
  }
}

TEST_CASE("expected penalty is strictly increasing in log_alpha") {
  HardConcreteHyper hyper;
  double prev = -1;
  for (double la = -6; la <= 6; la += 0.25) {
    std::vector<double> one{la};
    double p = expected_l0_penalty(std::span<const double>(one), hyper);
    CHECK(p > prev);
    prev = p;
  }
}

TEST_CASE("test-time estimator values and clamps") {
  HardConcreteHyper hyper;
  std::vector<double> la{0.0, -10.0, 10.0};
  std::vector<double> z = test_gate(std::span<const double>(la), hyper);
  CHECK(z[0] == Catch::Approx(0.5).margin(1e-12));  // 0.5 * 1.2 - 0.1
  CHECK(z[1] == 0.0);
  CHECK(z[2] == 1.0);
}

TEST_CASE("test gate closes exactly at log_alpha = -ln 11") {
  HardConcreteHyper hyper;
  const double threshold = -std::log(11.0);
  std::vector<double> below{threshold - 1e-6};
  std::vector<double> above{threshold + 1e-6};
  CHECK(test_gate(std::span<const double>(below), hyper)[0] == 0.0);
  CHECK(test_gate(std::span<const double>(above), hyper)[0] > 0.0);
}

TEST_CASE("saturated gates leave the loss exactly at the ungated value") {
  Rng rng(3);
  ModelConfig config = tiny_config();
  QrnnModel<double> model = QrnnModel<double>::random_init(config, rng, 0.2);
  HardConcreteGates<double> gates = HardConcreteGates<double>::init(config, 0.1, 40.0);
  TokenStream stream = cyclic_stream(200, config.vocab_size, 5);
  BpttBatches batches(stream, 2, 10);
  BpttBlock block = batches.block(0);

  Tape<double> tape;
  double gated = forward_with_tape<double>(model, &gates, nullptr, nullptr, block.inputs,
                                           block.targets, nullptr, tape);
  double plain = forward_with_tape<double>(model, nullptr, nullptr, nullptr, block.inputs,
                                           block.targets, nullptr, tape);
  CHECK(gated == plain);  // test gate of +40 is exactly 1.0
}

TEST_CASE("a closed gate silences its feature map when c0 = 0") {
  Rng rng(7);
  ModelConfig config = tiny_config();
  QrnnModel<double> model = QrnnModel<double>::random_init(config, rng, 0.5);
  HardConcreteGates<double> gates = HardConcreteGates<double>::init(config, 0.0, 10.0);
  gates.log_alpha[0][3] = -10.0;  // closed at test time
  TokenStream stream = cyclic_stream(100, config.vocab_size, 9);
  BpttBatches batches(stream, 1, 12);
  BpttBlock block = batches.block(0);
  Tape<double> tape;
  forward_with_tape<double>(model, &gates, nullptr, nullptr, block.inputs, block.targets,
                            nullptr, tape);
  const auto& layer = tape.lanes[0].layers[0];
  for (std::size_t t = 0; t < layer.c.cols(); ++t) {
    CHECK(layer.c(3, t) == 0.0);  // h = o * c is zero wherever c is
    CHECK(layer.z(3, t) == 0.0);
  }
}

TEST_CASE("gate training is deterministic and never touches the weights") {
  Rng rng(11);
  ModelConfig config = tiny_config();
  QrnnModel<float> model = QrnnModel<float>::random_init(config, rng, 0.1f);
  const std::string frozen = weights_sha256(model);
  TokenStream stream = cyclic_stream(600, config.vocab_size, 13);
  TrainOptions<float> opts;
  opts.steps = 60;
  opts.batch_size = 2;
  opts.bptt_len = 10;
  opts.lr = 5e-3f;
  opts.seed = 17;
  HardConcreteGates<float> a = train_gates(model, stream, 0.01f, opts);
  HardConcreteGates<float> b = train_gates(model, stream, 0.01f, opts);
  CHECK(a.log_alpha == b.log_alpha);
  CHECK(weights_sha256(model) == frozen);
}

TEST_CASE("lambda = 0 keeps every gate open on a trained model") {
  Rng rng(19);
  ModelConfig config = tiny_config();
  QrnnModel<float> model = QrnnModel<float>::random_init(config, rng, 0.1f);
  TokenStream stream = cyclic_stream(2000, config.vocab_size, 21);
  TrainOptions<float> base_opts;
  base_opts.steps = 150;
  base_opts.batch_size = 4;
  base_opts.bptt_len = 10;
  base_opts.lr = 5e-3f;
  train_baseline(model, stream, base_opts);

  TrainOptions<float> gate_opts;
  gate_opts.steps = 200;
  gate_opts.batch_size = 4;
  gate_opts.bptt_len = 10;
  gate_opts.lr = 5e-3f;
  gate_opts.seed = 23;
  HardConcreteGates<float> gates = train_gates(model, stream, 0.0f, gate_opts);
  std::size_t closed = 0;
  for (const auto& layer : gates.log_alpha) {
    std::vector<float> z = test_gate(std::span<const float>(layer), gates.hyper);
    for (float v : z) closed += v == 0.0f;
  }
  CHECK(closed == 0);
}

TEST_CASE("a large lambda closes at least half the gates") {
  Rng rng(29);
  ModelConfig config = tiny_config();
  QrnnModel<float> model = QrnnModel<float>::random_init(config, rng, 0.1f);
  TokenStream stream = cyclic_stream(2000, config.vocab_size, 31);
  TrainOptions<float> opts;
  opts.steps = 2000;
  opts.batch_size = 4;
  opts.bptt_len = 10;
  opts.lr = 5e-3f;
  opts.seed = 37;
  HardConcreteGates<float> gates = train_gates(model, stream, 1.0f, opts);
  std::size_t closed = 0, total = 0;
  for (const auto& layer : gates.log_alpha) {
    std::vector<float> z = test_gate(std::span<const float>(layer), gates.hyper);
    for (float v : z) {
      closed += v == 0.0f;
      ++total;
    }
  }
  INFO("closed " << closed << " of " << total);
  CHECK(closed * 2 >= total);
}

TEST_CASE("discretization: saturated gates give the full mask and untouched weights") {
  Rng rng(41);
  ModelConfig config = tiny_config();
  QrnnModel<float> model = QrnnModel<float>::random_init(config, rng, 0.3f);
  HardConcreteGates<float> gates = HardConcreteGates<float>::init(config, 0.1f, 10.0f);
  DiscretizedGates<float> disc = gates_to_mask_and_scale(model, gates);
  CHECK(disc.mask.is_full(config));
  CHECK(disc.flops_fraction == 1.0);
  CHECK(disc.model.layers[0].w_z == model.layers[0].w_z);  // z = 1 exactly at +10
}

TEST_CASE("discretization drops closed filters and preserves the gated forward") {
  Rng rng(43);
  ModelConfig config = tiny_config();
  QrnnModel<float> model = QrnnModel<float>::random_init(config, rng, 0.4f);
  HardConcreteGates<float> gates = HardConcreteGates<float>::init(config, 0.1f, 10.0f);
  gates.log_alpha[0][1] = -10.0f;  // dropped
  gates.log_alpha[0][4] = 0.0f;    // survives at z = 0.5
  gates.log_alpha[0][6] = 1.0f;    // survives at a partial scale

  DiscretizedGates<float> disc = gates_to_mask_and_scale(model, gates);
  CHECK(disc.mask.kept[0].size() == config.hidden_sizes[0] - 1);
  CHECK(disc.flops_fraction < 1.0);

  // The surviving scaled row is the original row times its gate value.
  std::vector<float> z = test_gate(std::span<const float>(gates.log_alpha[0]), gates.hyper);
  // Row 4 of the original maps to row 3 of the pruned layer (row 1 dropped).
  for (std::size_t j = 0; j < model.layers[0].w_z.cols(); ++j) {
    CHECK(disc.model.layers[0].w_z(3, j) ==
          Catch::Approx(model.layers[0].w_z(4, j) * z[4]).margin(1e-7));
  }

  // Oracle for the test-time gated model: scale W_z rows in place (zeros
  // included) and run the unpruned forward.
  QrnnModel<float> gated_full = model;
  for (std::size_t i = 0; i < config.hidden_sizes[0]; ++i) {
    for (float& v : gated_full.layers[0].w_z.row(i)) v *= z[i];
  }
  Rng fuzz(47);
  for (int round = 0; round < 100; ++round) {
    std::size_t n = 1 + fuzz.bounded(12);
    std::vector<std::int32_t> tokens(n);
    for (auto& t : tokens) t = static_cast<std::int32_t>(fuzz.bounded(config.vocab_size));
    Matrix<float> a = forward(disc.model, tokens);
    Matrix<float> b = forward(gated_full, tokens);
    for (std::size_t i = 0; i < a.size(); ++i) {
      REQUIRE(std::abs(a.data()[i] - b.data()[i]) <= 1e-5f);
    }
  }
}

TEST_CASE("discretization refuses a fully closed layer") {
  Rng rng(53);
  ModelConfig config = tiny_config();
  QrnnModel<float> model = QrnnModel<float>::random_init(config, rng, 0.3f);
  HardConcreteGates<float> gates = HardConcreteGates<float>::init(config, 0.1f, -10.0f);
  CHECK_THROWS_AS(gates_to_mask_and_scale(model, gates), config_error);
}
