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
#include <vector>

#include "qzlm/grad.hpp"
#include "qzlm/train.hpp"

using namespace qzlm;

namespace {

ModelConfig fd_config() {
  ModelConfig c;
  c.vocab_size = 20;
  c.embed_dim = 8;
  c.hidden_sizes = {8, 8};
  c.window_sizes = {2, 1};
  return c;
}

struct FdBatch {
  std::vector<std::vector<std::int32_t>> in, tgt;
  std::vector<std::span<const std::int32_t>> inputs, targets;

  FdBatch(std::size_t lanes, std::size_t len, std::size_t vocab, std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t l = 0; l < lanes; ++l) {
      std::vector<std::int32_t> a(len), b(len);
      for (std::size_t t = 0; t < len; ++t) {
        a[t] = static_cast<std::int32_t>(rng.bounded(vocab));
        b[t] = static_cast<std::int32_t>(rng.bounded(vocab));
      }
      in.push_back(std::move(a));
      tgt.push_back(std::move(b));
    }
    for (std::size_t l = 0; l < lanes; ++l) {
      inputs.emplace_back(in[l]);
      targets.emplace_back(tgt[l]);
    }
  }
};

}  // namespace

TEST_CASE("tape loss on an all-zero model is ln V") {
  ModelConfig config = fd_config();
  QrnnModel<double> model;
  model.config = config;
  model.embedding = Matrix<double>(config.vocab_size, config.embed_dim);
  for (std::size_t l = 0; l < 2; ++l) {
    std::size_t m = config.hidden_sizes[l], s = config.layer_stacked_dim(l);
    model.layers.push_back({Matrix<double>(m, s), Matrix<double>(m, s), Matrix<double>(m, s)});
  }
  FdBatch batch(2, 6, config.vocab_size, 3);
  Tape<double> tape;
  double loss = forward_with_tape<double>(model, nullptr, nullptr, nullptr, batch.inputs,
                                          batch.targets, nullptr, tape);
  CHECK(loss == Catch::Approx(std::log(20.0)).margin(1e-4));
}

TEST_CASE("tape loss is finite for random small weights") {
  Rng rng(5);
  QrnnModel<double> model = QrnnModel<double>::random_init(fd_config(), rng, 0.1);
  FdBatch batch(3, 10, 20, 11);
  Tape<double> tape;
  double loss = forward_with_tape<double>(model, nullptr, nullptr, nullptr, batch.inputs,
                                          batch.targets, nullptr, tape);
  CHECK(std::isfinite(loss));
  CHECK(loss > 0);
}

TEST_CASE("tape loss equals a tape-free forward plus cross entropy, bit-exact") {
  Rng rng(7);
  ModelConfig config = fd_config();
  QrnnModel<double> model = QrnnModel<double>::random_init(config, rng, 0.1);
  FdBatch batch(1, 9, config.vocab_size, 13);
  Tape<double> tape;
  double loss = forward_with_tape<double>(model, nullptr, nullptr, nullptr, batch.inputs,
                                          batch.targets, nullptr, tape);
  Matrix<double> logits = forward(model, batch.inputs[0]);
  double expect = 0;
  for (std::size_t t = 0; t < batch.in[0].size(); ++t) {
    std::vector<double> col = logits.col_vector(t);
    // Recompute exactly the way the tape does: -log(softmax[target]).
    std::vector<double> p = softmax(std::span<const double>(col));
    expect -= std::log(p[static_cast<std::size_t>(batch.tgt[0][t])]);
  }
  expect /= static_cast<double>(batch.in[0].size());
  CHECK(loss == expect);
}

TEST_CASE("gradients are deterministic given weights and batch") {
  Rng rng(19);
  QrnnModel<double> model = QrnnModel<double>::random_init(fd_config(), rng, 0.1);
  FdBatch batch(2, 8, 20, 17);
  auto run = [&]() {
    Tape<double> tape;
    forward_with_tape<double>(model, nullptr, nullptr, nullptr, batch.inputs, batch.targets,
                              nullptr, tape);
    ModelGrads<double> grads = ModelGrads<double>::zeros_like(model);
    backward<double>(model, tape, ParamSelector::kAllWeights, &grads, nullptr, nullptr);
    return grads;
  };
  ModelGrads<double> a = run();
  ModelGrads<double> b = run();
  CHECK(a.embedding == b.embedding);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    CHECK(a.layers[l].w_z == b.layers[l].w_z);
  }
}

TEST_CASE("all-weight gradients match central finite differences") {
  Rng rng(23);
  ModelConfig config = fd_config();
  QrnnModel<double> model = QrnnModel<double>::random_init(config, rng, 0.1);
  FdBatch batch(2, 12, config.vocab_size, 29);

  auto loss_fn = [&]() {
    Tape<double> tape;
    return forward_with_tape<double>(model, nullptr, nullptr, nullptr, batch.inputs,
                                     batch.targets, nullptr, tape);
  };
  Tape<double> tape;
  forward_with_tape<double>(model, nullptr, nullptr, nullptr, batch.inputs, batch.targets,
                            nullptr, tape);
  ModelGrads<double> grads = ModelGrads<double>::zeros_like(model);
  backward<double>(model, tape, ParamSelector::kAllWeights, &grads, nullptr, nullptr);

  auto params = trainable_spans(model);
  auto gviews = grad_spans(grads);
  FdReport report = finite_diff_check(std::span<const std::span<double>>(params),
                                      std::span<const std::span<const double>>(gviews),
                                      loss_fn, 1e-4, 200, 31);
  INFO("worst analytic " << report.worst_analytic << " numeric " << report.worst_numeric);
  CHECK(report.checked >= 50);
  CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("gate gradients match finite differences with the noise sample held fixed") {
  Rng rng(37);
  ModelConfig config = fd_config();
  QrnnModel<double> model = QrnnModel<double>::random_init(config, rng, 0.1);
  const std::string frozen = weights_sha256(model);

  HardConcreteGates<double> gates = HardConcreteGates<double>::init(config, 0.05);
  Rng la_rng(101);
  for (auto& layer : gates.log_alpha) {
    for (double& v : layer) v = la_rng.uniform(-3, 3);
  }
  Rng noise(derive_seed(7, "gate.noise"));
  GateSample<double> sample = draw_gate_sample(gates, noise);
  FdBatch batch(2, 12, config.vocab_size, 41);
  const double lambda = 0.05;
  const double shift = gates.hyper.penalty_shift();

  auto loss_fn = [&]() {
    Tape<double> tape;
    double ce = forward_with_tape<double>(model, &gates, &sample, nullptr, batch.inputs,
                                          batch.targets, nullptr, tape);
    return ce + lambda * static_cast<double>(expected_l0_penalty(gates));
  };
  Tape<double> tape;
  forward_with_tape<double>(model, &gates, &sample, nullptr, batch.inputs, batch.targets,
                            nullptr, tape);
  GateGrads<double> grads = GateGrads<double>::zeros_like(gates);
  backward<double>(model, tape, ParamSelector::kGateLogAlphas, nullptr, &grads, nullptr);
  for (std::size_t l = 0; l < grads.log_alpha.size(); ++l) {
    for (std::size_t i = 0; i < grads.log_alpha[l].size(); ++i) {
      double s = sigmoid_scalar(gates.log_alpha[l][i] + shift);
      grads.log_alpha[l][i] += lambda * s * (1.0 - s);
    }
  }

  auto params = trainable_spans(gates);
  auto gviews = grad_spans(grads);
  FdReport report = finite_diff_check(std::span<const std::span<double>>(params),
                                      std::span<const std::span<const double>>(gviews),
                                      loss_fn, 1e-4, 200, 43);
  INFO("worst analytic " << report.worst_analytic << " numeric " << report.worst_numeric);
  CHECK(report.max_rel_err <= 1e-4);
  CHECK(weights_sha256(model) == frozen);  // gates training never touches weights
}

TEST_CASE("rank-1 factor gradients match finite differences") {
  Rng rng(47);
  ModelConfig config = fd_config();
  QrnnModel<double> model = QrnnModel<double>::random_init(config, rng, 0.1);
  const std::string frozen = weights_sha256(model);
  SruUpdate<double> sru = init_sru(model, 53);
  FdBatch batch(2, 12, config.vocab_size, 59);

  auto loss_fn = [&]() {
    Tape<double> tape;
    return forward_with_tape<double>(model, nullptr, nullptr, &sru, batch.inputs,
                                     batch.targets, nullptr, tape);
  };
  Tape<double> tape;
  forward_with_tape<double>(model, nullptr, nullptr, &sru, batch.inputs, batch.targets,
                            nullptr, tape);
  SruGrads<double> grads = SruGrads<double>::zeros_like(sru);
  backward<double>(model, tape, ParamSelector::kSruFactors, nullptr, nullptr, &grads, &sru);

  auto params = trainable_spans(sru);
  auto gviews = grad_spans(grads);
  FdReport report = finite_diff_check(std::span<const std::span<double>>(params),
                                      std::span<const std::span<const double>>(gviews),
                                      loss_fn, 1e-4, 200, 61);
  INFO("worst analytic " << report.worst_analytic << " numeric " << report.worst_numeric);
  CHECK(report.max_rel_err <= 1e-4);
  CHECK(weights_sha256(model) == frozen);
}

TEST_CASE("gradient of u is zero when v is zero") {
  Rng rng(67);
  ModelConfig config = fd_config();
  QrnnModel<double> model = QrnnModel<double>::random_init(config, rng, 0.1);
  SruUpdate<double> sru = init_sru(model, 71);
  for (auto& layer : sru.layers) {
    for (auto* g : {&layer.z, &layer.f, &layer.o}) {
      std::fill(g->v.begin(), g->v.end(), 0.0);
    }
  }
  FdBatch batch(1, 8, config.vocab_size, 73);
  Tape<double> tape;
  forward_with_tape<double>(model, nullptr, nullptr, &sru, batch.inputs, batch.targets,
                            nullptr, tape);
  SruGrads<double> grads = SruGrads<double>::zeros_like(sru);
  backward<double>(model, tape, ParamSelector::kSruFactors, nullptr, nullptr, &grads, &sru);
  for (const auto& layer : grads.layers) {
    for (const auto* g : {&layer.z, &layer.f, &layer.o}) {
      for (double du : g->u) CHECK(du == 0.0);
    }
  }
}

TEST_CASE("gate on a filter with zero fan-out gets zero gradient") {
  Rng rng(79);
  ModelConfig config = fd_config();
  QrnnModel<double> model = QrnnModel<double>::random_init(config, rng, 0.1);
  // Silence filter 0 of layer 0 downstream: zero the columns of layer 1 that
  // read channel 0 (window 1, so exactly column 0).
  for (Matrix<double>* w : {&model.layers[1].w_z, &model.layers[1].w_f, &model.layers[1].w_o}) {
    for (std::size_t i = 0; i < w->rows(); ++i) (*w)(i, 0) = 0.0;
  }
  HardConcreteGates<double> gates = HardConcreteGates<double>::init(config, 0.0);
  Rng noise(derive_seed(83, "gate.noise"));
  GateSample<double> sample = draw_gate_sample(gates, noise);
  FdBatch batch(1, 10, config.vocab_size, 89);
  Tape<double> tape;
  forward_with_tape<double>(model, &gates, &sample, nullptr, batch.inputs, batch.targets,
                            nullptr, tape);
  GateGrads<double> grads = GateGrads<double>::zeros_like(gates);
  backward<double>(model, tape, ParamSelector::kGateLogAlphas, nullptr, &grads, nullptr);
  CHECK(grads.log_alpha[0][0] == 0.0);
  // A live filter does feel pressure.
  double live = 0;
  for (std::size_t i = 1; i < grads.log_alpha[0].size(); ++i) {
    live += std::abs(grads.log_alpha[0][i]);
  }
  CHECK(live > 0.0);
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
  std::vector<double> param{1.0, -2.0, 3.0};
  std::vector<double> grad{0.0, 0.0, 0.0};
  std::vector<std::span<double>> params{std::span<double>(param)};
  std::vector<std::span<const double>> grads{std::span<const double>(grad)};
  AdamState<double> state = AdamState<double>::init(std::span<const std::span<double>>(params), 0.1);
  adam_step(state, std::span<const std::span<double>>(params),
            std::span<const std::span<const double>>(grads));
  CHECK(param == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("adam first step moves by about -lr * sign(g)") {
  std::vector<double> param{0.0, 0.0};
  std::vector<double> grad{0.5, -2.0};
  std::vector<std::span<double>> params{std::span<double>(param)};
  std::vector<std::span<const double>> grads{std::span<const double>(grad)};
  AdamState<double> state = AdamState<double>::init(std::span<const std::span<double>>(params), 0.01);
  adam_step(state, std::span<const std::span<double>>(params),
            std::span<const std::span<const double>>(grads));
  CHECK(param[0] == Catch::Approx(-0.01).epsilon(1e-4));
  CHECK(param[1] == Catch::Approx(0.01).epsilon(1e-4));
}

TEST_CASE("adam converges on a 1-D quadratic") {
  const double x_star = 0.7;
  std::vector<double> x{-0.5};
  std::vector<double> g{0.0};
  std::vector<std::span<double>> params{std::span<double>(x)};
  std::vector<std::span<const double>> grads{std::span<const double>(g)};
  AdamState<double> state = AdamState<double>::init(std::span<const std::span<double>>(params), 0.05);
  for (int i = 0; i < 100; ++i) {
    g[0] = x[0] - x_star;  // gradient of (x - x*)^2 / 2
    adam_step(state, std::span<const std::span<double>>(params),
              std::span<const std::span<const double>>(grads));
  }
  CHECK(std::abs(x[0] - x_star) < 1e-2);
}

TEST_CASE("adam rejects mismatched shapes") {
  std::vector<double> param{1.0};
  std::vector<double> grad{0.0, 1.0};
  std::vector<std::span<double>> params{std::span<double>(param)};
  std::vector<std::span<const double>> grads{std::span<const double>(grad)};
  AdamState<double> state = AdamState<double>::init(std::span<const std::span<double>>(params), 0.1);
  CHECK_THROWS_AS(adam_step(state, std::span<const std::span<double>>(params),
                            std::span<const std::span<const double>>(grads)),
                  shape_error);
}

TEST_CASE("baseline training reduces loss on a learnable stream") {
  Rng rng(97);
  ModelConfig config = fd_config();
  QrnnModel<float> model = QrnnModel<float>::random_init(config, rng, 0.1f);
  // Highly regular stream: the next token is (t + 1) % 20.
  TokenStream stream;
  for (int i = 0; i < 4000; ++i) stream.ids.push_back(i % 20);
  TrainOptions<float> opts;
  opts.steps = 120;
  opts.batch_size = 4;
  opts.bptt_len = 10;
  opts.lr = 5e-3f;
  opts.seed = 1;

  // Initial loss on the first block, for comparison.
  BpttBatches batches(stream, opts.batch_size, opts.bptt_len);
  BpttBlock block = batches.block(0);
  Tape<float> tape;
  double before = forward_with_tape<float>(model, nullptr, nullptr, nullptr, block.inputs,
                                           block.targets, nullptr, tape);
  double last = train_baseline(model, stream, opts);
  CHECK(last < before);
  CHECK(last < std::log(20.0));  // beats the uniform floor
}

TEST_CASE("training aborts with a step index when the loss diverges") {
  Rng rng(103);
  ModelConfig config = fd_config();
  QrnnModel<float> model = QrnnModel<float>::random_init(config, rng, 0.1f);
  TokenStream stream;
  for (int i = 0; i < 500; ++i) stream.ids.push_back(i % 20);
  TrainOptions<float> opts;
  opts.steps = 50;
  opts.batch_size = 2;
  opts.bptt_len = 8;
  opts.lr = std::numeric_limits<float>::quiet_NaN();  // guaranteed blow-up
  opts.clip_norm = 0;
  try {
    train_baseline(model, stream, opts);
    FAIL("expected numeric_error");
  } catch (const numeric_error& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}
