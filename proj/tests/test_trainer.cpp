#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "persrec/trainer.hpp"

using namespace persrec;

namespace {

Model unit_model() {
  ModelConfig cfg;
  cfg.num_layers = 1;
  cfg.model_dim = 1;
  cfg.num_heads = 1;
  cfg.ffn_dim = 1;
  cfg.vocab_size = 1;
  cfg.max_positions = 1;
  cfg.num_expert_slots = 0;
  return init_model(cfg);  // 11 parameters
}

}  // namespace

TEST_CASE("adam first step against hand-computed values") {
  Model m = unit_model();
  REQUIRE(m.param_count() == 11);
  std::fill(m.params.begin(), m.params.end(), 0.5);
  AdamState state = make_adam_state(m);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.0;
  cfg.grad_clip = 0.0;  // disabled

  std::vector<double> grads(11, 2.0);
  adam_step(m, grads, state, cfg);
  // m = 0.2, v = 0.004; mhat = 2, vhat = 4; step = lr * 2/(2 + eps)
  double expected = 0.5 - 0.1 * (2.0 / (2.0 + 1e-8));
  for (double p : m.params) CHECK(p == Catch::Approx(expected).margin(1e-12));

  // second step with the same gradient: mhat and vhat stay 2 and 4
  grads.assign(11, 2.0);
  adam_step(m, grads, state, cfg);
  double expected2 = expected - 0.1 * (2.0 / (2.0 + 1e-8));
  for (double p : m.params) CHECK(p == Catch::Approx(expected2).margin(1e-9));
  CHECK(state.step == 2);
}

TEST_CASE("decoupled weight decay acts even with zero gradient") {
  Model m = unit_model();
  std::fill(m.params.begin(), m.params.end(), 2.0);
  AdamState state = make_adam_state(m);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.5;
  std::vector<double> grads(11, 0.0);
  adam_step(m, grads, state, cfg);
  for (double p : m.params) CHECK(p == Catch::Approx(2.0 * (1.0 - 0.05)));
}

TEST_CASE("gradient clipping rescales to the target global norm") {
  Model m = unit_model();
  AdamState state = make_adam_state(m);
  TrainConfig cfg;
  cfg.grad_clip = 1.0;
  std::vector<double> grads(11, 1.0);
  adam_step(m, grads, state, cfg);
  const double scaled = 1.0 / std::sqrt(11.0);
  for (double g : grads) CHECK(g == Catch::Approx(scaled));
  for (double mm : state.m) CHECK(mm == Catch::Approx(0.1 * scaled));
}

TEST_CASE("non-finite gradients are rejected") {
  Model m = unit_model();
  AdamState state = make_adam_state(m);
  TrainConfig cfg;
  std::vector<double> grads(11, 0.0);
  grads[3] = std::numeric_limits<double>::quiet_NaN();
  try {
    adam_step(m, grads, state, cfg);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.name() == "NonFiniteGradient");
  }
}

TEST_CASE("train validates config and data") {
  SegmentationPlan plan = build_plan({4}, {0});
  ModelConfig cfg;
  cfg.vocab_size = 8;
  cfg.max_positions = 4;
  cfg.model_dim = 8;
  cfg.num_heads = 2;
  cfg.ffn_dim = 8;
  cfg.num_layers = 1;
  Model m = init_model(cfg);
  TrainConfig tc;
  tc.learning_rate = 0.0;
  CHECK_THROWS_AS(train(m, {{0, 1, 2, 3}}, plan, tc), Error);
  tc.learning_rate = 1e-3;
  CHECK_THROWS_AS(train(m, {}, plan, tc), Error);
  CHECK_THROWS_AS(train(m, {{0, 1, 2, 3, 4}}, plan, tc), Error);  // too long
}

TEST_CASE("training reduces the loss on learnable data") {
  SegmentationPlan plan = build_plan({6, 3}, {1, 0});
  ModelConfig cfg;
  cfg.num_layers = 1;
  cfg.model_dim = 16;
  cfg.num_heads = 2;
  cfg.ffn_dim = 16;
  cfg.vocab_size = 10;
  cfg.max_positions = plan.flattened_length();
  cfg.num_expert_slots = 1;
  Model m = init_model(cfg);

  // cyclic sequences: the next item is always (current + 1) mod 10
  std::vector<std::vector<int>> users;
  for (int u = 0; u < 16; ++u) {
    std::vector<int> seq;
    for (int t = 0; t < plan.total_items(); ++t) seq.push_back((u + t) % 10);
    users.push_back(seq);
  }
  TrainConfig tc;
  tc.epochs = 20;
  tc.batch_size = 8;
  tc.learning_rate = 1e-2;
  tc.weight_decay = 0.0;
  TrainStats stats = train(m, users, plan, tc);
  REQUIRE(stats.epoch_loss.size() == 20);
  CHECK(stats.epoch_loss.back() < 0.5 * stats.epoch_loss.front());
  CHECK(stats.csv().rfind("epoch,loss", 0) == 0);
}

TEST_CASE("thread count does not change the trained parameters") {
  SegmentationPlan plan = build_plan({5, 3}, {1, 0});
  ModelConfig cfg;
  cfg.num_layers = 1;
  cfg.model_dim = 8;
  cfg.num_heads = 2;
  cfg.ffn_dim = 8;
  cfg.vocab_size = 12;
  cfg.max_positions = plan.flattened_length();
  cfg.num_expert_slots = 1;

  std::vector<std::vector<int>> users;
  Rng rng(5);
  for (int u = 0; u < 10; ++u) {
    std::vector<int> seq;
    for (int t = 0; t < plan.total_items(); ++t)
      seq.push_back(static_cast<int>(rng.next_below(12)));
    users.push_back(seq);
  }
  // one short user exercises the single-segment fallback
  users.push_back({1, 2, 3});

  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  Model a = init_model(cfg);
  Model b = init_model(cfg);
  tc.threads = 1;
  train(a, users, plan, tc);
  tc.threads = 4;
  train(b, users, plan, tc);
  CHECK(a.params == b.params);
}

TEST_CASE("zero-expert single-segment plan matches the plain causal loss") {
  SegmentationPlan plan = build_plan({6}, {0});
  ModelConfig cfg;
  cfg.num_layers = 1;
  cfg.model_dim = 8;
  cfg.num_heads = 2;
  cfg.ffn_dim = 8;
  cfg.vocab_size = 9;
  cfg.max_positions = 6;
  Model m = init_model(cfg);
  TokenLayout layout = layout_plan(plan);
  LossMask lmask = loss_mask(layout);
  std::vector<int> items = {0, 3, 1, 4, 1, 5};
  std::vector<double> g1, g2;
  double l1 = loss_and_grads(m, layout, items, segmented_mask(plan), lmask, g1);
  double l2 = loss_and_grads(m, layout, items, causal_mask(6), lmask, g2);
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}
