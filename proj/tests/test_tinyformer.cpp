#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>

#include "persrec/maskgen.hpp"
#include "persrec/tinyformer.hpp"

using namespace persrec;

namespace {

ModelConfig small_config(const SegmentationPlan& plan, int vocab = 12) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.model_dim = 8;
  cfg.num_heads = 2;
  cfg.ffn_dim = 6;
  cfg.vocab_size = vocab;
  cfg.max_positions = plan.flattened_length();
  cfg.num_expert_slots = plan.total_experts();
  cfg.seed = 7;
  return cfg;
}

std::vector<int> random_items(Rng& rng, int count, int vocab) {
  std::vector<int> items;
  for (int i = 0; i < count; ++i)
    items.push_back(static_cast<int>(rng.next_below(vocab)));
  return items;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg;
  cfg.vocab_size = 10;
  cfg.max_positions = 10;
  CHECK_NOTHROW(validate_config(cfg));
  cfg.num_heads = 3;  // does not divide model_dim 32
  CHECK_THROWS_AS(validate_config(cfg), Error);
  cfg.num_heads = 2;
  cfg.vocab_size = 0;
  CHECK_THROWS_AS(validate_config(cfg), Error);
}

TEST_CASE("parameter layout and count") {
  SegmentationPlan plan = build_plan({3, 2}, {1, 1});
  ModelConfig cfg = small_config(plan);
  Model m = init_model(cfg);
  const std::size_t d = cfg.model_dim, f = cfg.ffn_dim;
  std::size_t expected = cfg.vocab_size * d + cfg.num_expert_slots * d +
                         cfg.max_positions * d +
                         cfg.num_layers * (4 * d * d + 2 * d * f + 2 * d) + d;
  CHECK(m.param_count() == expected);

  // every declared tensor slice is disjoint and covers the whole vector
  std::size_t covered = 0;
  std::set<std::string> families;
  for (const TensorRef& t : m.tensors) {
    CHECK(t.offset == covered);
    covered += t.size();
    families.insert(t.family);
  }
  CHECK(covered == m.param_count());
  CHECK(families.size() == 12);
}

TEST_CASE("initialization is seed-deterministic") {
  SegmentationPlan plan = build_plan({3, 2}, {1, 1});
  ModelConfig cfg = small_config(plan);
  Model a = init_model(cfg);
  Model b = init_model(cfg);
  CHECK(a.params == b.params);
  cfg.seed = 8;
  Model c = init_model(cfg);
  CHECK(a.params != c.params);
  // norm gains start at one
  CHECK(a.params[a.g_final] == 1.0);
}

TEST_CASE("forward is deterministic and rejects bad ids") {
  SegmentationPlan plan = build_plan({3, 2}, {1, 0});
  Model m = init_model(small_config(plan));
  TokenLayout layout = layout_plan(plan);
  AttentionMask mask = segmented_mask(plan);
  std::vector<int> items = {0, 1, 2, 3, 4};
  ForwardTrace t1 = forward(m, layout, items, mask);
  ForwardTrace t2 = forward(m, layout, items, mask);
  CHECK(t1.logits == t2.logits);
  CHECK(static_cast<int>(t1.layer_hidden.size()) == m.cfg.num_layers);

  items[0] = 99;
  try {
    forward(m, layout, items, mask);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.name() == "VocabOverflow");
  }
}

TEST_CASE("gradients match central finite differences per family") {
  SegmentationPlan plan = build_plan({3, 2}, {1, 1});
  Model m = init_model(small_config(plan));
  TokenLayout layout = layout_plan(plan);
  AttentionMask mask = segmented_mask(plan);
  LossMask lmask = loss_mask(layout);
  Rng rng(42);
  std::vector<int> items = random_items(rng, plan.total_items(), m.cfg.vocab_size);

  std::vector<double> grads;
  loss_and_grads(m, layout, items, mask, lmask, grads);

  const double eps = 1e-5;
  for (const TensorRef& t : m.tensors) {
    for (int s = 0; s < 5; ++s) {
      std::size_t i = t.offset + rng.next_below(t.size());
      double keep = m.params[i];
      std::vector<double> dummy;
      m.params[i] = keep + eps;
      double lp = loss_and_grads(m, layout, items, mask, lmask, dummy);
      m.params[i] = keep - eps;
      double lm = loss_and_grads(m, layout, items, mask, lmask, dummy);
      m.params[i] = keep;
      double numeric = (lp - lm) / (2 * eps);
      double denom = std::max({1e-6, std::abs(numeric), std::abs(grads[i])});
      INFO(t.name << " index " << i - t.offset);
      CHECK(std::abs(grads[i] - numeric) / denom < 1e-4);
    }
  }
}

TEST_CASE("loss mask with no included slots is rejected") {
  SegmentationPlan plan = build_plan({3}, {0});
  Model m = init_model(small_config(plan));
  TokenLayout layout = layout_plan(plan);
  AttentionMask mask = segmented_mask(plan);
  LossMask lmask;
  lmask.include.assign(3, 0);
  std::vector<double> grads;
  try {
    loss_and_grads(m, layout, {0, 1, 2}, mask, lmask, grads);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.name() == "NoIncludedSlots");
  }
}

TEST_CASE("without experts a later segment ignores earlier content") {
  SegmentationPlan plan = build_plan({2, 3}, {0, 0});
  Model m = init_model(small_config(plan));
  TokenLayout layout = layout_plan(plan);
  AttentionMask mask = segmented_mask(plan);
  std::vector<int> items = {0, 1, 2, 3, 4};
  ForwardTrace base = forward(m, layout, items, mask);
  items[0] = 5;
  ForwardTrace poked = forward(m, layout, items, mask);
  const int vocab = m.cfg.vocab_size;
  for (int p = 2; p < 5; ++p)
    for (int v = 0; v < vocab; ++v)
      REQUIRE(base.logits[p * vocab + v] == poked.logits[p * vocab + v]);
  // rows of segment 0 do change
  CHECK(base.logits[0] != poked.logits[0]);
}

TEST_CASE("with an expert the earlier content does reach later segments") {
  SegmentationPlan plan = build_plan({2, 3}, {1, 0});
  Model m = init_model(small_config(plan));
  TokenLayout layout = layout_plan(plan);
  AttentionMask mask = segmented_mask(plan);
  std::vector<int> items = {0, 1, 2, 3, 4};
  ForwardTrace base = forward(m, layout, items, mask);
  items[0] = 5;
  ForwardTrace poked = forward(m, layout, items, mask);
  const int vocab = m.cfg.vocab_size;
  double diff = 0;
  for (int v = 0; v < vocab; ++v)
    diff += std::abs(base.logits[4 * vocab + v] - poked.logits[4 * vocab + v]);
  CHECK(diff > 0);
}

TEST_CASE("tokens_from_layout assigns ids, slots and positions") {
  SegmentationPlan plan = build_plan({2, 1}, {1, 1});
  TokenLayout layout = layout_plan(plan);
  auto tokens = tokens_from_layout(layout, {7, 8, 9});
  REQUIRE(tokens.size() == 5);
  CHECK_FALSE(tokens[0].is_expert);
  CHECK(tokens[0].index == 7);
  CHECK(tokens[2].is_expert);
  CHECK(tokens[2].index == 0);
  CHECK(tokens[3].index == 9);
  CHECK(tokens[4].is_expert);
  CHECK(tokens[4].index == 1);
  for (int p = 0; p < 5; ++p) CHECK(tokens[p].position == p);
  CHECK_THROWS_AS(tokens_from_layout(layout, {7, 8}), Error);
}
