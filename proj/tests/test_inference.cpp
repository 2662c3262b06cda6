#include <catch2/catch_amalgamated.hpp>

#include "persrec/inference.hpp"

using namespace persrec;

namespace {

Model random_model(const SegmentationPlan& plan, int vocab, std::uint32_t seed) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.model_dim = 8;
  cfg.num_heads = 2;
  cfg.ffn_dim = 8;
  cfg.vocab_size = vocab;
  cfg.max_positions = plan.flattened_length();
  cfg.num_expert_slots = plan.total_experts();
  cfg.seed = seed;
  return init_model(cfg);
}

}  // namespace

TEST_CASE("cached scoring equals the flattened segmented forward") {
  Rng rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    SegmentationPlan plan = build_plan({4, 3, 5}, {2, 1, 0});
    const int vocab = 16;
    Model m = random_model(plan, vocab, 1000 + trial);
    std::vector<int> items;
    for (int i = 0; i < plan.total_items(); ++i)
      items.push_back(static_cast<int>(rng.next_below(vocab)));

    TokenLayout layout = layout_plan(plan);
    AttentionMask mask = segmented_mask(plan);
    ForwardTrace flat = forward(m, layout, items, mask);

    std::vector<int> prefix(items.begin(), items.begin() + 7);
    std::vector<int> recent(items.begin() + 7, items.end());
    ExpertCache cache = compress_segments(m, prefix, plan);
    std::vector<double> cached = score_last(m, cache, recent);

    const int last = layout.size() - 1;
    for (int v = 0; v < vocab; ++v) {
      double a = flat.logits[static_cast<std::size_t>(last) * vocab + v];
      double b = cached[v];
      REQUIRE(std::abs(a - b) <= 1e-5 * std::max(1.0, std::abs(a)));
    }
    // identical rankings
    auto ra = top_k_of(std::vector<double>(
                           flat.logits.end() - vocab, flat.logits.end()),
                       vocab);
    auto rb = top_k_of(cached, vocab);
    for (int i = 0; i < vocab; ++i)
      REQUIRE(ra.items[i].first == rb.items[i].first);
  }
}

TEST_CASE("cache metadata and shape") {
  SegmentationPlan plan = build_plan({4, 3, 5}, {2, 1, 0});
  Model m = random_model(plan, 16, 3);
  std::vector<int> prefix = {0, 1, 2, 3, 4, 5, 6};
  ExpertCache cache = compress_segments(m, prefix, plan);
  CHECK(cache.layers == 2);
  CHECK(cache.dim == 8);
  CHECK(cache.expert_count() == 3);
  CHECK(cache.prefix_flat_length == 10);  // 4+2+3+1
  CHECK(cache.plan_hash == plan.hash());
  CHECK(cache.checkpoint_crc == model_crc(m));
  // expert positions are the flattened slots 4, 5 and 9
  CHECK(cache.per_layer[0][0].position == 4);
  CHECK(cache.per_layer[0][1].position == 5);
  CHECK(cache.per_layer[0][2].position == 9);

  try {
    compress_segments(m, {0, 1, 2}, plan);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.name() == "PlanMismatch");
  }
}

TEST_CASE("scoring never mutates the cache") {
  SegmentationPlan plan = build_plan({4, 4}, {2, 0});
  Model m = random_model(plan, 16, 4);
  ExpertCache cache = compress_segments(m, {0, 1, 2, 3}, plan);
  std::uint32_t before = cache_fingerprint(cache);
  score_last(m, cache, {4, 5, 6, 7});
  score_last(m, cache, {8, 9});
  CHECK(cache_fingerprint(cache) == before);
}

TEST_CASE("cold start uses an empty cache") {
  SegmentationPlan plan = build_plan({6}, {0});
  Model m = random_model(plan, 16, 5);
  ExpertCache cache = empty_cache(m);
  CHECK(cache.expert_count() == 0);
  auto scores = score_last(m, cache, {0, 1, 2});
  REQUIRE(static_cast<int>(scores.size()) == 16);

  // matches the plain causal forward over the same items
  SegmentationPlan p3 = build_plan({3}, {0});
  ForwardTrace flat = forward(m, layout_plan(p3), {0, 1, 2}, causal_mask(3));
  for (int v = 0; v < 16; ++v)
    CHECK(scores[v] == Catch::Approx(flat.logits[2 * 16 + v]).margin(1e-12));
}

TEST_CASE("score_last input validation and position saturation") {
  SegmentationPlan plan = build_plan({4, 4}, {2, 0});
  Model m = random_model(plan, 16, 6);
  ExpertCache cache = compress_segments(m, {0, 1, 2, 3}, plan);
  CHECK_THROWS_AS(score_last(m, cache, {}), Error);
  // max_positions is 10; an 8-item window saturates the start position
  CHECK_NOTHROW(score_last(m, cache, {0, 1, 2, 3, 4, 5, 6, 7}));
  CHECK_THROWS_AS(score_last(m, cache, std::vector<int>(11, 0)), Error);
}

TEST_CASE("top_k_of orders by score then id") {
  std::vector<double> scores = {0.5, 2.0, 2.0, -1.0, 3.0};
  Recommendation rec = top_k_of(scores, 4);
  REQUIRE(rec.items.size() == 4);
  CHECK(rec.items[0].first == 4);
  CHECK(rec.items[1].first == 1);  // tie broken by ascending id
  CHECK(rec.items[2].first == 2);
  CHECK(rec.items[3].first == 0);
  CHECK_THROWS_AS(top_k_of(scores, 0), Error);
  CHECK_THROWS_AS(top_k_of(scores, 6), Error);
}

TEST_CASE("autoregress rolls the recent window and reuses the cache") {
  SegmentationPlan plan = build_plan({4, 4}, {1, 0});
  Model m = random_model(plan, 16, 7);
  ExpertCache cache = compress_segments(m, {0, 1, 2, 3}, plan);
  std::uint32_t before = cache_fingerprint(cache);

  auto steps = autoregress(m, cache, {4, 5, 6, 7}, 3, 2);
  REQUIRE(steps.size() == 3);
  for (const auto& rec : steps) REQUIRE(rec.items.size() == 2);
  CHECK(cache_fingerprint(cache) == before);

  // the first step equals a plain recommend call
  Recommendation direct = recommend(m, cache, {4, 5, 6, 7}, 2);
  CHECK(steps[0].items == direct.items);

  // the second step scores the window advanced by the greedy pick
  Recommendation manual =
      recommend(m, cache, {5, 6, 7, direct.items[0].first}, 2);
  CHECK(steps[1].items == manual.items);
}
