#include <catch2/catch_amalgamated.hpp>

#include "persrec/evalkit.hpp"

using namespace persrec;

namespace {

Model tiny_model(const SegmentationPlan& plan, int vocab, std::uint32_t seed) {
  ModelConfig cfg;
  cfg.num_layers = 1;
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

TEST_CASE("metric closed forms") {
  CHECK(recall_at_k(1, 10) == 1.0);
  CHECK(recall_at_k(10, 10) == 1.0);
  CHECK(recall_at_k(11, 10) == 0.0);
  CHECK(ndcg_at_k(1, 10) == 1.0);
  CHECK(ndcg_at_k(2, 10) == Catch::Approx(1.0 / std::log2(3.0)));
  CHECK(ndcg_at_k(10, 10) == Catch::Approx(1.0 / std::log2(11.0)));
  CHECK(ndcg_at_k(11, 10) == 0.0);
  CHECK_THROWS_AS(recall_at_k(0, 10), Error);
  CHECK_THROWS_AS(ndcg_at_k(-1, 10), Error);
}

TEST_CASE("rank_of breaks ties by ascending id") {
  std::vector<double> scores = {1.0, 5.0, 5.0, 0.0};
  CHECK(rank_of(scores, 1) == 1);
  CHECK(rank_of(scores, 2) == 2);
  CHECK(rank_of(scores, 0) == 3);
  CHECK(rank_of(scores, 3) == 4);
}

TEST_CASE("metrics_from_ranks averages per cutoff") {
  Metrics m = metrics_from_ranks({1, 3, 20}, {2, 10});
  CHECK(m.num_queries == 3);
  CHECK(m.recall_at[2] == Catch::Approx(1.0 / 3));
  CHECK(m.recall_at[10] == Catch::Approx(2.0 / 3));
  CHECK(m.ndcg_at[10] == Catch::Approx((1.0 + 1.0 / std::log2(4.0)) / 3));
  CHECK_THROWS_AS(metrics_from_ranks({}, {10}), Error);
}

TEST_CASE("random scores calibrate recall to K over vocab") {
  Rng rng(2024);
  const int vocab = 100;
  int hits = 0;
  const int trials = 2000;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> scores(vocab);
    for (double& s : scores) s = rng.next_double();
    int target = static_cast<int>(rng.next_below(vocab));
    hits += rank_of(scores, target) <= 10;
  }
  double recall = static_cast<double>(hits) / trials;
  CHECK(recall > 0.07);
  CHECK(recall < 0.13);
}

TEST_CASE("evaluate builds caches and scores the first test event") {
  SegmentationPlan plan = build_plan({4, 4}, {1, 0});
  const int vocab = 16;
  Model m = tiny_model(plan, vocab, 11);
  std::vector<std::vector<int>> train = {{0, 1, 2, 3, 4, 5, 6, 7},
                                         {8, 9, 10, 11, 12, 13, 14, 15}};
  std::vector<std::vector<int>> test = {{3, 4}, {9, 9}};
  Metrics metrics = evaluate(m, train, test, plan, {1, vocab});
  CHECK(metrics.num_queries == 2);
  CHECK(metrics.recall_at[vocab] == 1.0);
  // threading does not change the result
  Metrics threaded = evaluate(m, train, test, plan, {1, vocab}, 4);
  CHECK(threaded.recall_at[1] == metrics.recall_at[1]);
  CHECK(threaded.ndcg_at[vocab] == metrics.ndcg_at[vocab]);
  CHECK_THROWS_AS(evaluate(m, {}, {}, plan, {1}), Error);
}

TEST_CASE("decay offsets follow the stride and freeze the cache") {
  SegmentationPlan plan = build_plan({4, 4}, {1, 0});
  const int vocab = 16;
  Model m = tiny_model(plan, vocab, 12);
  std::vector<std::vector<int>> train = {{0, 1, 2, 3, 4, 5, 6, 7},
                                         {8, 9, 10, 11, 12, 13, 14, 15}};
  std::vector<std::vector<int>> test = {{1, 2, 3, 4, 5, 6, 7, 8, 9, 10},
                                        {2, 3, 4, 5, 6, 7, 8, 9, 10, 11}};
  DecaySeries series = decay_eval(m, train, test, plan, 4, 2, {5, vocab});
  REQUIRE(series.by_offset.size() == 4);  // offsets 0, 2, 4, 6
  CHECK(series.by_offset[0].first == 0);
  CHECK(series.by_offset[3].first == 6);
  for (std::uint32_t fp : series.cache_fingerprints)
    CHECK(fp == series.cache_fingerprints[0]);

  // offset zero with window == recent segment equals the standard evaluate
  Metrics direct = evaluate(m, train, test, plan, {5, vocab});
  CHECK(series.by_offset[0].second.recall_at[5] == direct.recall_at[5]);
  CHECK(series.by_offset[0].second.ndcg_at[vocab] == direct.ndcg_at[vocab]);

  CHECK(series.csv().rfind("offset,K,recall,ndcg", 0) == 0);
  try {
    decay_eval(m, train, test, plan, 11, 2, {5});
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.name() == "WindowTooLarge");
  }
}

TEST_CASE("placement comparison trains one model per setting") {
  std::vector<SegmentationPlan> settings = {build_plan({8}, {0}),
                                            build_plan({4, 4}, {1, 0})};
  const int vocab = 10;
  std::vector<std::vector<int>> train, test;
  for (int u = 0; u < 6; ++u) {
    std::vector<int> seq;
    for (int t = 0; t < 8; ++t) seq.push_back((u + t) % vocab);
    train.push_back(seq);
    test.push_back({(u + 8) % vocab});
  }
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 6;
  auto rows = placement_compare(
      [&](const SegmentationPlan& plan) { return tiny_model(plan, vocab, 1); },
      settings, train, test, tc, {5});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].setting == "segments=8 experts=0");
  CHECK(rows[1].setting == "segments=4|4 experts=1|0");
  CHECK(placement_csv(rows).rfind("setting,K,recall,ndcg", 0) == 0);

  std::vector<SegmentationPlan> bad = {build_plan({8}, {0}), build_plan({9}, {0})};
  try {
    placement_compare(
        [&](const SegmentationPlan& plan) { return tiny_model(plan, vocab, 1); },
        bad, train, test, tc, {5});
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.name() == "InconsistentTotals");
  }
}
