#include <catch2/catch_amalgamated.hpp>

#include "persrec/seqcore.hpp"

using namespace persrec;

TEST_CASE("build_plan validates its inputs") {
  CHECK_THROWS_AS(build_plan({}, {}), Error);
  CHECK_THROWS_AS(build_plan({4, 4}, {1}), Error);
  CHECK_THROWS_AS(build_plan({4, 0}, {0, 0}), Error);
  CHECK_THROWS_AS(build_plan({4, -2}, {0, 0}), Error);
  CHECK_THROWS_AS(build_plan({4, 4}, {0, -1}), Error);
  try {
    build_plan({}, {});
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.name() == "EmptyPlan");
  }
  try {
    build_plan({3}, {1, 2});
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.name() == "MismatchedLengths");
  }
}

TEST_CASE("plan totals") {
  SegmentationPlan plan = build_plan({8, 12, 8, 16}, {2, 1, 0, 1});
  CHECK(plan.num_segments() == 4);
  CHECK(plan.total_items() == 44);
  CHECK(plan.total_experts() == 4);
  CHECK(plan.flattened_length() == 48);
}

TEST_CASE("plan hash distinguishes item/expert roles") {
  SegmentationPlan a = build_plan({2, 3}, {1, 0});
  SegmentationPlan b = build_plan({2, 3}, {0, 1});
  SegmentationPlan c = build_plan({2, 3}, {1, 0});
  CHECK(a.hash() != b.hash());
  CHECK(a.hash() == c.hash());
}

TEST_CASE("layout interleaves items and experts per segment") {
  SegmentationPlan plan = build_plan({3, 2}, {1, 1});
  TokenLayout layout = layout_plan(plan);
  REQUIRE(layout.size() == 7);

  CHECK(layout.slots[0].is_item());
  CHECK(layout.slots[2].is_item());
  CHECK(layout.slots[3].is_expert());
  CHECK(layout.slots[3].global_expert_index == 0);
  CHECK(layout.slots[4].is_item());
  CHECK(layout.slots[4].segment_index == 1);
  CHECK(layout.slots[6].is_expert());
  CHECK(layout.slots[6].global_expert_index == 1);

  // targets skip expert slots and cross the segment boundary
  REQUIRE(layout.target_of[0].has_value());
  CHECK(*layout.target_of[0] == 1);
  CHECK(*layout.target_of[1] == 2);
  CHECK(*layout.target_of[2] == 4);
  CHECK_FALSE(layout.target_of[3].has_value());
  CHECK(*layout.target_of[4] == 5);
  CHECK_FALSE(layout.target_of[5].has_value());
  CHECK_FALSE(layout.target_of[6].has_value());
}

TEST_CASE("layout_sequence checks event count") {
  SegmentationPlan plan = build_plan({3, 2}, {1, 1});
  std::vector<Event> events(4);
  try {
    layout_sequence(events, plan);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.name() == "LengthMismatch");
  }
  events.push_back({});
  CHECK_NOTHROW(layout_sequence(events, plan));
}

TEST_CASE("truncate_user keeps the most recent events") {
  std::vector<Event> events;
  for (int i = 0; i < 10; ++i) events.push_back({0, i, 0, i});
  auto cut = truncate_user(events, 4);
  REQUIRE(cut.size() == 4);
  CHECK(cut.front().item_id == 6);
  CHECK(cut.back().item_id == 9);
  CHECK(truncate_user(events, 20).size() == 10);
  CHECK_THROWS_AS(truncate_user(events, 0), Error);
}

TEST_CASE("item_ids_of projects in order") {
  std::vector<Event> events = {{0, 7, 0, 0}, {0, 3, 0, 1}, {0, 9, 0, 2}};
  CHECK(item_ids_of(events) == std::vector<int>{7, 3, 9});
}
