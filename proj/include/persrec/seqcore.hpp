#pragma once

#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "persrec/common.hpp"

namespace persrec {

// One user-item interaction.
struct Event {
  std::int64_t user_id = 0;
  int item_id = 0;     // dense id in [0, vocab_size)
  int event_type = 0;  // small action code, carried but not embedded
  std::int64_t timestamp = 0;
};

struct Dataset {
  std::vector<std::vector<Event>> users;  // each sorted by timestamp
  int vocab_size = 0;
  std::string metadata;
};

// Segment lengths plus experts appended after each segment. The last
// segment may carry experts too, but conventionally has none.
struct SegmentationPlan {
  std::vector<int> segment_lengths;
  std::vector<int> experts_per_segment;

  int num_segments() const { return static_cast<int>(segment_lengths.size()); }
  int total_items() const {
    return std::accumulate(segment_lengths.begin(), segment_lengths.end(), 0);
  }
  int total_experts() const {
    return std::accumulate(experts_per_segment.begin(),
                           experts_per_segment.end(), 0);
  }
  int flattened_length() const { return total_items() + total_experts(); }

  std::uint32_t hash() const {
    std::uint32_t h = 0x811c9dc5u;
    for (int v : segment_lengths) h = fnv1a32(&v, sizeof(v), h);
    h = fnv1a32("|", 1, h);
    for (int v : experts_per_segment) h = fnv1a32(&v, sizeof(v), h);
    return h;
  }
};

inline SegmentationPlan build_plan(std::vector<int> segment_lengths,
                                   std::vector<int> experts_per_segment) {
  if (segment_lengths.empty()) fail("EmptyPlan", "need at least one segment");
  if (segment_lengths.size() != experts_per_segment.size())
    fail("MismatchedLengths",
         "segment_lengths and experts_per_segment differ in length");
  for (int len : segment_lengths)
    if (len <= 0) fail("NonPositiveSegment", "segment length must be > 0");
  for (int k : experts_per_segment)
    if (k < 0) fail("NonPositiveSegment", "expert count must be >= 0");
  return SegmentationPlan{std::move(segment_lengths),
                          std::move(experts_per_segment)};
}

struct Slot {
  enum class Kind { Item, Expert };
  Kind kind = Kind::Item;
  int segment_index = 0;
  int within_segment_index = 0;  // item index or expert index within segment
  int global_expert_index = -1;  // dense in [0, k), Expert slots only

  bool is_item() const { return kind == Kind::Item; }
  bool is_expert() const { return kind == Kind::Expert; }
};

// Flattened [items_0, experts_0, items_1, experts_1, ...] layout with the
// next-item target mapping. Expert slots and the chronologically last item
// have no target; segment boundaries are crossed (the last item of segment
// j targets the first item of segment j+1).
struct TokenLayout {
  std::vector<Slot> slots;
  std::vector<std::optional<int>> target_of;  // per slot, target slot index
  SegmentationPlan plan;

  int size() const { return static_cast<int>(slots.size()); }
};

inline TokenLayout layout_plan(const SegmentationPlan& plan) {
  TokenLayout layout;
  layout.plan = plan;
  int global_expert = 0;
  for (int seg = 0; seg < plan.num_segments(); ++seg) {
    for (int i = 0; i < plan.segment_lengths[seg]; ++i)
      layout.slots.push_back({Slot::Kind::Item, seg, i, -1});
    for (int e = 0; e < plan.experts_per_segment[seg]; ++e)
      layout.slots.push_back({Slot::Kind::Expert, seg, e, global_expert++});
  }
  layout.target_of.assign(layout.slots.size(), std::nullopt);
  int prev_item = -1;
  for (int p = 0; p < layout.size(); ++p) {
    if (!layout.slots[p].is_item()) continue;
    if (prev_item >= 0) layout.target_of[prev_item] = p;
    prev_item = p;
  }
  return layout;
}

inline TokenLayout layout_sequence(const std::vector<Event>& events,
                                   const SegmentationPlan& plan) {
  if (static_cast<int>(events.size()) != plan.total_items())
    fail("LengthMismatch", "got " + std::to_string(events.size()) +
                               " events for a plan of " +
                               std::to_string(plan.total_items()) + " items");
  return layout_plan(plan);
}

// Most recent max_len events; shorter sequences pass through unchanged.
inline std::vector<Event> truncate_user(const std::vector<Event>& events,
                                        int max_len) {
  if (max_len < 1) fail("NonPositiveSegment", "max_len must be >= 1");
  if (static_cast<int>(events.size()) <= max_len) return events;
  return std::vector<Event>(events.end() - max_len, events.end());
}

// Item ids of the item slots, in flattened order (identity projection since
// expert slots carry no item).
inline std::vector<int> item_ids_of(const std::vector<Event>& events) {
  std::vector<int> ids;
  ids.reserve(events.size());
  for (const Event& e : events) ids.push_back(e.item_id);
  return ids;
}

}  // namespace persrec
