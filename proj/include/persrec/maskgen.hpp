#pragma once

#include <string>
#include <vector>

#include "persrec/seqcore.hpp"

namespace persrec {

// Rectangular region of allowed attention. When causal_diag is set the
// block is square on the diagonal and only entries with col <= row hold.
struct MaskBlock {
  int row_begin = 0, row_end = 0;
  int col_begin = 0, col_end = 0;
  bool causal_diag = false;

  // number of allowed (row, col) pairs in this block
  long long pair_count() const {
    long long rows = row_end - row_begin;
    long long cols = col_end - col_begin;
    if (!causal_diag) return rows * cols;
    return rows * (rows + 1) / 2;
  }
};

// bits[i][j] = true means position i may attend to position j (j <= i).
struct AttentionMask {
  int n = 0;
  std::vector<char> bits;  // row-major n*n
  std::vector<MaskBlock> blocks;

  bool at(int i, int j) const { return bits[static_cast<std::size_t>(i) * n + j] != 0; }
  void set(int i, int j, bool v) { bits[static_cast<std::size_t>(i) * n + j] = v ? 1 : 0; }

  long long allowed_pairs() const {
    long long total = 0;
    for (const MaskBlock& b : blocks) total += b.pair_count();
    return total;
  }

  std::string dump() const {
    std::string out;
    out.reserve(static_cast<std::size_t>(n) * (n + 1));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) out += at(i, j) ? '1' : '0';
      out += '\n';
    }
    return out;
  }
};

inline AttentionMask causal_mask(int n) {
  if (n < 1) fail("NonPositiveSegment", "mask side must be >= 1");
  AttentionMask m;
  m.n = n;
  m.bits.assign(static_cast<std::size_t>(n) * n, 0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) m.set(i, j, true);
  m.blocks.push_back({0, n, 0, n, true});
  return m;
}

// Causal base with cross-segment item attention removed: rows of segment i
// (items and experts alike) lose the columns of every earlier segment's
// items, while earlier experts stay visible.
inline AttentionMask segmented_mask(const SegmentationPlan& plan) {
  const int n = plan.flattened_length();
  AttentionMask m = causal_mask(n);
  m.blocks.clear();

  const int num_segments = plan.num_segments();
  std::vector<int> seg_begin(num_segments);  // first row of segment (items)
  int offset = 0;
  for (int i = 0; i < num_segments; ++i) {
    seg_begin[i] = offset;
    offset += plan.segment_lengths[i] + plan.experts_per_segment[i];
  }

  for (int i = 0; i < num_segments; ++i) {
    const int row_begin = seg_begin[i];
    const int row_end =
        row_begin + plan.segment_lengths[i] + plan.experts_per_segment[i];
    for (int j = 0; j < i; ++j) {
      const int item_begin = seg_begin[j];
      const int item_end = item_begin + plan.segment_lengths[j];
      for (int r = row_begin; r < row_end; ++r)
        for (int c = item_begin; c < item_end; ++c) m.set(r, c, false);
      // earlier experts remain attendable
      const int exp_begin = item_end;
      const int exp_end = exp_begin + plan.experts_per_segment[j];
      if (exp_end > exp_begin)
        m.blocks.push_back({row_begin, row_end, exp_begin, exp_end, false});
    }
    m.blocks.push_back({row_begin, row_end, row_begin, row_end, true});
  }
  return m;
}

// include[p] is true iff slot p contributes to the next-item loss.
struct LossMask {
  std::vector<char> include;

  int included_count() const {
    int c = 0;
    for (char v : include) c += v != 0;
    return c;
  }
};

inline LossMask loss_mask(const TokenLayout& layout) {
  LossMask m;
  m.include.resize(layout.size());
  for (int p = 0; p < layout.size(); ++p)
    m.include[p] =
        (layout.slots[p].is_item() && layout.target_of[p].has_value()) ? 1 : 0;
  return m;
}

}  // namespace persrec
