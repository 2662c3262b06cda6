#pragma once

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "persrec/datakit.hpp"
#include "persrec/inference.hpp"
#include "persrec/trainer.hpp"

namespace persrec {

// Single relevant item per query: recall@K is a hit indicator and NDCG@K
// collapses to 1/log2(1+rank).
inline double recall_at_k(int rank_of_target, int k) {
  if (rank_of_target < 1) fail("InvalidConfig", "rank must be >= 1");
  return rank_of_target <= k ? 1.0 : 0.0;
}

inline double ndcg_at_k(int rank_of_target, int k) {
  if (rank_of_target < 1) fail("InvalidConfig", "rank must be >= 1");
  if (rank_of_target > k) return 0.0;
  return 1.0 / std::log2(1.0 + rank_of_target);
}

// 1-based rank of target under descending score, ties broken by ascending id.
inline int rank_of(const std::vector<double>& scores, int target) {
  int rank = 1;
  const double st = scores[target];
  for (int v = 0; v < static_cast<int>(scores.size()); ++v) {
    if (scores[v] > st || (scores[v] == st && v < target)) ++rank;
  }
  return rank;
}

struct Metrics {
  std::map<int, double> recall_at;
  std::map<int, double> ndcg_at;
  int num_queries = 0;
};

inline Metrics metrics_from_ranks(const std::vector<int>& ranks,
                                  const std::vector<int>& ks) {
  if (ranks.empty()) fail("EmptyEvalSet", "no queries");
  Metrics m;
  m.num_queries = static_cast<int>(ranks.size());
  for (int k : ks) {
    double r = 0, n = 0;
    for (int rank : ranks) {
      r += recall_at_k(rank, k);
      n += ndcg_at_k(rank, k);
    }
    m.recall_at[k] = r / m.num_queries;
    m.ndcg_at[k] = n / m.num_queries;
  }
  return m;
}

// One scored query: expert cache (possibly empty) plus a recent window,
// target ranked over the full vocabulary.
struct EvalQuery {
  const ExpertCache* cache = nullptr;
  std::vector<int> recent;
  int target = 0;
};

inline std::vector<int> rank_queries(const Model& model,
                                     const std::vector<EvalQuery>& queries,
                                     int threads = 1) {
  std::vector<int> ranks(queries.size(), 0);
  auto worker = [&](int tid) {
    for (std::size_t i = tid; i < queries.size();
         i += static_cast<std::size_t>(threads)) {
      auto scores = score_last(model, *queries[i].cache, queries[i].recent);
      ranks[i] = rank_of(scores, queries[i].target);
    }
  };
  if (threads <= 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
    for (auto& t : pool) t.join();
  }
  return ranks;
}

// Builds per-user caches from the plan's compressed segments and scores the
// first test event after the training window.
struct PreparedEval {
  std::vector<ExpertCache> caches;  // one per user
  SegmentationPlan plan;
};

inline PreparedEval prepare_caches(const Model& model,
                                   const std::vector<std::vector<int>>& train,
                                   const SegmentationPlan& plan,
                                   int threads = 1) {
  PreparedEval prep;
  prep.plan = plan;
  prep.caches.resize(train.size());
  int prefix_items = 0;
  for (int s = 0; s + 1 < plan.num_segments(); ++s)
    prefix_items += plan.segment_lengths[s];
  auto worker = [&](int tid) {
    for (std::size_t u = tid; u < train.size();
         u += static_cast<std::size_t>(threads)) {
      if (static_cast<int>(train[u].size()) != plan.total_items())
        fail("LengthMismatch", "user train length does not match plan");
      std::vector<int> prefix(train[u].begin(), train[u].begin() + prefix_items);
      prep.caches[u] = compress_segments(model, prefix, plan);
    }
  };
  if (threads <= 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
    for (auto& t : pool) t.join();
  }
  return prep;
}

inline Metrics evaluate(const Model& model,
                        const std::vector<std::vector<int>>& train,
                        const std::vector<std::vector<int>>& test,
                        const SegmentationPlan& plan, const std::vector<int>& ks,
                        int threads = 1) {
  if (train.empty() || test.empty() || test[0].empty())
    fail("EmptyEvalSet", "need train sequences and at least one test event");
  PreparedEval prep = prepare_caches(model, train, plan, threads);
  const int recent_len = plan.segment_lengths.back();
  std::vector<EvalQuery> queries(train.size());
  for (std::size_t u = 0; u < train.size(); ++u) {
    queries[u].cache = &prep.caches[u];
    queries[u].recent.assign(train[u].end() - recent_len, train[u].end());
    queries[u].target = test[u][0];
  }
  return metrics_from_ranks(rank_queries(model, queries, threads), ks);
}

// ---- decay protocol ----------------------------------------------------
// The expert cache is frozen once from the pretrain segment; the recent
// window slides forward from the training recent segment across the test
// span. Offset o scores window [pretrain+o, pretrain+o+window) of the
// concatenated train+test sequence against target train_len+o.

struct DecaySeries {
  std::vector<std::pair<int, Metrics>> by_offset;
  std::vector<std::uint32_t> cache_fingerprints;  // one per offset

  std::string csv() const {
    std::string out = "offset,K,recall,ndcg\n";
    for (const auto& [off, m] : by_offset)
      for (const auto& [k, r] : m.recall_at)
        out += std::to_string(off) + "," + std::to_string(k) + "," +
               std::to_string(r) + "," + std::to_string(m.ndcg_at.at(k)) + "\n";
    return out;
  }
};

inline DecaySeries decay_eval(const Model& model,
                              const std::vector<std::vector<int>>& train,
                              const std::vector<std::vector<int>>& test,
                              const SegmentationPlan& plan, int window,
                              int stride, const std::vector<int>& ks,
                              int threads = 1) {
  if (test.empty() || window > static_cast<int>(test[0].size()))
    fail("WindowTooLarge", "window exceeds the test span");
  if (stride < 1) fail("InvalidConfig", "stride must be >= 1");
  PreparedEval prep = prepare_caches(model, train, plan, threads);
  std::uint32_t fp0 = cache_fingerprint(prep.caches[0]);

  DecaySeries series;
  const int test_len = static_cast<int>(test[0].size());
  for (int off = 0; off + window <= test_len; off += stride) {
    std::vector<EvalQuery> queries(train.size());
    for (std::size_t u = 0; u < train.size(); ++u) {
      // window over the concatenation of train and test
      std::vector<int> full;
      full.reserve(train[u].size() + test[u].size());
      full.insert(full.end(), train[u].begin(), train[u].end());
      full.insert(full.end(), test[u].begin(), test[u].end());
      const int pretrain = plan.total_items() - window;
      const int begin = pretrain + off;
      queries[u].cache = &prep.caches[u];
      queries[u].recent.assign(full.begin() + begin, full.begin() + begin + window);
      queries[u].target = full[begin + window];
    }
    series.by_offset.push_back(
        {off, metrics_from_ranks(rank_queries(model, queries, threads), ks)});
    series.cache_fingerprints.push_back(cache_fingerprint(prep.caches[0]));
  }
  for (std::uint32_t fp : series.cache_fingerprints)
    if (fp != fp0) fail("BadCache", "cache mutated during decay evaluation");
  return series;
}

// ---- placement study ---------------------------------------------------

struct PlacementRow {
  std::string setting;
  Metrics metrics;
};

inline std::string placement_csv(const std::vector<PlacementRow>& rows) {
  std::string out = "setting,K,recall,ndcg\n";
  for (const auto& row : rows)
    for (const auto& [k, r] : row.metrics.recall_at)
      out += row.setting + "," + std::to_string(k) + "," + std::to_string(r) +
             "," + std::to_string(row.metrics.ndcg_at.at(k)) + "\n";
  return out;
}

inline std::string plan_to_string(const SegmentationPlan& plan) {
  std::ostringstream os;
  os << "segments=";
  for (std::size_t i = 0; i < plan.segment_lengths.size(); ++i)
    os << (i ? "|" : "") << plan.segment_lengths[i];
  os << " experts=";
  for (std::size_t i = 0; i < plan.experts_per_segment.size(); ++i)
    os << (i ? "|" : "") << plan.experts_per_segment[i];
  return os.str();
}

// Trains one fresh model per setting with shared seeds and evaluates each.
template <typename ModelFactory>
inline std::vector<PlacementRow> placement_compare(
    ModelFactory&& make_model, const std::vector<SegmentationPlan>& settings,
    const std::vector<std::vector<int>>& train,
    const std::vector<std::vector<int>>& test, const TrainConfig& tcfg,
    const std::vector<int>& ks) {
  if (settings.empty()) fail("InvalidConfig", "no settings");
  const int total = settings.front().total_items();
  for (const auto& plan : settings)
    if (plan.total_items() != total)
      fail("InconsistentTotals", "settings must share total_items");
  std::vector<PlacementRow> rows;
  for (const auto& plan : settings) {
    Model model = make_model(plan);
    persrec::train(model, train, plan, tcfg);
    rows.push_back(
        {plan_to_string(plan), evaluate(model, train, test, plan, ks, tcfg.threads)});
  }
  return rows;
}

}  // namespace persrec
