#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "persrec/common.hpp"
#include "persrec/seqcore.hpp"

namespace persrec {

// Clustered-preference generator: each user owns a base cluster; events
// come from it with probability p_long, otherwise from uniform noise or a
// drifting foreign cluster. Item popularity within a cluster follows a
// per-user Zipf permutation, so longer histories reveal more about a
// user's hot items.
struct SyntheticConfig {
  int num_users = 1000;
  int vocab_size = 2048;
  int num_clusters = 16;
  int seq_len = 100;
  double p_long = 0.7;        // long-term affinity to the base cluster
  double noise_floor = 0.7;   // share of off-cluster mass that is uniform
  double drift_rate = 0.05;   // per-event chance the drift cluster re-rolls
  double zipf_exponent = 1.1;
  std::uint32_t seed = 0;
};

inline void validate_synthetic_config(const SyntheticConfig& cfg) {
  if (cfg.num_users < 1 || cfg.vocab_size < 1 || cfg.num_clusters < 1 ||
      cfg.seq_len < 1)
    fail("InvalidConfig", "counts must be >= 1");
  if (cfg.vocab_size % cfg.num_clusters != 0)
    fail("InvalidConfig", "vocab_size must divide into num_clusters");
  if (cfg.p_long < 0 || cfg.p_long > 1 || cfg.noise_floor < 0 ||
      cfg.noise_floor > 1 || cfg.drift_rate < 0 || cfg.drift_rate > 1)
    fail("InvalidConfig", "probabilities must be in [0, 1]");
}

namespace detail {

// CDF sampling keeps the generator independent of library distributions.
inline int sample_cdf(const std::vector<double>& cdf, Rng& rng) {
  double u = rng.next_double() * cdf.back();
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  if (it == cdf.end()) --it;
  return static_cast<int>(it - cdf.begin());
}

}  // namespace detail

struct SyntheticDataset {
  Dataset data;
  std::vector<int> user_cluster;  // base cluster per user
};

inline SyntheticDataset generate_synthetic_with_labels(
    const SyntheticConfig& cfg) {
  validate_synthetic_config(cfg);
  const int cluster_size = cfg.vocab_size / cfg.num_clusters;
  std::vector<double> zipf_cdf(cluster_size);
  double acc = 0;
  for (int i = 0; i < cluster_size; ++i) {
    acc += 1.0 / std::pow(static_cast<double>(i + 1), cfg.zipf_exponent);
    zipf_cdf[i] = acc;
  }

  SyntheticDataset out;
  out.data.vocab_size = cfg.vocab_size;
  out.data.metadata = "synthetic clustered preferences";
  Rng rng(0xda7a5e7ull ^ (static_cast<std::uint64_t>(cfg.seed) << 1));
  for (int u = 0; u < cfg.num_users; ++u) {
    const int base_cluster = static_cast<int>(rng.next_below(cfg.num_clusters));
    out.user_cluster.push_back(base_cluster);
    // user's private popularity order within any cluster
    std::vector<int> rank(cluster_size);
    for (int i = 0; i < cluster_size; ++i) rank[i] = i;
    rng.shuffle(rank);
    int drift_cluster = static_cast<int>(rng.next_below(cfg.num_clusters));
    std::vector<Event> seq;
    seq.reserve(cfg.seq_len);
    for (int t = 0; t < cfg.seq_len; ++t) {
      if (rng.next_double() < cfg.drift_rate)
        drift_cluster = static_cast<int>(rng.next_below(cfg.num_clusters));
      int item;
      double r = rng.next_double();
      if (r < cfg.p_long) {
        item = base_cluster * cluster_size + rank[detail::sample_cdf(zipf_cdf, rng)];
      } else if (rng.next_double() < cfg.noise_floor) {
        item = static_cast<int>(rng.next_below(cfg.vocab_size));
      } else {
        item = drift_cluster * cluster_size + rank[detail::sample_cdf(zipf_cdf, rng)];
      }
      seq.push_back({u, item, static_cast<int>(rng.next_below(6)), t});
    }
    out.data.users.push_back(std::move(seq));
  }
  return out;
}

inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  return generate_synthetic_with_labels(cfg).data;
}

// ---- TSV ingestion -----------------------------------------------------
// header: user_id \t item_id \t event_type \t timestamp

struct IngestResult {
  Dataset data;
  std::vector<std::int64_t> item_original_of_new;  // dense id -> original id
};

inline IngestResult ingest_tsv_stream(std::istream& in, int min_events,
                                      int max_events) {
  std::string line;
  if (!std::getline(in, line)) fail("MissingColumn", "empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "user_id\titem_id\tevent_type\ttimestamp")
    fail("MissingColumn", "expected header user_id/item_id/event_type/timestamp");

  struct RawEvent {
    std::int64_t user, item, type, ts;
    long long file_order;
  };
  std::map<std::int64_t, std::vector<RawEvent>> by_user;
  long long line_no = 1;
  long long order = 0;
  auto parse_int = [&](const std::string& s, std::int64_t& out) {
    if (s.empty()) return false;
    std::size_t pos = 0;
    try {
      out = std::stoll(s, &pos);
    } catch (...) {
      return false;
    }
    return pos == s.size();
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      std::size_t tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    RawEvent ev{};
    if (cols.size() != 4 || !parse_int(cols[0], ev.user) ||
        !parse_int(cols[1], ev.item) || !parse_int(cols[2], ev.type) ||
        !parse_int(cols[3], ev.ts))
      fail("MalformedRow", "line " + std::to_string(line_no));
    ev.file_order = order++;
    by_user[ev.user].push_back(ev);
  }

  IngestResult res;
  std::map<std::int64_t, int> item_map;
  for (auto& [user, events] : by_user) {
    if (static_cast<int>(events.size()) < std::max(min_events, 2)) continue;
    std::stable_sort(events.begin(), events.end(),
                     [](const RawEvent& a, const RawEvent& b) {
                       if (a.ts != b.ts) return a.ts < b.ts;
                       return a.file_order < b.file_order;
                     });
    if (static_cast<int>(events.size()) > max_events)
      events.erase(events.begin(), events.end() - max_events);
    std::vector<Event> seq;
    seq.reserve(events.size());
    for (const RawEvent& ev : events) {
      auto [it, inserted] =
          item_map.try_emplace(ev.item, static_cast<int>(item_map.size()));
      if (inserted) res.item_original_of_new.push_back(ev.item);
      seq.push_back({user, it->second, static_cast<int>(ev.type), ev.ts});
    }
    res.data.users.push_back(std::move(seq));
  }
  if (res.data.users.empty())
    fail("EmptyAfterFilter", "no user has >= " + std::to_string(min_events) +
                                 " events");
  res.data.vocab_size = static_cast<int>(item_map.size());
  res.data.metadata = "tsv ingest";
  return res;
}

inline IngestResult ingest_tsv(const std::string& path, int min_events,
                               int max_events) {
  std::ifstream in(path);
  if (!in) fail("IoError", "cannot open " + path);
  return ingest_tsv_stream(in, min_events, max_events);
}

inline void write_tsv(const Dataset& data, std::ostream& out) {
  out << "user_id\titem_id\tevent_type\ttimestamp\n";
  for (const auto& seq : data.users)
    for (const Event& e : seq)
      out << e.user_id << '\t' << e.item_id << '\t' << e.event_type << '\t'
          << e.timestamp << '\n';
}

inline void write_item_map(const IngestResult& res, std::ostream& out) {
  out << "new_id\toriginal_id\n";
  for (std::size_t i = 0; i < res.item_original_of_new.size(); ++i)
    out << i << '\t' << res.item_original_of_new[i] << '\n';
}

// ---- chronological split ----------------------------------------------

struct SplitSpec {
  int train_len = 0;
  int test_len = 0;
  int pretrain_len = 0;
  int recent_len = 0;
};

inline void validate_split(const SplitSpec& s) {
  if (s.train_len < 1 || s.test_len < 0 || s.pretrain_len < 0 ||
      s.recent_len < 1)
    fail("InvalidConfig", "bad split spec");
  if (s.pretrain_len + s.recent_len != s.train_len)
    fail("InvalidConfig", "pretrain_len + recent_len must equal train_len");
}

struct SplitResult {
  std::vector<std::vector<int>> train;  // item ids, first train_len events
  std::vector<std::vector<int>> test;   // item ids, next test_len events
};

inline SplitResult split(const Dataset& data, const SplitSpec& spec) {
  validate_split(spec);
  SplitResult res;
  for (std::size_t u = 0; u < data.users.size(); ++u) {
    const auto& seq = data.users[u];
    if (static_cast<int>(seq.size()) < spec.train_len + spec.test_len)
      fail("SequenceTooShort", "user index " + std::to_string(u));
    std::vector<int> train, test;
    for (int i = 0; i < spec.train_len; ++i) train.push_back(seq[i].item_id);
    for (int i = 0; i < spec.test_len; ++i)
      test.push_back(seq[spec.train_len + i].item_id);
    res.train.push_back(std::move(train));
    res.test.push_back(std::move(test));
  }
  return res;
}

}  // namespace persrec
