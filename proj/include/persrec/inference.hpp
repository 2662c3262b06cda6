#pragma once

#include <algorithm>
#include <fstream>
#include <vector>

#include "persrec/tinyformer.hpp"

namespace persrec {

// Key/value activations of the expert slots of all compressed segments,
// plus enough metadata to place the recent segment after them.
struct ExpertCache {
  int layers = 0;
  int dim = 0;
  std::vector<LayerKv> per_layer;   // entries sorted by position
  std::uint32_t plan_hash = 0;      // fingerprint of the producing plan
  std::uint32_t checkpoint_crc = 0; // fingerprint of the producing model
  int prefix_flat_length = 0;       // items+experts covered by this cache

  int expert_count() const {
    return per_layer.empty() ? 0 : static_cast<int>(per_layer[0].size());
  }
};

// Compresses every non-final segment of the plan left to right, retaining
// only the expert K/V rows.
inline ExpertCache compress_segments(const Model& model,
                                     const std::vector<int>& events_prefix,
                                     const SegmentationPlan& plan,
                                     FlopCounter* flops = nullptr) {
  const int compressed_segments = plan.num_segments() - 1;
  int prefix_items = 0;
  for (int s = 0; s < compressed_segments; ++s)
    prefix_items += plan.segment_lengths[s];
  if (static_cast<int>(events_prefix.size()) != prefix_items)
    fail("PlanMismatch", "events_prefix must cover all non-final segments (" +
                             std::to_string(prefix_items) + " items)");

  ExpertCache cache;
  cache.layers = model.cfg.num_layers;
  cache.dim = model.cfg.model_dim;
  cache.per_layer.assign(model.cfg.num_layers, {});
  cache.plan_hash = plan.hash();
  cache.checkpoint_crc = model_crc(model);

  int item_cursor = 0;
  int position = 0;
  int global_expert = 0;
  for (int s = 0; s < compressed_segments; ++s) {
    std::vector<TokenInput> tokens;
    std::vector<char> expert_flags;
    for (int i = 0; i < plan.segment_lengths[s]; ++i) {
      tokens.push_back({false, events_prefix[item_cursor++], position++});
      expert_flags.push_back(0);
    }
    for (int e = 0; e < plan.experts_per_segment[s]; ++e) {
      tokens.push_back({true, global_expert++, position++});
      expert_flags.push_back(1);
    }
    auto res = forward_with_cache(model, cache.per_layer, tokens, expert_flags,
                                  flops, /*want_logits=*/false);
    for (int l = 0; l < model.cfg.num_layers; ++l)
      for (auto& e : res.new_expert_kv[l])
        cache.per_layer[l].push_back(std::move(e));
  }
  cache.prefix_flat_length = position;
  return cache;
}

inline ExpertCache empty_cache(const Model& model) {
  ExpertCache cache;
  cache.layers = model.cfg.num_layers;
  cache.dim = model.cfg.model_dim;
  cache.per_layer.assign(model.cfg.num_layers, {});
  cache.checkpoint_crc = model_crc(model);
  return cache;
}

// Logits of the last recent position served from the expert cache. Window
// positions continue the flattened numbering; when they would run past
// max_positions they saturate so the last windowful of trained positions
// is reused.
inline std::vector<double> score_last(const Model& model,
                                      const ExpertCache& cache,
                                      const std::vector<int>& recent_items,
                                      FlopCounter* flops = nullptr) {
  if (recent_items.empty()) fail("EmptyRecent", "no recent items");
  const int len = static_cast<int>(recent_items.size());
  if (len > model.cfg.max_positions)
    fail("ShapeMismatch", "recent window exceeds max_positions");
  int start = std::min(cache.prefix_flat_length, model.cfg.max_positions - len);
  std::vector<TokenInput> tokens;
  std::vector<char> expert_flags(recent_items.size(), 0);
  for (int i = 0; i < len; ++i)
    tokens.push_back({false, recent_items[i], start + i});
  auto res = forward_with_cache(model, cache.per_layer, tokens, expert_flags,
                                flops, /*want_logits=*/true);
  const int vocab = model.cfg.vocab_size;
  return std::vector<double>(
      res.trace.logits.end() - vocab, res.trace.logits.end());
}

struct Recommendation {
  std::vector<std::pair<int, double>> items;  // (item_id, score), best first
};

inline Recommendation top_k_of(const std::vector<double>& scores, int k) {
  const int vocab = static_cast<int>(scores.size());
  if (k < 1 || k > vocab) fail("KTooLarge", "K must be in [1, vocab]");
  std::vector<int> idx(vocab);
  for (int i = 0; i < vocab; ++i) idx[i] = i;
  auto better = [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;  // ties broken by ascending item id
  };
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);
  Recommendation rec;
  rec.items.reserve(k);
  for (int i = 0; i < k; ++i) rec.items.push_back({idx[i], scores[idx[i]]});
  return rec;
}

inline Recommendation recommend(const Model& model, const ExpertCache& cache,
                                const std::vector<int>& recent_items, int k,
                                FlopCounter* flops = nullptr) {
  return top_k_of(score_last(model, cache, recent_items, flops), k);
}

// Greedy top-1 continuation; the cache is reused unmodified and the recent
// window rolls once capacity is reached.
inline std::vector<Recommendation> autoregress(
    const Model& model, const ExpertCache& cache,
    std::vector<int> recent_items, int steps, int k = 1, int capacity = 0,
    FlopCounter* flops = nullptr) {
  if (steps < 1) fail("EmptyRecent", "steps must be >= 1");
  if (capacity <= 0) capacity = static_cast<int>(recent_items.size());
  std::vector<Recommendation> out;
  for (int s = 0; s < steps; ++s) {
    Recommendation rec = recommend(model, cache, recent_items, k, flops);
    recent_items.push_back(rec.items.front().first);
    while (static_cast<int>(recent_items.size()) > capacity)
      recent_items.erase(recent_items.begin());
    out.push_back(std::move(rec));
  }
  return out;
}

// ---- cache file format -------------------------------------------------
// magic "PSC1"; u32 LE header [version=1, L, k, d, float_width,
// plan_hash, checkpoint_crc, prefix_flat_length] then k u32 expert
// positions; per layer all K rows then all V rows, LE floats.

inline std::vector<unsigned char> serialize_cache(const ExpertCache& cache,
                                                  int float_width = 4) {
  if (float_width != 4 && float_width != 8)
    fail("InvalidConfig", "float_width must be 4 or 8");
  const int k = cache.expert_count();
  std::vector<unsigned char> out;
  for (char c : {'P', 'S', 'C', '1'}) out.push_back(static_cast<unsigned char>(c));
  for (std::uint32_t v :
       {std::uint32_t{1}, static_cast<std::uint32_t>(cache.layers),
        static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(cache.dim),
        static_cast<std::uint32_t>(float_width), cache.plan_hash,
        cache.checkpoint_crc,
        static_cast<std::uint32_t>(cache.prefix_flat_length)})
    put_u32(out, v);
  for (int e = 0; e < k; ++e)
    put_u32(out, static_cast<std::uint32_t>(cache.per_layer[0][e].position));
  auto put_row = [&](const std::vector<double>& row) {
    for (double x : row) {
      if (float_width == 4)
        put_f32(out, static_cast<float>(x));
      else
        put_f64(out, x);
    }
  };
  for (int l = 0; l < cache.layers; ++l) {
    for (int e = 0; e < k; ++e) put_row(cache.per_layer[l][e].k);
    for (int e = 0; e < k; ++e) put_row(cache.per_layer[l][e].v);
  }
  return out;
}

inline ExpertCache deserialize_cache(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 + 8 * 4 || std::memcmp(bytes.data(), "PSC1", 4) != 0)
    fail("BadCache", "missing PSC1 magic");
  const unsigned char* p = bytes.data() + 4;
  if (get_u32(p) != 1) fail("BadCache", "unsupported version");
  ExpertCache cache;
  cache.layers = static_cast<int>(get_u32(p + 4));
  const int k = static_cast<int>(get_u32(p + 8));
  cache.dim = static_cast<int>(get_u32(p + 12));
  const int float_width = static_cast<int>(get_u32(p + 16));
  cache.plan_hash = get_u32(p + 20);
  cache.checkpoint_crc = get_u32(p + 24);
  cache.prefix_flat_length = static_cast<int>(get_u32(p + 28));
  if (float_width != 4 && float_width != 8) fail("BadCache", "bad float width");
  std::size_t expected = 4 + 8 * 4 + static_cast<std::size_t>(k) * 4 +
                         2ull * cache.layers * k * cache.dim * float_width;
  if (bytes.size() != expected) fail("BadCache", "size mismatch");
  std::vector<int> positions(k);
  for (int e = 0; e < k; ++e)
    positions[e] = static_cast<int>(get_u32(p + 32 + 4 * e));
  const unsigned char* q = p + 32 + 4 * k;
  auto get_row = [&](std::vector<double>& row) {
    row.resize(cache.dim);
    for (int i = 0; i < cache.dim; ++i) {
      row[i] = float_width == 4 ? static_cast<double>(get_f32(q)) : get_f64(q);
      q += float_width;
    }
  };
  cache.per_layer.assign(cache.layers, {});
  for (int l = 0; l < cache.layers; ++l) {
    cache.per_layer[l].resize(k);
    for (int e = 0; e < k; ++e) {
      cache.per_layer[l][e].position = positions[e];
      get_row(cache.per_layer[l][e].k);
    }
    for (int e = 0; e < k; ++e) get_row(cache.per_layer[l][e].v);
  }
  return cache;
}

inline std::uint32_t cache_fingerprint(const ExpertCache& cache) {
  auto bytes = serialize_cache(cache, 8);
  return crc32(bytes.data(), bytes.size());
}

inline void save_cache(const ExpertCache& cache, const std::string& path,
                       int float_width = 4) {
  auto bytes = serialize_cache(cache, float_width);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("IoError", "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline ExpertCache load_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("IoError", "cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return deserialize_cache(bytes);
}

}  // namespace persrec
