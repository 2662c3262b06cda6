#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "persrec/common.hpp"
#include "persrec/costmodel.hpp"
#include "persrec/maskgen.hpp"
#include "persrec/seqcore.hpp"

namespace persrec {

struct ModelConfig {
  int num_layers = 2;
  int model_dim = 32;
  int num_heads = 2;
  int ffn_dim = 64;
  int vocab_size = 0;
  int max_positions = 0;
  int num_expert_slots = 0;  // k_max, learnable expert embeddings
  std::uint32_t seed = 0;
};

inline void validate_config(const ModelConfig& cfg) {
  if (cfg.num_layers < 1 || cfg.model_dim < 1 || cfg.num_heads < 1 ||
      cfg.ffn_dim < 1 || cfg.vocab_size < 1 || cfg.max_positions < 1 ||
      cfg.num_expert_slots < 0)
    fail("InvalidConfig", "all dimensions must be >= 1");
  if (cfg.model_dim % cfg.num_heads != 0)
    fail("InvalidConfig", "model_dim must be divisible by num_heads");
}

// Named slice of the flat parameter vector.
struct TensorRef {
  std::string family;  // e.g. "attn_q"; shared across layers
  std::string name;    // e.g. "layer1.attn_q"
  std::size_t offset = 0;
  int rows = 0, cols = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

constexpr double kNormEps = 1e-6;

// Decoder-only transformer: pre-RMSNorm attention and SiLU FFN blocks,
// learned absolute positions, output head tied to the item embeddings.
// Parameters live in one flat vector in checkpoint declaration order.
struct Model {
  ModelConfig cfg;
  std::vector<double> params;
  std::vector<TensorRef> tensors;

  struct LayerOffsets {
    std::size_t wq, wk, wv, wo, w1, w2, g_attn, g_ffn;
  };
  std::size_t item_emb = 0, expert_emb = 0, pos_emb = 0, g_final = 0;
  std::vector<LayerOffsets> layer;

  const double* item_embedding(int id) const {
    return params.data() + item_emb + static_cast<std::size_t>(id) * cfg.model_dim;
  }

  std::size_t param_count() const { return params.size(); }
};

inline void build_layout(Model& m) {
  const ModelConfig& c = m.cfg;
  m.tensors.clear();
  m.layer.assign(c.num_layers, {});
  std::size_t off = 0;
  auto add = [&](const std::string& family, const std::string& name, int rows,
                 int cols) {
    std::size_t at = off;
    m.tensors.push_back({family, name, at, rows, cols});
    off += static_cast<std::size_t>(rows) * cols;
    return at;
  };
  m.item_emb = add("item_embeddings", "item_embeddings", c.vocab_size, c.model_dim);
  m.expert_emb =
      add("expert_embeddings", "expert_embeddings", c.num_expert_slots, c.model_dim);
  m.pos_emb =
      add("position_embeddings", "position_embeddings", c.max_positions, c.model_dim);
  for (int l = 0; l < c.num_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    m.layer[l].wq = add("attn_q", p + "attn_q", c.model_dim, c.model_dim);
    m.layer[l].wk = add("attn_k", p + "attn_k", c.model_dim, c.model_dim);
    m.layer[l].wv = add("attn_v", p + "attn_v", c.model_dim, c.model_dim);
    m.layer[l].wo = add("attn_o", p + "attn_o", c.model_dim, c.model_dim);
    m.layer[l].w1 = add("ffn_in", p + "ffn_in", c.model_dim, c.ffn_dim);
    m.layer[l].w2 = add("ffn_out", p + "ffn_out", c.ffn_dim, c.model_dim);
    m.layer[l].g_attn = add("norm_attn", p + "norm_attn", 1, c.model_dim);
    m.layer[l].g_ffn = add("norm_ffn", p + "norm_ffn", 1, c.model_dim);
  }
  m.g_final = add("norm_final", "norm_final", 1, c.model_dim);
  m.params.assign(off, 0.0);
}

inline Model init_model(const ModelConfig& cfg) {
  validate_config(cfg);
  Model m;
  m.cfg = cfg;
  build_layout(m);
  Rng rng(0x5ec5eedull ^ (static_cast<std::uint64_t>(cfg.seed) << 1));
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.model_dim));
  for (const TensorRef& t : m.tensors) {
    double* p = m.params.data() + t.offset;
    if (t.family.rfind("norm", 0) == 0) {
      for (std::size_t i = 0; i < t.size(); ++i) p[i] = 1.0;
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) p[i] = rng.next_normal() * scale;
    }
  }
  return m;
}

// Per-layer key/value rows of cached positions (experts of earlier
// segments), sorted by flattened position.
struct KvEntry {
  int position = 0;
  std::vector<double> k, v;
};
using LayerKv = std::vector<KvEntry>;

struct TokenInput {
  bool is_expert = false;
  int index = 0;     // item id, or global expert slot index
  int position = 0;  // flattened position for the positional embedding
};

inline std::vector<TokenInput> tokens_from_layout(
    const TokenLayout& layout, const std::vector<int>& item_ids) {
  int items = 0;
  for (const Slot& s : layout.slots) items += s.is_item();
  if (static_cast<int>(item_ids.size()) != items)
    fail("ShapeMismatch", "item_ids length does not match item slots");
  std::vector<TokenInput> tokens;
  tokens.reserve(layout.size());
  int next_item = 0;
  for (int p = 0; p < layout.size(); ++p) {
    const Slot& s = layout.slots[p];
    if (s.is_item())
      tokens.push_back({false, item_ids[next_item++], p});
    else
      tokens.push_back({true, s.global_expert_index, p});
  }
  return tokens;
}

namespace detail {

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
  double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

// y = g * x * inv_r with inv_r = 1/sqrt(mean(x^2) + eps)
inline double rms_inv(const double* x, int d) {
  double s = 0;
  for (int i = 0; i < d; ++i) s += x[i] * x[i];
  return 1.0 / std::sqrt(s / d + kNormEps);
}

inline void matvec(const double* in, const double* w, double* out, int in_dim,
                   int out_dim) {
  for (int j = 0; j < out_dim; ++j) out[j] = 0.0;
  for (int i = 0; i < in_dim; ++i) {
    const double v = in[i];
    const double* row = w + static_cast<std::size_t>(i) * out_dim;
    for (int j = 0; j < out_dim; ++j) out[j] += v * row[j];
  }
}

// Intermediates of one forward pass, kept only when gradients are needed.
struct LayerTape {
  std::vector<double> x_in;       // n*d input hidden
  std::vector<double> inv_rms1;   // n
  std::vector<double> normed1;    // n*d
  std::vector<double> q, k, v;    // n*d each
  std::vector<double> attw;       // heads * n * (nc + n), softmax weights
  std::vector<double> attn_cat;   // n*d, heads concatenated, pre-Wo
  std::vector<double> x_mid;      // n*d after attention residual
  std::vector<double> inv_rms2;   // n
  std::vector<double> normed2;    // n*d
  std::vector<double> h1;         // n*f pre-activation
  std::vector<double> a1;         // n*f silu(h1)
};

struct Tape {
  std::vector<LayerTape> layers;
  std::vector<double> x_last;     // n*d into final norm
  std::vector<double> inv_rms_f;  // n
  std::vector<double> h_final;    // n*d
};

struct ForwardArgs {
  const AttentionMask* mask = nullptr;          // dense mask over the block
  const std::vector<LayerKv>* cache = nullptr;  // prepended keys per layer
  FlopCounter* flops = nullptr;
  Tape* tape = nullptr;                 // record intermediates
  std::vector<LayerKv>* out_kv = nullptr;  // collect block K/V per layer
  std::vector<std::vector<double>>* out_layer_hidden = nullptr;
};

// Shared forward core for the flattened training pass (mask set) and the
// segment-by-segment cached pass (cache set). Returns the final normalized
// hidden states, n*d.
inline std::vector<double> forward_core(const Model& m,
                                        const std::vector<TokenInput>& tokens,
                                        const ForwardArgs& args) {
  const ModelConfig& c = m.cfg;
  const int n = static_cast<int>(tokens.size());
  const int d = c.model_dim;
  const int f = c.ffn_dim;
  const int heads = c.num_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (n == 0) fail("ShapeMismatch", "empty token block");
  if (args.mask && args.mask->n != n)
    fail("ShapeMismatch", "mask side does not match token count");
  if (args.cache && static_cast<int>(args.cache->size()) != c.num_layers)
    fail("CacheLayerMismatch", "cache has " +
                                   std::to_string(args.cache->size()) +
                                   " layers, model has " +
                                   std::to_string(c.num_layers));

  std::vector<double> x(static_cast<std::size_t>(n) * d);
  for (int p = 0; p < n; ++p) {
    const TokenInput& t = tokens[p];
    if (t.position < 0 || t.position >= c.max_positions)
      fail("ShapeMismatch", "position " + std::to_string(t.position) +
                                " outside max_positions");
    const double* base;
    if (t.is_expert) {
      if (t.index < 0 || t.index >= c.num_expert_slots)
        fail("ShapeMismatch", "expert slot index out of range");
      base = m.params.data() + m.expert_emb +
             static_cast<std::size_t>(t.index) * d;
    } else {
      if (t.index < 0 || t.index >= c.vocab_size)
        fail("VocabOverflow", "item id " + std::to_string(t.index) +
                                  " outside vocab");
      base = m.item_embedding(t.index);
    }
    const double* pos =
        m.params.data() + m.pos_emb + static_cast<std::size_t>(t.position) * d;
    for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(p) * d + i] = base[i] + pos[i];
  }

  if (args.tape) args.tape->layers.resize(c.num_layers);
  if (args.out_kv) args.out_kv->assign(c.num_layers, {});
  if (args.out_layer_hidden) args.out_layer_hidden->clear();

  std::vector<double> normed(static_cast<std::size_t>(n) * d);
  std::vector<double> q(normed.size()), k(normed.size()), v(normed.size());
  std::vector<double> attn_cat(normed.size());
  std::vector<double> h1(static_cast<std::size_t>(n) * f), a1(h1.size());
  std::vector<double> scores;

  for (int l = 0; l < c.num_layers; ++l) {
    const LayerKv* cache_l = args.cache ? &(*args.cache)[l] : nullptr;
    const int nc = cache_l ? static_cast<int>(cache_l->size()) : 0;
    LayerTape* tl = args.tape ? &args.tape->layers[l] : nullptr;
    if (tl) tl->x_in = x;

    // pre-attention norm + projections
    const double* g1 = m.params.data() + m.layer[l].g_attn;
    if (tl) tl->inv_rms1.resize(n);
    for (int p = 0; p < n; ++p) {
      double* xp = x.data() + static_cast<std::size_t>(p) * d;
      double inv_r = rms_inv(xp, d);
      if (tl) tl->inv_rms1[p] = inv_r;
      double* np = normed.data() + static_cast<std::size_t>(p) * d;
      for (int i = 0; i < d; ++i) np[i] = g1[i] * xp[i] * inv_r;
      matvec(np, m.params.data() + m.layer[l].wq,
             q.data() + static_cast<std::size_t>(p) * d, d, d);
      matvec(np, m.params.data() + m.layer[l].wk,
             k.data() + static_cast<std::size_t>(p) * d, d, d);
      matvec(np, m.params.data() + m.layer[l].wv,
             v.data() + static_cast<std::size_t>(p) * d, d, d);
    }
    if (tl) {
      tl->normed1 = normed;
      tl->q = q;
      tl->k = k;
      tl->v = v;
      tl->attw.assign(static_cast<std::size_t>(heads) * n * (nc + n), 0.0);
    }
    if (args.out_kv) {
      LayerKv& out = (*args.out_kv)[l];
      out.resize(n);
      for (int p = 0; p < n; ++p) {
        out[p].position = tokens[p].position;
        out[p].k.assign(k.begin() + static_cast<std::size_t>(p) * d,
                        k.begin() + static_cast<std::size_t>(p + 1) * d);
        out[p].v.assign(v.begin() + static_cast<std::size_t>(p) * d,
                        v.begin() + static_cast<std::size_t>(p + 1) * d);
      }
    }

    // masked multi-head attention; cached keys come first
    for (int h = 0; h < heads; ++h) {
      const int hoff = h * dh;
      for (int p = 0; p < n; ++p) {
        const int cols = nc + p + 1;  // cached + causal block prefix
        scores.assign(cols, 0.0);
        const double* qp = q.data() + static_cast<std::size_t>(p) * d + hoff;
        double best = -1e300;
        for (int j = 0; j < cols; ++j) {
          const double* kj =
              j < nc ? (*cache_l)[j].k.data() + hoff
                     : k.data() + static_cast<std::size_t>(j - nc) * d + hoff;
          double s = 0;
          for (int t = 0; t < dh; ++t) s += qp[t] * kj[t];
          s *= scale;
          bool allowed = j < nc || !args.mask || args.mask->at(p, j - nc);
          scores[j] = allowed ? s : -1e300;
          if (allowed && s > best) best = s;
        }
        double denom = 0;
        for (int j = 0; j < cols; ++j) {
          if (scores[j] <= -1e299) {
            scores[j] = 0.0;
            continue;
          }
          scores[j] = std::exp(scores[j] - best);
          denom += scores[j];
        }
        double* out = attn_cat.data() + static_cast<std::size_t>(p) * d + hoff;
        for (int t = 0; t < dh; ++t) out[t] = 0.0;
        for (int j = 0; j < cols; ++j) {
          if (scores[j] == 0.0) continue;
          double w = scores[j] / denom;
          if (tl)
            tl->attw[(static_cast<std::size_t>(h) * n + p) * (nc + n) + j] = w;
          const double* vj =
              j < nc ? (*cache_l)[j].v.data() + hoff
                     : v.data() + static_cast<std::size_t>(j - nc) * d + hoff;
          for (int t = 0; t < dh; ++t) out[t] += w * vj[t];
        }
        if (args.flops && h == 0)
          args.flops->attention_macs += 2.0 * cols * d;  // all heads at once
      }
    }
    if (tl) tl->attn_cat = attn_cat;

    // output projection + residual
    std::vector<double> proj(d);
    for (int p = 0; p < n; ++p) {
      matvec(attn_cat.data() + static_cast<std::size_t>(p) * d,
             m.params.data() + m.layer[l].wo, proj.data(), d, d);
      double* xp = x.data() + static_cast<std::size_t>(p) * d;
      for (int i = 0; i < d; ++i) xp[i] += proj[i];
    }
    if (tl) tl->x_mid = x;

    // pre-FFN norm + FFN + residual
    const double* g2 = m.params.data() + m.layer[l].g_ffn;
    if (tl) tl->inv_rms2.resize(n);
    for (int p = 0; p < n; ++p) {
      double* xp = x.data() + static_cast<std::size_t>(p) * d;
      double inv_r = rms_inv(xp, d);
      if (tl) tl->inv_rms2[p] = inv_r;
      double* np = normed.data() + static_cast<std::size_t>(p) * d;
      for (int i = 0; i < d; ++i) np[i] = g2[i] * xp[i] * inv_r;
      double* h1p = h1.data() + static_cast<std::size_t>(p) * f;
      matvec(np, m.params.data() + m.layer[l].w1, h1p, d, f);
      double* a1p = a1.data() + static_cast<std::size_t>(p) * f;
      for (int i = 0; i < f; ++i) a1p[i] = silu(h1p[i]);
      matvec(a1p, m.params.data() + m.layer[l].w2, proj.data(), f, d);
      for (int i = 0; i < d; ++i) xp[i] += proj[i];
      if (args.flops) args.flops->ffn_macs += 2.0 * d * f;
    }
    if (tl) {
      tl->normed2 = normed;
      tl->h1 = h1;
      tl->a1 = a1;
    }
    if (args.out_layer_hidden) args.out_layer_hidden->push_back(x);
  }

  // final norm
  if (args.tape) {
    args.tape->x_last = x;
    args.tape->inv_rms_f.resize(n);
  }
  const double* gf = m.params.data() + m.g_final;
  std::vector<double> h(static_cast<std::size_t>(n) * d);
  for (int p = 0; p < n; ++p) {
    double* xp = x.data() + static_cast<std::size_t>(p) * d;
    double inv_r = rms_inv(xp, d);
    if (args.tape) args.tape->inv_rms_f[p] = inv_r;
    double* hp = h.data() + static_cast<std::size_t>(p) * d;
    for (int i = 0; i < d; ++i) hp[i] = gf[i] * xp[i] * inv_r;
  }
  if (args.tape) args.tape->h_final = h;
  return h;
}

// dx accumulation through y = g * x * inv_r; dg accumulated separately.
inline void rms_backward(const double* x, double inv_r, const double* g,
                         const double* dy, double* dx, double* dg, int d) {
  double dot = 0;
  for (int i = 0; i < d; ++i) {
    if (dg) dg[i] += dy[i] * x[i] * inv_r;
    dot += dy[i] * g[i] * x[i];
  }
  const double c = dot * inv_r * inv_r * inv_r / d;
  for (int i = 0; i < d; ++i) dx[i] += dy[i] * g[i] * inv_r - x[i] * c;
}

}  // namespace detail

struct ForwardTrace {
  int n = 0;
  std::vector<std::vector<double>> layer_hidden;  // per layer, n*d
  std::vector<double> final_hidden;               // n*d
  std::vector<double> logits;                     // n*vocab
  std::vector<LayerKv> kv;                        // per layer, all block tokens
};

inline void compute_logits(const Model& m, ForwardTrace& trace) {
  const int d = m.cfg.model_dim;
  const int vocab = m.cfg.vocab_size;
  trace.logits.assign(static_cast<std::size_t>(trace.n) * vocab, 0.0);
  for (int p = 0; p < trace.n; ++p) {
    const double* hp = trace.final_hidden.data() + static_cast<std::size_t>(p) * d;
    double* lp = trace.logits.data() + static_cast<std::size_t>(p) * vocab;
    for (int t = 0; t < vocab; ++t) {
      const double* e = m.item_embedding(t);
      double s = 0;
      for (int i = 0; i < d; ++i) s += hp[i] * e[i];
      lp[t] = s;
    }
  }
}

inline ForwardTrace forward(const Model& m, const TokenLayout& layout,
                            const std::vector<int>& item_ids,
                            const AttentionMask& mask,
                            FlopCounter* flops = nullptr) {
  auto tokens = tokens_from_layout(layout, item_ids);
  ForwardTrace trace;
  trace.n = static_cast<int>(tokens.size());
  detail::ForwardArgs args;
  args.mask = &mask;
  args.flops = flops;
  args.out_kv = &trace.kv;
  args.out_layer_hidden = &trace.layer_hidden;
  trace.final_hidden = detail::forward_core(m, tokens, args);
  compute_logits(m, trace);
  return trace;
}

struct CachedForwardResult {
  ForwardTrace trace;
  std::vector<LayerKv> new_expert_kv;  // per layer, expert slots of this block
};

// Runs one segment against the expert KV rows of all earlier segments.
// expert_flags marks which block tokens are expert slots whose K/V should
// be returned for caching.
inline CachedForwardResult forward_with_cache(
    const Model& m, const std::vector<LayerKv>& prior_cache,
    const std::vector<TokenInput>& tokens, const std::vector<char>& expert_flags,
    FlopCounter* flops = nullptr, bool want_logits = true) {
  if (expert_flags.size() != tokens.size())
    fail("ShapeMismatch", "expert_flags length mismatch");
  CachedForwardResult res;
  res.trace.n = static_cast<int>(tokens.size());
  std::vector<LayerKv> block_kv;
  detail::ForwardArgs args;
  args.cache = &prior_cache;
  args.flops = flops;
  args.out_kv = &block_kv;
  res.trace.final_hidden = detail::forward_core(m, tokens, args);
  if (want_logits) compute_logits(m, res.trace);
  res.new_expert_kv.assign(m.cfg.num_layers, {});
  for (int l = 0; l < m.cfg.num_layers; ++l)
    for (std::size_t p = 0; p < tokens.size(); ++p)
      if (expert_flags[p]) res.new_expert_kv[l].push_back(block_kv[l][p]);
  res.trace.kv = std::move(block_kv);
  return res;
}

// Exact gradients for all parameter families via reverse-mode through the
// taped forward pass. Loss is the mean cross-entropy over included slots.
inline double loss_and_grads(const Model& m, const TokenLayout& layout,
                             const std::vector<int>& item_ids,
                             const AttentionMask& mask, const LossMask& lmask,
                             std::vector<double>& grads,
                             FlopCounter* flops = nullptr) {
  const ModelConfig& c = m.cfg;
  const int d = c.model_dim;
  const int f = c.ffn_dim;
  const int heads = c.num_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const int vocab = c.vocab_size;

  auto tokens = tokens_from_layout(layout, item_ids);
  const int n = static_cast<int>(tokens.size());
  if (static_cast<int>(lmask.include.size()) != n)
    fail("ShapeMismatch", "loss mask length mismatch");
  const int included = lmask.included_count();
  if (included == 0) fail("NoIncludedSlots", "loss mask excludes every slot");

  detail::Tape tape;
  detail::ForwardArgs args;
  args.mask = &mask;
  args.tape = &tape;
  args.flops = flops;
  detail::forward_core(m, tokens, args);

  grads.assign(m.params.size(), 0.0);

  // map item-slot index -> item id for targets
  std::vector<int> slot_item(n, -1);
  {
    int next = 0;
    for (int p = 0; p < n; ++p)
      if (layout.slots[p].is_item()) slot_item[p] = item_ids[next++];
  }

  // head: streaming softmax cross-entropy, tied output weights
  double loss = 0;
  std::vector<double> dh_final(static_cast<std::size_t>(n) * d, 0.0);
  std::vector<double> logits_row(vocab);
  const double inv_count = 1.0 / included;
  for (int p = 0; p < n; ++p) {
    if (!lmask.include[p]) continue;
    const int target_slot = *layout.target_of[p];
    const int target = slot_item[target_slot];
    const double* hp = tape.h_final.data() + static_cast<std::size_t>(p) * d;
    double best = -1e300;
    for (int t = 0; t < vocab; ++t) {
      const double* e = m.item_embedding(t);
      double s = 0;
      for (int i = 0; i < d; ++i) s += hp[i] * e[i];
      logits_row[t] = s;
      if (s > best) best = s;
    }
    double denom = 0;
    for (int t = 0; t < vocab; ++t) denom += std::exp(logits_row[t] - best);
    loss += (std::log(denom) + best - logits_row[target]) * inv_count;
    double* dhp = dh_final.data() + static_cast<std::size_t>(p) * d;
    for (int t = 0; t < vocab; ++t) {
      double dl = (std::exp(logits_row[t] - best) / denom -
                   (t == target ? 1.0 : 0.0)) *
                  inv_count;
      const double* e = m.item_embedding(t);
      double* de = grads.data() + m.item_emb + static_cast<std::size_t>(t) * d;
      for (int i = 0; i < d; ++i) {
        dhp[i] += dl * e[i];
        de[i] += dl * hp[i];
      }
    }
  }

  // final norm backward
  std::vector<double> dx(static_cast<std::size_t>(n) * d, 0.0);
  for (int p = 0; p < n; ++p)
    detail::rms_backward(tape.x_last.data() + static_cast<std::size_t>(p) * d,
                         tape.inv_rms_f[p], m.params.data() + m.g_final,
                         dh_final.data() + static_cast<std::size_t>(p) * d,
                         dx.data() + static_cast<std::size_t>(p) * d,
                         grads.data() + m.g_final, d);

  std::vector<double> dnormed(static_cast<std::size_t>(n) * d);
  std::vector<double> dq(dnormed.size()), dk(dnormed.size()), dv(dnormed.size());
  std::vector<double> dcat(dnormed.size());
  std::vector<double> dh1(static_cast<std::size_t>(n) * f), da1(dh1.size());

  for (int l = c.num_layers - 1; l >= 0; --l) {
    const detail::LayerTape& tl = tape.layers[l];

    // FFN block: x_out = x_mid + silu(normed2 W1) W2
    std::fill(dnormed.begin(), dnormed.end(), 0.0);
    for (int p = 0; p < n; ++p) {
      const double* dxp = dx.data() + static_cast<std::size_t>(p) * d;
      const double* a1p = tl.a1.data() + static_cast<std::size_t>(p) * f;
      const double* h1p = tl.h1.data() + static_cast<std::size_t>(p) * f;
      double* da1p = da1.data() + static_cast<std::size_t>(p) * f;
      double* dh1p = dh1.data() + static_cast<std::size_t>(p) * f;
      // dW2 += a1^T dx ; da1 = dx W2^T
      double* dw2 = grads.data() + m.layer[l].w2;
      const double* w2 = m.params.data() + m.layer[l].w2;
      for (int i = 0; i < f; ++i) {
        double acc = 0;
        const double* w2row = w2 + static_cast<std::size_t>(i) * d;
        double* dw2row = dw2 + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) {
          dw2row[j] += a1p[i] * dxp[j];
          acc += dxp[j] * w2row[j];
        }
        da1p[i] = acc;
        dh1p[i] = acc * detail::silu_grad(h1p[i]);
      }
      // dW1 += normed2^T dh1 ; dnormed2 = dh1 W1^T
      double* dw1 = grads.data() + m.layer[l].w1;
      const double* w1 = m.params.data() + m.layer[l].w1;
      const double* n2p = tl.normed2.data() + static_cast<std::size_t>(p) * d;
      double* dnp = dnormed.data() + static_cast<std::size_t>(p) * d;
      for (int i = 0; i < d; ++i) {
        double acc = 0;
        const double* w1row = w1 + static_cast<std::size_t>(i) * f;
        double* dw1row = dw1 + static_cast<std::size_t>(i) * f;
        for (int j = 0; j < f; ++j) {
          dw1row[j] += n2p[i] * dh1p[j];
          acc += dh1p[j] * w1row[j];
        }
        dnp[i] = acc;
      }
    }
    // through pre-FFN norm into x_mid; residual keeps dx as well
    for (int p = 0; p < n; ++p)
      detail::rms_backward(tl.x_mid.data() + static_cast<std::size_t>(p) * d,
                           tl.inv_rms2[p], m.params.data() + m.layer[l].g_ffn,
                           dnormed.data() + static_cast<std::size_t>(p) * d,
                           dx.data() + static_cast<std::size_t>(p) * d,
                           grads.data() + m.layer[l].g_ffn, d);

    // attention block: x_mid = x_in + attn_cat Wo
    std::fill(dcat.begin(), dcat.end(), 0.0);
    {
      double* dwo = grads.data() + m.layer[l].wo;
      const double* wo = m.params.data() + m.layer[l].wo;
      for (int p = 0; p < n; ++p) {
        const double* dxp = dx.data() + static_cast<std::size_t>(p) * d;
        const double* catp = tl.attn_cat.data() + static_cast<std::size_t>(p) * d;
        double* dcatp = dcat.data() + static_cast<std::size_t>(p) * d;
        for (int i = 0; i < d; ++i) {
          double acc = 0;
          const double* worow = wo + static_cast<std::size_t>(i) * d;
          double* dworow = dwo + static_cast<std::size_t>(i) * d;
          for (int j = 0; j < d; ++j) {
            dworow[j] += catp[i] * dxp[j];
            acc += dxp[j] * worow[j];
          }
          dcatp[i] = acc;
        }
      }
    }

    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    std::vector<double> ds_row(n);
    for (int h = 0; h < heads; ++h) {
      const int hoff = h * dh;
      for (int p = 0; p < n; ++p) {
        const double* dcatp =
            dcat.data() + static_cast<std::size_t>(p) * d + hoff;
        const double* wrow =
            tl.attw.data() + (static_cast<std::size_t>(h) * n + p) * n;
        // dw_ij = dcat_i . v_j, softmax jacobian, then into q/k
        double dot = 0;
        for (int j = 0; j <= p; ++j) {
          double w = wrow[j];
          if (w == 0.0) {
            ds_row[j] = 0.0;
            continue;
          }
          const double* vj = tl.v.data() + static_cast<std::size_t>(j) * d + hoff;
          double dw = 0;
          for (int t = 0; t < dh; ++t) dw += dcatp[t] * vj[t];
          ds_row[j] = dw;  // provisional, scaled below
          dot += w * dw;
          double* dvj = dv.data() + static_cast<std::size_t>(j) * d + hoff;
          for (int t = 0; t < dh; ++t) dvj[t] += w * dcatp[t];
        }
        const double* qp = tl.q.data() + static_cast<std::size_t>(p) * d + hoff;
        double* dqp = dq.data() + static_cast<std::size_t>(p) * d + hoff;
        for (int j = 0; j <= p; ++j) {
          double w = wrow[j];
          if (w == 0.0) continue;
          double ds = w * (ds_row[j] - dot) * scale;
          const double* kj = tl.k.data() + static_cast<std::size_t>(j) * d + hoff;
          double* dkj = dk.data() + static_cast<std::size_t>(j) * d + hoff;
          for (int t = 0; t < dh; ++t) {
            dqp[t] += ds * kj[t];
            dkj[t] += ds * qp[t];
          }
        }
      }
    }

    // projections back to normed1
    std::fill(dnormed.begin(), dnormed.end(), 0.0);
    auto proj_back = [&](const std::vector<double>& dout, std::size_t w_off) {
      const double* w = m.params.data() + w_off;
      double* dw = grads.data() + w_off;
      for (int p = 0; p < n; ++p) {
        const double* doutp = dout.data() + static_cast<std::size_t>(p) * d;
        const double* np = tl.normed1.data() + static_cast<std::size_t>(p) * d;
        double* dnp = dnormed.data() + static_cast<std::size_t>(p) * d;
        for (int i = 0; i < d; ++i) {
          double acc = 0;
          const double* wrow = w + static_cast<std::size_t>(i) * d;
          double* dwrow = dw + static_cast<std::size_t>(i) * d;
          for (int j = 0; j < d; ++j) {
            dwrow[j] += np[i] * doutp[j];
            acc += doutp[j] * wrow[j];
          }
          dnp[i] += acc;
        }
      }
    };
    proj_back(dq, m.layer[l].wq);
    proj_back(dk, m.layer[l].wk);
    proj_back(dv, m.layer[l].wv);

    // through pre-attention norm into x_in (plus residual already in dx)
    for (int p = 0; p < n; ++p)
      detail::rms_backward(tl.x_in.data() + static_cast<std::size_t>(p) * d,
                           tl.inv_rms1[p], m.params.data() + m.layer[l].g_attn,
                           dnormed.data() + static_cast<std::size_t>(p) * d,
                           dx.data() + static_cast<std::size_t>(p) * d,
                           grads.data() + m.layer[l].g_attn, d);
  }

  // input embeddings
  for (int p = 0; p < n; ++p) {
    const TokenInput& t = tokens[p];
    const double* dxp = dx.data() + static_cast<std::size_t>(p) * d;
    double* demb =
        t.is_expert
            ? grads.data() + m.expert_emb + static_cast<std::size_t>(t.index) * d
            : grads.data() + m.item_emb + static_cast<std::size_t>(t.index) * d;
    double* dpos =
        grads.data() + m.pos_emb + static_cast<std::size_t>(t.position) * d;
    for (int i = 0; i < d; ++i) {
      demb[i] += dxp[i];
      dpos[i] += dxp[i];
    }
  }
  return loss;
}

// ---- checkpoint format -------------------------------------------------
// magic "PSR1"; u32 LE header [version=1, L, d, heads, ffn_dim, vocab_size,
// max_positions, k_max, seed]; parameters as LE f32 in declaration order;
// trailing CRC32 over header+tensor bytes.

inline std::vector<unsigned char> serialize_model(const Model& m) {
  std::vector<unsigned char> out;
  out.reserve(16 + m.params.size() * 4);
  for (char c : {'P', 'S', 'R', '1'}) out.push_back(static_cast<unsigned char>(c));
  const ModelConfig& c = m.cfg;
  for (std::uint32_t v :
       {std::uint32_t{1}, static_cast<std::uint32_t>(c.num_layers),
        static_cast<std::uint32_t>(c.model_dim),
        static_cast<std::uint32_t>(c.num_heads),
        static_cast<std::uint32_t>(c.ffn_dim),
        static_cast<std::uint32_t>(c.vocab_size),
        static_cast<std::uint32_t>(c.max_positions),
        static_cast<std::uint32_t>(c.num_expert_slots), c.seed})
    put_u32(out, v);
  for (double p : m.params) put_f32(out, static_cast<float>(p));
  put_u32(out, crc32(out.data() + 4, out.size() - 4));
  return out;
}

inline std::uint32_t model_crc(const Model& m) {
  auto bytes = serialize_model(m);
  return get_u32(bytes.data() + bytes.size() - 4);
}

inline Model deserialize_model(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 + 9 * 4 + 4 || std::memcmp(bytes.data(), "PSR1", 4) != 0)
    fail("BadCheckpoint", "missing PSR1 magic");
  std::uint32_t stored = get_u32(bytes.data() + bytes.size() - 4);
  std::uint32_t actual = crc32(bytes.data() + 4, bytes.size() - 8);
  if (stored != actual) fail("BadCheckpoint", "CRC mismatch");
  const unsigned char* p = bytes.data() + 4;
  std::uint32_t version = get_u32(p);
  if (version != 1) fail("BadCheckpoint", "unsupported version");
  ModelConfig c;
  c.num_layers = static_cast<int>(get_u32(p + 4));
  c.model_dim = static_cast<int>(get_u32(p + 8));
  c.num_heads = static_cast<int>(get_u32(p + 12));
  c.ffn_dim = static_cast<int>(get_u32(p + 16));
  c.vocab_size = static_cast<int>(get_u32(p + 20));
  c.max_positions = static_cast<int>(get_u32(p + 24));
  c.num_expert_slots = static_cast<int>(get_u32(p + 28));
  c.seed = get_u32(p + 32);
  validate_config(c);
  Model m;
  m.cfg = c;
  build_layout(m);
  std::size_t expected = 4 + 9 * 4 + m.params.size() * 4 + 4;
  if (bytes.size() != expected)
    fail("BadCheckpoint", "size mismatch for declared config");
  const unsigned char* q = p + 36;
  for (std::size_t i = 0; i < m.params.size(); ++i)
    m.params[i] = static_cast<double>(get_f32(q + i * 4));
  return m;
}

inline void save_model(const Model& m, const std::string& path) {
  auto bytes = serialize_model(m);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("IoError", "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("IoError", "cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace persrec
