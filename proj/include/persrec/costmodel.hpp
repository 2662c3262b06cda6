#pragma once

#include <cmath>
#include <string>

#include "persrec/maskgen.hpp"
#include "persrec/seqcore.hpp"

namespace persrec {

struct CostParams {
  int layers = 1;        // L
  int items = 1;         // n, item count without learnable tokens
  int dim = 1;           // d
  int experts = 0;       // k, total learnable tokens
  int segments = 1;      // m

  double alpha() const { return static_cast<double>(experts) / items; }
};

inline void validate_cost_params(const CostParams& p) {
  if (p.layers < 1 || p.items < 1 || p.dim < 1 || p.segments < 1 ||
      p.experts < 0)
    fail("InvalidConfig", "cost parameters must be positive (experts >= 0)");
}

// C_b = L(n^2 d + n d^2), constants dropped.
inline double baseline_cost(const CostParams& p) {
  validate_cost_params(p);
  double n = p.items, d = p.dim;
  return p.layers * (n * n * d + n * d * d);
}

struct TrainingRatio {
  double exact = 1.0;   // ((n+k)^2 d + (n+k) d^2) / (n^2 d + n d^2)
  double approx = 1.0;  // 1 + alpha
};

inline TrainingRatio training_ratio(const CostParams& p) {
  validate_cost_params(p);
  double n = p.items, d = p.dim, nk = p.items + p.experts;
  TrainingRatio r;
  r.exact = (nk * nk * d + nk * d * d) / (n * n * d + n * d * d);
  r.approx = 1.0 + p.alpha();
  return r;
}

struct InferenceRatio {
  double ratio = 1.0;    // S = ((1+a)^2 n/m + (1+a) d) / (n + d)
  double absolute = 0.0; // C_i = L((n+k)^2 d / m + (n+k) d^2)
};

inline InferenceRatio inference_ratio(const CostParams& p) {
  validate_cost_params(p);
  double n = p.items, d = p.dim, m = p.segments;
  double a = p.alpha();
  InferenceRatio r;
  r.ratio = ((1.0 + a) * (1.0 + a) * n / m + (1.0 + a) * d) / (n + d);
  double nk = p.items + p.experts;
  r.absolute = p.layers * (nk * nk * d / m + nk * d * d);
  return r;
}

struct CostReport {
  CostParams params;
  double baseline_flops = 0;
  double training_flops = 0;   // C_t = L((n+k)^2 d + (n+k) d^2)
  double inference_flops = 0;  // C_i
  TrainingRatio training;
  InferenceRatio inference;
};

inline CostReport cost_report(const CostParams& p) {
  CostReport r;
  r.params = p;
  r.baseline_flops = baseline_cost(p);
  r.training = training_ratio(p);
  r.inference = inference_ratio(p);
  r.training_flops = r.training.exact * r.baseline_flops;
  r.inference_flops = r.inference.absolute;
  return r;
}

// Accumulates multiply-accumulate counts during a forward pass. Attention
// covers q.k scoring plus weighted value aggregation (2d MACs per computed
// pair); dense covers the FFN matmuls. Projections, softmax, normalization
// and the logit head are not counted. Reported FLOPs are 2x MACs.
struct FlopCounter {
  double attention_macs = 0;
  double ffn_macs = 0;

  double flops() const { return 2.0 * (attention_macs + ffn_macs); }
  void reset() { attention_macs = ffn_macs = 0; }
};

// Exact counterpart of FlopCounter for the flattened training forward.
// Training computes the full causal score matrix and applies the segment
// mask additively, so the attention term is causal over n_flat.
inline double predicted_train_flops(const SegmentationPlan& plan, int layers,
                                    int dim, int ffn_dim) {
  double n = plan.flattened_length();
  double attn = n * (n + 1.0) / 2.0 * 2.0 * dim;
  double ffn = 2.0 * n * dim * ffn_dim;
  return 2.0 * layers * (attn + ffn);
}

// Exact count for segment-by-segment inference with an expert KV cache,
// derived from the per-segment allowed blocks: each segment is causal over
// its own items+experts and attends every earlier expert.
inline double predicted_cached_flops(const SegmentationPlan& plan, int layers,
                                     int dim, int ffn_dim) {
  double attn_pairs = 0;
  double tokens = 0;
  long long cached = 0;
  for (int seg = 0; seg < plan.num_segments(); ++seg) {
    long long s = plan.segment_lengths[seg] + plan.experts_per_segment[seg];
    attn_pairs += static_cast<double>(s) * (s + 1) / 2.0 +
                  static_cast<double>(s) * cached;
    tokens += static_cast<double>(s);
    cached += plan.experts_per_segment[seg];
  }
  double attn = attn_pairs * 2.0 * dim;
  double ffn = 2.0 * tokens * dim * ffn_dim;
  return 2.0 * layers * (attn + ffn);
}

}  // namespace persrec
