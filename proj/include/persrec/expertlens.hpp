#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "persrec/maskgen.hpp"
#include "persrec/tinyformer.hpp"

namespace persrec {

struct NnlsResult {
  std::vector<double> weights;  // all >= 0
  double residual_norm = 0;
  int iterations = 0;
};

namespace detail {

// Solve (A + jitter I) z = b in place via Cholesky; A is s x s symmetric PD.
inline bool cholesky_solve(std::vector<double>& a, std::vector<double>& b,
                           int s) {
  for (int i = 0; i < s; ++i) a[i * s + i] += 1e-12 * (a[i * s + i] + 1.0);
  for (int j = 0; j < s; ++j) {
    double diag = a[j * s + j];
    for (int k = 0; k < j; ++k) diag -= a[j * s + k] * a[j * s + k];
    if (diag <= 0) return false;
    diag = std::sqrt(diag);
    a[j * s + j] = diag;
    for (int i = j + 1; i < s; ++i) {
      double v = a[i * s + j];
      for (int k = 0; k < j; ++k) v -= a[i * s + k] * a[j * s + k];
      a[i * s + j] = v / diag;
    }
  }
  for (int i = 0; i < s; ++i) {
    double v = b[i];
    for (int k = 0; k < i; ++k) v -= a[i * s + k] * b[k];
    b[i] = v / a[i * s + i];
  }
  for (int i = s - 1; i >= 0; --i) {
    double v = b[i];
    for (int k = i + 1; k < s; ++k) v -= a[k * s + i] * b[k];
    b[i] = v / a[i * s + i];
  }
  return true;
}

}  // namespace detail

// Lawson-Hanson active-set solve of argmin_w ||x - Pw|| s.t. w >= 0.
// columns[i] is the i-th column of P (length = dim of x).
inline NnlsResult nnls(const std::vector<std::vector<double>>& columns,
                       const std::vector<double>& x, double tol = 1e-8,
                       int max_iter = 0) {
  if (tol <= 0) fail("InvalidConfig", "tol must be > 0");
  const int m = static_cast<int>(columns.size());
  const int d = static_cast<int>(x.size());
  for (const auto& c : columns)
    if (static_cast<int>(c.size()) != d)
      fail("ShapeMismatch", "column length mismatch");
  if (max_iter <= 0) max_iter = 3 * std::max(m, 10);

  NnlsResult res;
  res.weights.assign(m, 0.0);
  std::vector<char> passive(m, 0);
  std::vector<double> residual = x;  // x - Pw, w = 0 initially
  std::vector<int> pset;

  auto recompute_residual = [&] {
    residual = x;
    for (int i = 0; i < m; ++i) {
      if (res.weights[i] == 0.0) continue;
      for (int r = 0; r < d; ++r) residual[r] -= res.weights[i] * columns[i][r];
    }
  };

  auto solve_passive = [&](std::vector<double>& z) -> bool {
    const int s = static_cast<int>(pset.size());
    std::vector<double> a(static_cast<std::size_t>(s) * s), b(s);
    for (int i = 0; i < s; ++i) {
      for (int j = 0; j <= i; ++j) {
        double v = 0;
        for (int r = 0; r < d; ++r) v += columns[pset[i]][r] * columns[pset[j]][r];
        a[i * s + j] = v;
        a[j * s + i] = v;
      }
      double v = 0;
      for (int r = 0; r < d; ++r) v += columns[pset[i]][r] * x[r];
      b[i] = v;
    }
    if (!detail::cholesky_solve(a, b, s)) return false;
    z = std::move(b);
    return true;
  };

  for (int iter = 0; iter < max_iter; ++iter) {
    res.iterations = iter + 1;
    // most violating zero-weight coordinate
    int best = -1;
    double best_g = tol;
    for (int i = 0; i < m; ++i) {
      if (passive[i]) continue;
      double g = 0;
      for (int r = 0; r < d; ++r) g += columns[i][r] * residual[r];
      if (g > best_g) {
        best_g = g;
        best = i;
      }
    }
    if (best < 0) {
      double rn = 0;
      for (double v : residual) rn += v * v;
      res.residual_norm = std::sqrt(rn);
      return res;
    }
    passive[best] = 1;
    pset.push_back(best);

    std::vector<double> z;
    while (true) {
      if (!solve_passive(z)) fail("DidNotConverge", "singular passive set");
      bool feasible = true;
      for (double v : z)
        if (v <= 0) feasible = false;
      if (feasible) break;
      // step toward z until the first coordinate hits zero
      double alpha = 1.0;
      for (std::size_t i = 0; i < pset.size(); ++i) {
        if (z[i] > 0) continue;
        double w = res.weights[pset[i]];
        double a = w / (w - z[i]);
        alpha = std::min(alpha, a);
      }
      for (std::size_t i = 0; i < pset.size(); ++i)
        res.weights[pset[i]] += alpha * (z[i] - res.weights[pset[i]]);
      std::vector<int> kept;
      for (std::size_t i = 0; i < pset.size(); ++i) {
        if (res.weights[pset[i]] <= 1e-14) {
          res.weights[pset[i]] = 0.0;
          passive[pset[i]] = 0;
        } else {
          kept.push_back(pset[i]);
        }
      }
      pset = std::move(kept);
      if (pset.empty()) break;
    }
    for (std::size_t i = 0; i < pset.size(); ++i) res.weights[pset[i]] = z[i];
    recompute_residual();
  }
  fail("DidNotConverge", "exceeded max_iter");
}

// Expert output expressed as a non-negative combination of pretrain item
// representations; positions/items ranked by weight.
struct Attribution {
  int expert_slot = 0;             // flattened slot index
  int global_expert_index = 0;
  std::vector<double> weights;     // over pretrain item slots, in order
  struct TopItem {
    int segment_position = 0;      // index among pretrain items
    int item_id = 0;
    double weight = 0;
  };
  std::vector<TopItem> top_items;
  double residual_norm = 0;
};

inline std::vector<Attribution> attribute_experts(const Model& model,
                                                  const std::vector<int>& items,
                                                  const SegmentationPlan& plan,
                                                  int top_n, double tol = 1e-8) {
  if (plan.total_experts() == 0) fail("NoExperts", "plan has no expert slots");
  TokenLayout layout = layout_plan(plan);
  if (static_cast<int>(items.size()) != plan.total_items())
    fail("LengthMismatch", "items must cover the full plan");
  AttentionMask mask = segmented_mask(plan);
  ForwardTrace trace = forward(model, layout, items, mask);
  const int d = model.cfg.model_dim;

  // columns: final hidden states of item slots of every compressed segment
  std::vector<std::vector<double>> columns;
  std::vector<int> column_item;  // item id per column
  const int last_seg = plan.num_segments() - 1;
  for (int p = 0; p < layout.size(); ++p) {
    const Slot& s = layout.slots[p];
    if (!s.is_item() || s.segment_index == last_seg) continue;
    columns.emplace_back(
        trace.final_hidden.begin() + static_cast<std::size_t>(p) * d,
        trace.final_hidden.begin() + static_cast<std::size_t>(p + 1) * d);
    int item_index = 0;
    for (int q = 0; q < p; ++q) item_index += layout.slots[q].is_item();
    column_item.push_back(items[item_index]);
  }

  std::vector<Attribution> out;
  for (int p = 0; p < layout.size(); ++p) {
    if (!layout.slots[p].is_expert()) continue;
    std::vector<double> x(
        trace.final_hidden.begin() + static_cast<std::size_t>(p) * d,
        trace.final_hidden.begin() + static_cast<std::size_t>(p + 1) * d);
    NnlsResult fit = nnls(columns, x, tol);
    Attribution attr;
    attr.expert_slot = p;
    attr.global_expert_index = layout.slots[p].global_expert_index;
    attr.weights = fit.weights;
    attr.residual_norm = fit.residual_norm;
    std::vector<int> idx(columns.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      if (fit.weights[a] != fit.weights[b]) return fit.weights[a] > fit.weights[b];
      return a < b;
    });
    for (int i = 0; i < std::min<int>(top_n, static_cast<int>(idx.size())); ++i)
      attr.top_items.push_back(
          {idx[i], column_item[idx[i]], fit.weights[idx[i]]});
    out.push_back(std::move(attr));
  }
  return out;
}

}  // namespace persrec
