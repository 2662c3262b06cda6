#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <thread>
#include <vector>

#include "persrec/maskgen.hpp"
#include "persrec/tinyformer.hpp"

namespace persrec {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.1;
  int batch_size = 32;
  int epochs = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // max global norm; <= 0 disables
  std::uint32_t seed = 0;
  int threads = 1;
};

inline void validate_train_config(const TrainConfig& cfg) {
  if (cfg.learning_rate <= 0 || cfg.epochs < 1 || cfg.batch_size < 1)
    fail("InvalidConfig", "learning_rate > 0, epochs >= 1, batch_size >= 1");
}

struct AdamState {
  std::vector<double> m, v;
  long long step = 0;
};

inline AdamState make_adam_state(const Model& model) {
  AdamState s;
  s.m.assign(model.param_count(), 0.0);
  s.v.assign(model.param_count(), 0.0);
  return s;
}

// Decoupled-weight-decay Adam with bias correction. Gradient clipping by
// global norm happens before the moment update.
inline void adam_step(Model& model, std::vector<double>& grads,
                      AdamState& state, const TrainConfig& cfg) {
  if (grads.size() != model.param_count() ||
      state.m.size() != model.param_count())
    fail("ShapeMismatch", "gradient/state size mismatch");
  double norm_sq = 0;
  for (double g : grads) {
    if (!std::isfinite(g)) fail("NonFiniteGradient", "gradient is not finite");
    norm_sq += g * g;
  }
  if (cfg.grad_clip > 0) {
    double norm = std::sqrt(norm_sq);
    if (norm > cfg.grad_clip) {
      double s = cfg.grad_clip / norm;
      for (double& g : grads) g *= s;
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    double mhat = state.m[i] / bc1;
    double vhat = state.v[i] / bc2;
    model.params[i] -= cfg.learning_rate *
                       (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                        cfg.weight_decay * model.params[i]);
  }
}

struct TrainStats {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_seconds;
  std::vector<double> tokens_per_sec;

  std::string csv() const {
    std::string out = "epoch,loss,seconds,tokens_per_sec\n";
    for (std::size_t e = 0; e < epoch_loss.size(); ++e)
      out += std::to_string(e) + "," + std::to_string(epoch_loss[e]) + "," +
             std::to_string(epoch_seconds[e]) + "," +
             std::to_string(tokens_per_sec[e]) + "\n";
    return out;
  }
};

// Per-length layout/mask cache; users shorter than the plan fall back to a
// single-segment plan over what they have.
struct PlanContext {
  TokenLayout layout;
  AttentionMask mask;
  LossMask lmask;
};

inline const PlanContext& plan_context_for_length(
    const SegmentationPlan& plan, int length,
    std::map<int, PlanContext>& cache) {
  auto it = cache.find(length);
  if (it != cache.end()) return it->second;
  SegmentationPlan p = length == plan.total_items()
                           ? plan
                           : build_plan({length}, {0});
  PlanContext ctx;
  ctx.layout = layout_plan(p);
  ctx.mask = segmented_mask(p);
  ctx.lmask = loss_mask(ctx.layout);
  return cache.emplace(length, std::move(ctx)).first->second;
}

// Epochs of user-shuffled mini-batches; per-user gradients are computed in
// parallel and reduced in fixed user order, so thread count never changes
// the result.
inline TrainStats train(Model& model, const std::vector<std::vector<int>>& users,
                        const SegmentationPlan& plan, const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (users.empty()) fail("EmptyDataset", "no training sequences");
  for (const auto& u : users)
    if (static_cast<int>(u.size()) > plan.total_items())
      fail("LengthMismatch", "training sequence longer than plan");

  std::map<int, PlanContext> contexts;
  AdamState state = make_adam_state(model);
  Rng shuffle_rng(0x7a11a5ull ^ (static_cast<std::uint64_t>(cfg.seed) << 1));
  TrainStats stats;
  const int threads = std::max(1, cfg.threads);

  std::vector<int> order(users.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  long long total_tokens = 0;
  for (const auto& u : users) total_tokens += static_cast<long long>(u.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);
    double epoch_loss = 0;
    long long batches = 0;
    std::vector<double> batch_grads(model.param_count());
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const int nb = static_cast<int>(end - start);
      // make sure contexts exist before parallel use
      for (int b = 0; b < nb; ++b)
        plan_context_for_length(
            plan, static_cast<int>(users[order[start + b]].size()), contexts);

      std::vector<std::vector<double>> grads(nb);
      std::vector<double> losses(nb, 0.0);
      auto worker = [&](int tid) {
        for (int b = tid; b < nb; b += threads) {
          const std::vector<int>& seq = users[order[start + b]];
          const PlanContext& ctx = plan_context_for_length(
              plan, static_cast<int>(seq.size()), contexts);
          losses[b] =
              loss_and_grads(model, ctx.layout, seq, ctx.mask, ctx.lmask, grads[b]);
        }
      };
      if (threads == 1) {
        worker(0);
      } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
        for (auto& t : pool) t.join();
      }

      std::fill(batch_grads.begin(), batch_grads.end(), 0.0);
      const double inv = 1.0 / nb;
      for (int b = 0; b < nb; ++b) {
        epoch_loss += losses[b];
        for (std::size_t i = 0; i < batch_grads.size(); ++i)
          batch_grads[i] += grads[b][i] * inv;
      }
      adam_step(model, batch_grads, state, cfg);
      ++batches;
    }
    auto t1 = std::chrono::steady_clock::now();
    double secs = std::chrono::duration<double>(t1 - t0).count();
    stats.epoch_loss.push_back(epoch_loss / static_cast<double>(users.size()));
    stats.epoch_seconds.push_back(secs);
    stats.tokens_per_sec.push_back(secs > 0 ? total_tokens / secs : 0.0);
  }
  return stats;
}

}  // namespace persrec
