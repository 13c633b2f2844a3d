#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "icl/model.hpp"
#include "icl/numerics/graph.hpp"
#include "icl/rng.hpp"
#include "icl/stats.hpp"
#include "icl/taskgen.hpp"

namespace icl {

struct TrainConfig {
  double lr_max = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  double adam_eps = 1e-8;
  std::size_t batch = 64;
  std::size_t epochs = 20;
  std::size_t steps_per_epoch = 500;
  std::size_t eval_episodes = 2000;
  // One-cycle schedule shape.
  double warmup_frac = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;

  std::size_t total_steps() const { return epochs * steps_per_epoch; }

  void validate() const {
    if (!(lr_max > 0) || !(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1) ||
        weight_decay < 0 || !(adam_eps > 0)) {
      throw std::invalid_argument("train config: optimizer settings out of range");
    }
    if (batch < 1 || epochs < 1 || steps_per_epoch < 1 || eval_episodes < 100) {
      throw std::invalid_argument("train config: batch, epochs, steps_per_epoch must be >= 1 "
                                  "and eval_episodes >= 100");
    }
    if (!(warmup_frac > 0 && warmup_frac < 1) || !(div_factor > 0) || !(final_div_factor > 0)) {
      throw std::invalid_argument("train config: schedule settings out of range");
    }
  }

  bool operator==(const TrainConfig&) const = default;
};

/// BCE of a single pre-sigmoid logit.
inline double bce_loss(double logit, int y) { return softplus(logit) - logit * y; }

/// One-cycle schedule: linear warmup from lr_max/div to lr_max over the first
/// `warmup_frac` of steps, then cosine decay to (lr_max/div)/final_div at the
/// last step.
inline double onecycle_lr(std::size_t step, std::size_t total_steps, double lr_max,
                          double warmup_frac = 0.3, double div_factor = 25.0,
                          double final_div_factor = 1e4) {
  if (step >= total_steps) {
    throw std::out_of_range("onecycle_lr: step " + std::to_string(step) + " >= total " +
                            std::to_string(total_steps));
  }
  const double initial = lr_max / div_factor;
  const double final_lr = initial / final_div_factor;
  const auto peak = static_cast<std::size_t>(warmup_frac * static_cast<double>(total_steps));
  if (step <= peak) {
    if (peak == 0) return lr_max;
    return initial + (lr_max - initial) * static_cast<double>(step) / static_cast<double>(peak);
  }
  const std::size_t last = total_steps - 1;
  const double frac = static_cast<double>(step - peak) / static_cast<double>(last - peak);
  return final_lr + (lr_max - final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

/// Per-Param first and second moments.
struct AdamWState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t t = 0;
};

/// Decoupled-decay AdamW. Frozen Params are skipped entirely.
inline void adamw_step(std::span<Param* const> params, AdamWState& state, double lr,
                       const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (Param* p : params) {
      state.m.push_back(Tensor::zeros_like(p->value));
      state.v.push_back(Tensor::zeros_like(p->value));
    }
  }
  if (state.m.size() != params.size()) {
    throw DimensionError("adamw_step: optimizer state holds " + std::to_string(state.m.size()) +
                         " tensors for " + std::to_string(params.size()) + " params");
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    if (state.m[i].shape() != p.value.shape() || p.grad.shape() != p.value.shape()) {
      throw DimensionError("adamw_step: shape mismatch for " + p.name);
    }
    if (!p.trainable) continue;
    auto& w = p.value.storage();
    const auto& g = p.grad.storage();
    auto& m = state.m[i].storage();
    auto& v = state.v[i].storage();
    const double decay = 1.0 - lr * cfg.weight_decay;
    for (std::size_t k = 0; k < w.size(); ++k) {
      w[k] *= decay;
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      w[k] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

/// Data-side settings of a training run.
struct DataConfig {
  TaskConfig task;
  Corruption corruption;
  bool operator==(const DataConfig&) const = default;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double train_acc = 0.0;  // on this step's batch
  std::optional<double> val_acc;  // set on the last step of each epoch
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct RunMetrics {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  double final_train_acc() const { return epochs.empty() ? 0.0 : epochs.back().train_acc; }
  double final_val_acc() const { return epochs.empty() ? 0.0 : epochs.back().val_acc; }
};

using Predictor = std::function<std::vector<double>(std::span<const Episode>)>;

inline Predictor model_predictor(const IclModel& model) {
  return [&model](std::span<const Episode> batch) { return forward_batch(model, batch).logits; };
}

/// Accuracy of sign(logit) against the query labels, threshold 0 (ties -> 1).
inline Estimate evaluate_on(const Predictor& predict, std::span<const Episode> episodes,
                            std::size_t chunk = 250) {
  if (episodes.empty()) throw std::invalid_argument("evaluate: no episodes");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < episodes.size(); start += chunk) {
    const auto part = episodes.subspan(start, std::min(chunk, episodes.size() - start));
    const auto logits = predict(part);
    for (std::size_t i = 0; i < part.size(); ++i) {
      correct += (logits[i] >= 0.0 ? 1 : 0) == part[i].query_y ? 1 : 0;
    }
  }
  return binomial_estimate(correct, episodes.size());
}

/// Episode i of a stream; independent of every other index.
inline Episode stream_episode(const TaskConfig& task, const Rng& stream, std::uint64_t index) {
  Rng r = stream.split(index);
  return sample_episode(task, r);
}

inline std::vector<Episode> make_episodes(const TaskConfig& task, const Rng& stream,
                                          std::size_t n) {
  std::vector<Episode> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(stream_episode(task, stream, i));
  return out;
}

/// Accuracy over `n_episodes` fresh episodes. `ood_sigma_k` replaces the
/// task's shift scale for out-of-distribution evaluation.
inline Estimate evaluate(const Predictor& predict, TaskConfig task, std::size_t n_episodes,
                         const Rng& rng, std::optional<double> ood_sigma_k = std::nullopt) {
  if (n_episodes < 100) throw std::invalid_argument("evaluate: need at least 100 episodes");
  if (ood_sigma_k) task.sigma_k = *ood_sigma_k;
  const auto episodes = make_episodes(task, rng, n_episodes);
  return evaluate_on(predict, episodes);
}

inline Estimate evaluate(const IclModel& model, const TaskConfig& task, std::size_t n_episodes,
                         const Rng& rng, std::optional<double> ood_sigma_k = std::nullopt) {
  return evaluate(model_predictor(model), task, n_episodes, rng, ood_sigma_k);
}

// Named sub-streams of a run seed.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kTrain = 2;
inline constexpr std::uint64_t kValidation = 3;
inline constexpr std::uint64_t kEvaluation = 4;
inline constexpr std::uint64_t kAnalysis = 5;
}  // namespace streams

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(std::size_t epoch, const IclModel&)> on_epoch;
};

struct TrainResult {
  IclModel model;
  RunMetrics metrics;
};

/// Trains on freshly generated episodes with BCE + AdamW + one-cycle. Fully
/// determined by (configs, seed). Throws NumericError naming the step if the
/// loss or any activation goes non-finite.
inline TrainResult train(const TrainConfig& cfg, const ModelConfig& model_cfg,
                         const DataConfig& data, std::uint64_t seed,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  model_cfg.validate();
  if (data.task.n_context != model_cfg.n_context || data.task.dim != model_cfg.input_dim) {
    throw std::invalid_argument("train: task and model disagree on context size or input dim");
  }
  const Rng root(seed);
  TrainResult result{IclModel(model_cfg, root.split(streams::kInit)), {}};
  IclModel& model = result.model;
  const Rng train_stream = root.split(streams::kTrain);
  const auto val_set = make_episodes(data.task, root.split(streams::kValidation), cfg.eval_episodes);

  auto params = model.parameters();
  AdamWState opt;
  const std::size_t total = cfg.total_steps();
  std::vector<Episode> batch(cfg.batch);
  std::vector<double> labels(cfg.batch);
  model.zero_grad();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::size_t epoch_correct = 0;
    for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s) {
      const std::size_t step = epoch * cfg.steps_per_epoch + s;
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        Rng r = train_stream.split(step * cfg.batch + b);
        batch[b] = corrupt(sample_episode(data.task, r), data.corruption, r);
        labels[b] = static_cast<double>(batch[b].query_y);
      }
      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.lr = onecycle_lr(step, total, cfg.lr_max, cfg.warmup_frac, cfg.div_factor,
                           cfg.final_div_factor);
      std::size_t correct = 0;
      try {
        Graph g;
        Var logits = forward_graph(g, model, batch);
        Var loss = bce_with_logits(logits, labels);
        rec.loss = loss.value().item();
        for (std::size_t b = 0; b < cfg.batch; ++b) {
          correct += (logits.value()[b] >= 0.0 ? 1 : 0) == batch[b].query_y ? 1 : 0;
        }
        g.backward(loss);
      } catch (const NumericError& e) {
        throw NumericError("training step " + std::to_string(step) + ": " + e.what());
      }
      adamw_step(params, opt, rec.lr, cfg);
      model.zero_grad();
      epoch_correct += correct;
      rec.train_acc = static_cast<double>(correct) / static_cast<double>(cfg.batch);
      if (s + 1 == cfg.steps_per_epoch) {
        const double val = evaluate_on(model_predictor(model), val_set).mean;
        rec.val_acc = val;
        result.metrics.epochs.push_back(
            {epoch,
             static_cast<double>(epoch_correct) /
                 static_cast<double>(cfg.batch * cfg.steps_per_epoch),
             val});
      }
      if (hooks.on_step) hooks.on_step(rec);
      result.metrics.steps.push_back(rec);
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch, model);
  }
  return result;
}

}  // namespace icl
