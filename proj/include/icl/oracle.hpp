#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <variant>

#include "icl/rng.hpp"
#include "icl/stats.hpp"
#include "icl/taskgen.hpp"

namespace icl {

/// Task A log-likelihood ratio: 2 mu.x - 2 mu.k (natural log).
inline double llr_task_a(std::span<const double> x, const TaskAParams& p) {
  if (x.size() != p.mu.size()) throw std::invalid_argument("llr_task_a: dimension mismatch");
  double mx = 0.0, mk = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += p.mu[i] * x[i];
    mk += p.mu[i] * p.k[i];
  }
  return 2.0 * mx - 2.0 * mk;
}

/// Task B log-likelihood ratio:
/// (d/2) ln(s0^2/s1^2) + (|x|^2/2)(1/s0^2 - 1/s1^2).
inline double llr_task_b(std::span<const double> x, const TaskBParams& p) {
  if (!(p.sigma0 > 0.0) || !(p.sigma1 > 0.0)) {
    throw std::invalid_argument("llr_task_b: scales must be positive");
  }
  double norm2 = 0.0;
  for (double v : x) norm2 += v * v;
  const double s0 = p.sigma0 * p.sigma0, s1 = p.sigma1 * p.sigma1;
  const double d = static_cast<double>(x.size());
  return 0.5 * d * std::log(s0 / s1) + 0.5 * norm2 * (1.0 / s0 - 1.0 / s1);
}

inline double llr(std::span<const double> x, const TaskParams& params) {
  if (const auto* a = std::get_if<TaskAParams>(&params)) return llr_task_a(x, *a);
  return llr_task_b(x, std::get<TaskBParams>(params));
}

/// Query LLR under the true task parameters; the context is not consulted.
inline double query_llr(const Episode& ep) { return llr(ep.query_x, ep.params); }

/// Balanced-prior Bayes rule. Ties go to class 1.
inline int bayes_predict(double llr_value) { return llr_value >= 0.0 ? 1 : 0; }

/// Monte Carlo accuracy of the oracle over fresh episodes. Episode i uses
/// stream i of `rng`, so results do not depend on evaluation order.
inline Estimate oracle_accuracy(const TaskConfig& cfg, std::size_t n_episodes, const Rng& rng) {
  if (n_episodes < 1000) throw std::invalid_argument("oracle_accuracy: need at least 1000 episodes");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n_episodes; ++i) {
    Rng er = rng.split(i);
    const TaskParams params = sample_task(cfg, er);
    // Only the query matters to the oracle; skip materializing the context.
    Episode ep = generate_episode(params, 1, er, cfg.dim);
    correct += bayes_predict(query_llr(ep)) == ep.query_y ? 1 : 0;
  }
  return binomial_estimate(correct, n_episodes);
}

}  // namespace icl
