#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "icl/rng.hpp"

namespace icl {

inline constexpr std::size_t kInputDim = 16;
inline constexpr std::size_t kDefaultContext = 32;

enum class TaskFamily { A, B };

inline std::string_view to_string(TaskFamily f) { return f == TaskFamily::A ? "A" : "B"; }

inline TaskFamily parse_task_family(std::string_view s) {
  if (s == "A" || s == "a") return TaskFamily::A;
  if (s == "B" || s == "b") return TaskFamily::B;
  throw std::invalid_argument("unknown task family '" + std::string(s) + "'");
}

/// Shifted-mean task: x | y ~ N(k + (2y - 1) mu, I).
struct TaskAParams {
  std::vector<double> mu;
  std::vector<double> k;
  bool operator==(const TaskAParams&) const = default;
};

/// Variance task: x | y ~ N(0, sigma_y^2 I).
struct TaskBParams {
  double sigma0 = 1.0;
  double sigma1 = 1.0;
  bool operator==(const TaskBParams&) const = default;
};

using TaskParams = std::variant<TaskAParams, TaskBParams>;

inline TaskFamily family_of(const TaskParams& p) {
  return std::holds_alternative<TaskAParams>(p) ? TaskFamily::A : TaskFamily::B;
}

struct Episode {
  std::size_t dim = kInputDim;
  std::vector<double> context_x;  // n_context rows of `dim`, row-major
  std::vector<int> context_y;
  std::vector<double> query_x;
  int query_y = 0;
  /// False once labels were stripped; the model then embeds no label term.
  bool labels_present = true;
  TaskParams params;

  std::size_t n_context() const { return context_y.size(); }
  std::span<const double> x(std::size_t i) const { return {context_x.data() + i * dim, dim}; }
  std::span<double> x(std::size_t i) { return {context_x.data() + i * dim, dim}; }

  bool operator==(const Episode&) const = default;
};

/// Distribution settings shared by the generators.
struct TaskConfig {
  TaskFamily family = TaskFamily::A;
  double sigma_k = 3.0;
  double sigma_lo = 0.5;
  double sigma_hi = 3.0;
  std::size_t n_context = kDefaultContext;
  std::size_t dim = kInputDim;
  bool operator==(const TaskConfig&) const = default;
};

inline TaskAParams sample_task_a(Rng& rng, double sigma_k, std::size_t dim = kInputDim) {
  if (!(sigma_k > 0.0)) throw std::invalid_argument("sample_task_a: sigma_k must be positive");
  TaskAParams p;
  p.mu.resize(dim);
  p.k.resize(dim);
  double norm2 = 0.0;
  do {
    norm2 = 0.0;
    for (auto& v : p.mu) {
      v = rng.normal();
      norm2 += v * v;
    }
  } while (norm2 == 0.0);
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& v : p.mu) v *= inv;
  for (auto& v : p.k) v = sigma_k * rng.normal();
  return p;
}

inline TaskBParams sample_task_b(Rng& rng, double lo = 0.5, double hi = 3.0) {
  if (!(lo > 0.0) || !(hi >= lo)) throw std::invalid_argument("sample_task_b: need 0 < lo <= hi");
  TaskBParams p;
  p.sigma0 = rng.uniform(lo, hi);
  p.sigma1 = rng.uniform(lo, hi);
  return p;
}

namespace detail {

inline void draw_point(const TaskParams& params, int y, Rng& rng, std::span<double> out) {
  if (const auto* a = std::get_if<TaskAParams>(&params)) {
    const double sign = y == 1 ? 1.0 : -1.0;
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = a->k[j] + sign * a->mu[j] + rng.normal();
  } else {
    const auto& b = std::get<TaskBParams>(params);
    const double s = y == 1 ? b.sigma1 : b.sigma0;
    for (auto& v : out) v = s * rng.normal();
  }
}

inline std::size_t params_dim(const TaskParams& params, std::size_t fallback) {
  if (const auto* a = std::get_if<TaskAParams>(&params)) return a->mu.size();
  return fallback;
}

}  // namespace detail

/// Draws a labelled context of `n_context` points plus an independent query.
inline Episode generate_episode(const TaskParams& params, std::size_t n_context, Rng& rng,
                                std::size_t dim = kInputDim) {
  if (n_context < 1) throw std::invalid_argument("generate_episode: n_context must be >= 1");
  Episode ep;
  ep.dim = detail::params_dim(params, dim);
  ep.params = params;
  ep.context_x.resize(n_context * ep.dim);
  ep.context_y.resize(n_context);
  for (std::size_t i = 0; i < n_context; ++i) {
    ep.context_y[i] = rng.bernoulli(0.5) ? 1 : 0;
    detail::draw_point(params, ep.context_y[i], rng, ep.x(i));
  }
  ep.query_y = rng.bernoulli(0.5) ? 1 : 0;
  ep.query_x.resize(ep.dim);
  detail::draw_point(params, ep.query_y, rng, ep.query_x);
  return ep;
}

inline TaskParams sample_task(const TaskConfig& cfg, Rng& rng) {
  if (cfg.family == TaskFamily::A) return sample_task_a(rng, cfg.sigma_k, cfg.dim);
  return sample_task_b(rng, cfg.sigma_lo, cfg.sigma_hi);
}

/// Fresh task parameters and an episode drawn from them.
inline Episode sample_episode(const TaskConfig& cfg, Rng& rng) {
  return generate_episode(sample_task(cfg, rng), cfg.n_context, rng, cfg.dim);
}

enum class CorruptionMode { none, shuffled_labels, no_labels, noisy_labels, shuffled_context };

inline std::string_view to_string(CorruptionMode m) {
  switch (m) {
    case CorruptionMode::none: return "none";
    case CorruptionMode::shuffled_labels: return "shuffled_labels";
    case CorruptionMode::no_labels: return "no_labels";
    case CorruptionMode::noisy_labels: return "noisy_labels";
    case CorruptionMode::shuffled_context: return "shuffled_context";
  }
  return "none";
}

inline CorruptionMode parse_corruption(std::string_view s) {
  for (auto m : {CorruptionMode::none, CorruptionMode::shuffled_labels, CorruptionMode::no_labels,
                 CorruptionMode::noisy_labels, CorruptionMode::shuffled_context}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown corruption mode '" + std::string(s) + "'");
}

struct Corruption {
  CorruptionMode mode = CorruptionMode::none;
  double p = 0.0;  // flip probability for noisy_labels
  bool operator==(const Corruption&) const = default;
};

namespace detail {

template <class Swap>
void fisher_yates(std::size_t n, Rng& rng, Swap&& swap) {
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(i);
    swap(i - 1, j);
  }
}

}  // namespace detail

/// Context corruption used by the data ablations. The query is never touched.
inline Episode corrupt(Episode ep, const Corruption& c, Rng& rng) {
  switch (c.mode) {
    case CorruptionMode::none:
      break;
    case CorruptionMode::shuffled_labels:
      detail::fisher_yates(ep.n_context(), rng,
                           [&](std::size_t i, std::size_t j) { std::swap(ep.context_y[i], ep.context_y[j]); });
      break;
    case CorruptionMode::no_labels:
      ep.labels_present = false;
      break;
    case CorruptionMode::noisy_labels:
      if (!(c.p >= 0.0 && c.p <= 1.0)) {
        throw std::invalid_argument("noisy_labels: p must be in [0, 1]");
      }
      for (auto& y : ep.context_y) {
        if (rng.uniform() < c.p) y = 1 - y;
      }
      break;
    case CorruptionMode::shuffled_context:
      detail::fisher_yates(ep.n_context(), rng, [&](std::size_t i, std::size_t j) {
        std::swap(ep.context_y[i], ep.context_y[j]);
        std::swap_ranges(ep.x(i).begin(), ep.x(i).end(), ep.x(j).begin());
      });
      break;
    default:
      throw std::invalid_argument("unknown corruption mode");
  }
  return ep;
}

// JSON-lines record: {"task", "params", "context_x", "context_y", "query_x",
// "query_y", "labels_present"}.
inline nlohmann::json episode_to_json(const Episode& ep) {
  nlohmann::json j;
  j["task"] = std::string(to_string(family_of(ep.params)));
  if (const auto* a = std::get_if<TaskAParams>(&ep.params)) {
    j["params"] = {{"mu", a->mu}, {"k", a->k}};
  } else {
    const auto& b = std::get<TaskBParams>(ep.params);
    j["params"] = {{"sigma0", b.sigma0}, {"sigma1", b.sigma1}};
  }
  auto rows = nlohmann::json::array();
  for (std::size_t i = 0; i < ep.n_context(); ++i) {
    rows.push_back(std::vector<double>(ep.x(i).begin(), ep.x(i).end()));
  }
  j["context_x"] = std::move(rows);
  j["context_y"] = ep.context_y;
  j["query_x"] = ep.query_x;
  j["query_y"] = ep.query_y;
  j["labels_present"] = ep.labels_present;
  return j;
}

inline Episode episode_from_json(const nlohmann::json& j) {
  Episode ep;
  const auto family = parse_task_family(j.at("task").get<std::string>());
  if (family == TaskFamily::A) {
    TaskAParams a;
    a.mu = j.at("params").at("mu").get<std::vector<double>>();
    a.k = j.at("params").at("k").get<std::vector<double>>();
    ep.params = std::move(a);
  } else {
    TaskBParams b;
    b.sigma0 = j.at("params").at("sigma0").get<double>();
    b.sigma1 = j.at("params").at("sigma1").get<double>();
    ep.params = b;
  }
  ep.query_x = j.at("query_x").get<std::vector<double>>();
  ep.dim = ep.query_x.size();
  for (const auto& row : j.at("context_x")) {
    auto r = row.get<std::vector<double>>();
    if (r.size() != ep.dim) throw std::invalid_argument("episode json: ragged context_x");
    ep.context_x.insert(ep.context_x.end(), r.begin(), r.end());
  }
  ep.context_y = j.at("context_y").get<std::vector<int>>();
  if (ep.context_y.size() * ep.dim != ep.context_x.size()) {
    throw std::invalid_argument("episode json: context_x/context_y length mismatch");
  }
  for (int y : ep.context_y) {
    if (y != 0 && y != 1) throw std::invalid_argument("episode json: labels must be 0 or 1");
  }
  ep.query_y = j.at("query_y").get<int>();
  ep.labels_present = j.value("labels_present", true);
  return ep;
}

}  // namespace icl
