#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "icl/model.hpp"
#include "icl/oracle.hpp"
#include "icl/taskgen.hpp"
#include "icl/trainer.hpp"

namespace icl {

class AnalysisError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {

inline void require_pairs(std::span<const double> xs, std::span<const double> ys,
                          const char* what) {
  if (xs.size() != ys.size()) {
    throw DimensionError(std::string(what) + ": " + std::to_string(xs.size()) + " xs vs " +
                         std::to_string(ys.size()) + " ys");
  }
  if (xs.size() < 2) throw AnalysisError(std::string(what) + ": need at least 2 points");
}

}  // namespace detail

/// Sample Pearson correlation.
inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  detail::require_pairs(xs, ys, "pearson");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw AnalysisError("pearson: zero variance, correlation undefined");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based ranks; tied values share the mean of the ranks they span.
inline std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(std::span<const double> xs, std::span<const double> ys) {
  detail::require_pairs(xs, ys, "spearman");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  try {
    return pearson(rx, ry);
  } catch (const AnalysisError&) {
    throw AnalysisError("spearman: all-equal input, correlation undefined");
  }
}

struct RegressionReport {
  double pearson_r = 0.0;
  double spearman_rho = 0.0;
  double slope = 0.0;
  double intercept = 0.0;
  std::size_t n = 0;
};

/// Least-squares fit ys ~ slope * xs + intercept plus both correlations.
inline RegressionReport regress(std::span<const double> xs, std::span<const double> ys) {
  RegressionReport r;
  r.pearson_r = pearson(xs, ys);
  r.spearman_rho = spearman(xs, ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  r.slope = sxy / sxx;
  r.intercept = my - r.slope * mx;
  r.n = xs.size();
  return r;
}

/// Paired samples behind a regression, kept for CSV export.
struct PairedSamples {
  std::vector<double> x;
  std::vector<double> y;
};

struct RegressionResult {
  RegressionReport report;
  PairedSamples pairs;  // x = query LLR, y = model logit
};

/// Analysis episodes: stream i of `rng`, optionally with an OOD shift scale.
inline std::vector<Episode> analysis_episodes(TaskConfig task, std::size_t n, const Rng& rng,
                                              std::optional<double> ood_sigma_k = std::nullopt) {
  if (ood_sigma_k) task.sigma_k = *ood_sigma_k;
  return make_episodes(task, rng, n);
}

inline std::vector<double> query_llrs(std::span<const Episode> episodes) {
  std::vector<double> out;
  out.reserve(episodes.size());
  for (const Episode& ep : episodes) out.push_back(query_llr(ep));
  return out;
}

inline std::vector<double> predict_all(const Predictor& predict, std::span<const Episode> episodes,
                                       std::size_t chunk = 250) {
  std::vector<double> out;
  out.reserve(episodes.size());
  for (std::size_t start = 0; start < episodes.size(); start += chunk) {
    const auto part = predict(episodes.subspan(start, std::min(chunk, episodes.size() - start)));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

inline RegressionResult logit_llr_regression(const Predictor& predict,
                                             std::span<const Episode> episodes) {
  RegressionResult out;
  out.pairs.x = query_llrs(episodes);
  out.pairs.y = predict_all(predict, episodes);
  out.report = regress(out.pairs.x, out.pairs.y);
  return out;
}

inline RegressionResult logit_llr_regression(const IclModel& model, const TaskConfig& task,
                                             std::size_t n_episodes, const Rng& rng,
                                             std::optional<double> ood_sigma_k = std::nullopt) {
  if (n_episodes < 500) throw std::invalid_argument("logit_llr_regression: need >= 500 episodes");
  const auto episodes = analysis_episodes(task, n_episodes, rng, ood_sigma_k);
  return logit_llr_regression(model_predictor(model), episodes);
}

/// Nadaraya-Watson estimate with a dot-product kernel:
/// sum_i softmax_i(x_q . x_i) y_i.
inline double kernel_regression(const Episode& ep) {
  const std::size_t n = ep.n_context();
  if (n == 0) throw DimensionError("kernel_regression: empty context");
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto xi = ep.x(i);
    s[i] = std::inner_product(xi.begin(), xi.end(), ep.query_x.begin(), 0.0);
  }
  const double mx = *std::max_element(s.begin(), s.end());
  double total = 0.0, weighted = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = std::exp(s[i] - mx);
    total += w;
    weighted += w * static_cast<double>(ep.context_y[i]);
  }
  return weighted / total;
}

inline Predictor kernel_predictor() {
  return [](std::span<const Episode> batch) {
    std::vector<double> out;
    out.reserve(batch.size());
    for (const Episode& ep : batch) out.push_back(kernel_regression(ep));
    return out;
  };
}

inline Predictor oracle_predictor() {
  return [](std::span<const Episode> batch) { return query_llrs(batch); };
}

struct KernelComparison {
  RegressionReport report;
  PairedSamples pairs;  // x = kernel estimate, y = predictor output
};

/// Correlation between a predictor's scores and the kernel estimates.
inline KernelComparison compare_kernel(const Predictor& predict, std::span<const Episode> episodes) {
  KernelComparison out;
  out.pairs.x = predict_all(kernel_predictor(), episodes);
  out.pairs.y = predict_all(predict, episodes);
  out.report = regress(out.pairs.x, out.pairs.y);
  return out;
}

inline KernelComparison compare_kernel(const IclModel& model, const TaskConfig& task,
                                       std::size_t n_episodes, const Rng& rng) {
  const auto episodes = analysis_episodes(task, n_episodes, rng);
  return compare_kernel(model_predictor(model), episodes);
}

struct LensEntry {
  std::string probe;
  double pearson_r = 0.0;
  double spearman_rho = 0.0;
};

/// Probes in order: embedding, layer0, ..., layer{L-1}, logit.
struct LensProfile {
  std::vector<LensEntry> entries;
  /// Per probe, the decoded scalar for each episode.
  std::vector<std::vector<double>> values;
  std::vector<double> llr;

  const LensEntry& at(std::string_view probe) const {
    for (const auto& e : entries) {
      if (e.probe == probe) return e;
    }
    throw std::out_of_range("lens profile has no probe '" + std::string(probe) + "'");
  }
};

inline std::vector<std::string> lens_probe_names(std::size_t n_layers) {
  std::vector<std::string> names{"embedding"};
  for (std::size_t l = 0; l < n_layers; ++l) names.push_back("layer" + std::to_string(l));
  names.push_back("logit");
  return names;
}

/// Decodes the query residual at each probe point through the readout and
/// correlates the result with the query LLR.
inline LensProfile logit_lens(const IclModel& model, std::span<const Episode> episodes,
                              std::size_t chunk = 250) {
  const auto names = lens_probe_names(model.config().n_layers);
  LensProfile out;
  out.values.resize(names.size());
  out.llr = query_llrs(episodes);
  const std::size_t d = model.config().d_model;
  for (std::size_t start = 0; start < episodes.size(); start += chunk) {
    const auto part = episodes.subspan(start, std::min(chunk, episodes.size() - start));
    const auto fwd = forward_batch(model, part, true);
    for (std::size_t p = 0; p < fwd.residuals.size(); ++p) {
      const Tensor& r = fwd.residuals[p];
      for (std::size_t b = 0; b < part.size(); ++b) {
        out.values[p].push_back(readout(model, r.data().subspan(b * d, d)));
      }
    }
    out.values.back().insert(out.values.back().end(), fwd.logits.begin(), fwd.logits.end());
  }
  for (std::size_t p = 0; p < names.size(); ++p) {
    out.entries.push_back({names[p], pearson(out.llr, out.values[p]), spearman(out.llr, out.values[p])});
  }
  return out;
}

inline LensProfile logit_lens(const IclModel& model, const TaskConfig& task,
                              std::size_t n_episodes, const Rng& rng) {
  const auto episodes = analysis_episodes(task, n_episodes, rng);
  return logit_lens(model, episodes);
}

/// |cos(W r, r)| for a d x d map on row vectors and readout direction r.
inline double ov_alignment_score(const Tensor& w_ov, std::span<const double> r) {
  const std::size_t d = r.size();
  if (w_ov.rank() != 2 || w_ov.dim(0) != d || w_ov.dim(1) != d) {
    throw DimensionError("ov_alignment: W_OV " + shape_str(w_ov.shape()) +
                         " does not match readout of length " + std::to_string(d));
  }
  const Eigen::Map<const Eigen::VectorXd> rv(r.data(), static_cast<Eigen::Index>(d));
  const double rn = rv.norm();
  if (rn == 0.0) throw AnalysisError("ov_alignment: zero readout vector");
  const Eigen::VectorXd wr = detail::as_mat(w_ov, d, d) * rv;
  const double wn = wr.norm();
  if (wn == 0.0) return 0.0;
  return std::min(1.0, std::abs(wr.dot(rv)) / (wn * rn));
}

struct OvAlignmentMap {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::vector<double> scores;  // row-major [layer][head]

  double at(std::size_t layer, std::size_t head) const { return scores.at(layer * n_heads + head); }
  double max_in_layer(std::size_t layer) const {
    if (layer >= n_layers) throw std::out_of_range("ov alignment: layer out of range");
    const auto first = scores.begin() + static_cast<std::ptrdiff_t>(layer * n_heads);
    return *std::max_element(first, first + static_cast<std::ptrdiff_t>(n_heads));
  }
};

inline OvAlignmentMap ov_alignment(const IclModel& model) {
  const ModelConfig& cfg = model.config();
  OvAlignmentMap out{cfg.n_layers, cfg.n_heads, {}};
  const auto r = model.readout_w.value.data();
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      out.scores.push_back(ov_alignment_score(ov_matrix(model, l, h), r));
    }
  }
  return out;
}

}  // namespace icl
