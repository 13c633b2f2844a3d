#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "icl/numerics/graph.hpp"

namespace icl {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  /// Every frozen Param came back from backward with an all-zero grad.
  bool frozen_grads_zero = true;
};

/// Compares reverse-mode gradients against central differences.
///
/// `loss_fn` records a scalar loss on the supplied graph using `params`. Up to
/// `max_coords` coordinates per trainable Param are sampled (all of them if the
/// Param is smaller); relative error is |a - c| / (|a| + |c| + 1e-8).
template <class Engine>
GradCheckReport grad_check(const std::function<Var(Graph&)>& loss_fn,
                           std::span<Param* const> params, double eps, Engine& rng,
                           std::size_t max_coords = 100) {
  if (eps < 1e-6 || eps > 1e-4) throw std::invalid_argument("grad_check: eps must be in [1e-6, 1e-4]");
  for (Param* p : params) p->zero_grad();
  {
    Graph g;
    Var loss = loss_fn(g);
    g.backward(loss);
  }
  auto eval = [&] {
    Graph g;
    return loss_fn(g).value().item();
  };

  GradCheckReport report;
  for (Param* p : params) {
    if (!p->trainable) {
      report.frozen_grads_zero =
          report.frozen_grads_zero &&
          std::all_of(p->grad.data().begin(), p->grad.data().end(),
                      [](double v) { return v == 0.0; });
      continue;
    }
    std::vector<std::size_t> coords(p->value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (std::size_t c : coords) {
      const double saved = p->value[c];
      p->value[c] = saved + eps;
      const double up = eval();
      p->value[c] = saved - eps;
      const double down = eval();
      p->value[c] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p->grad[c];
      const double rel = std::abs(analytic - numeric) /
                         (std::abs(analytic) + std::abs(numeric) + 1e-8);
      report.max_rel_error = std::max(report.max_rel_error, rel);
      ++report.coords_checked;
    }
  }
  return report;
}

}  // namespace icl
