#pragma once

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>

namespace icl {

/// Point estimate with a symmetric 95% confidence half-width.
struct Estimate {
  double mean = 0.0;
  double half_width = 0.0;
  std::size_t n = 0;
};

/// Normal approximation to the binomial proportion.
inline Estimate binomial_estimate(std::size_t successes, std::size_t trials) {
  if (trials == 0) throw std::invalid_argument("binomial_estimate: zero trials");
  const double p = static_cast<double>(successes) / static_cast<double>(trials);
  const double se = std::sqrt(p * (1.0 - p) / static_cast<double>(trials));
  return {p, 1.959963984540054 * se, trials};
}

/// Mean of per-seed values with a Student-t interval on n - 1 degrees of freedom.
inline Estimate seed_estimate(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("seed_estimate: no values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() == 1) return {mean, 0.0, 1};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  boost::math::students_t dist(n - 1.0);
  const double t = boost::math::quantile(boost::math::complement(dist, 0.025));
  return {mean, t * sd / std::sqrt(n), values.size()};
}

}  // namespace icl
