#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "icl/numerics/tensor.hpp"

namespace icl {

class Graph;

/// Handle to a node recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Define-by-run tape. Nodes are appended in execution order, so the node list
/// is already topologically sorted; backward walks it in reverse.
class Graph {
 public:
  using Backprop = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t) { return push(std::move(t), false, nullptr, {}, "constant"); }

  /// Leaf bound to a Param. Gradients flow back into `p.grad` only if trainable.
  Var param(Param& p) {
    return push(p.value, p.trainable, &p, {}, p.name.empty() ? "param" : p.name.c_str());
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Zero-initialized gradient buffer of a node, allocated on first use.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor::zeros_like(n.value);
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient buffer plus whether it was just allocated. A fresh buffer is
  /// uninitialized: the caller must overwrite every element instead of adding.
  struct GradSlot {
    Tensor& t;
    bool fresh;
  };
  GradSlot grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape(), uninitialized);
      n.has_grad = true;
      return {n.grad, true};
    }
    return {n.grad, false};
  }

  /// Records an op result. The backprop closure receives the graph and the
  /// output node id; it reads grad(self) and accumulates into its inputs.
  Var push(Tensor value, bool requires_grad, Param* param, Backprop backprop, const char* op) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite values produced by op '") + op + "'");
    }
    nodes_.push_back(
        Node{std::move(value), Tensor{}, false, requires_grad, param, std::move(backprop), op});
    return Var{this, nodes_.size() - 1};
  }

  /// Reverse-mode sweep from a scalar loss. Accumulates into trainable Params.
  void backward(Var loss) {
    if (consumed_) throw std::logic_error("graph already consumed by backward()");
    if (loss.graph != this) throw std::invalid_argument("loss belongs to a different graph");
    if (value(loss).size() != 1) {
      throw DimensionError("backward() requires a scalar loss, got shape " +
                           shape_str(value(loss).shape()));
    }
    consumed_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.has_grad) continue;
      if (n.backprop) n.backprop(*this, i);
      if (n.param != nullptr && n.param->trainable) {
        auto& dst = n.param->grad.storage();
        const auto& src = n.grad.storage();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
      // Intermediate gradients are dead once propagated.
      if (n.param == nullptr) n.grad = Tensor{};
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Param* param = nullptr;
    Backprop backprop;
    const char* op = "";
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using ArrMap = Eigen::Map<Eigen::ArrayXd>;
using CArrMap = Eigen::Map<const Eigen::ArrayXd>;

inline MatMap as_mat(Tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return MatMap(t.raw() + offset, static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}
inline CMatMap as_mat(const Tensor& t, std::size_t rows, std::size_t cols,
                      std::size_t offset = 0) {
  return CMatMap(t.raw() + offset, static_cast<Eigen::Index>(rows),
                 static_cast<Eigen::Index>(cols));
}
inline ArrMap as_arr(Tensor& t) { return ArrMap(t.raw(), static_cast<Eigen::Index>(t.size())); }
inline CArrMap as_arr(const Tensor& t) {
  return CArrMap(t.raw(), static_cast<Eigen::Index>(t.size()));
}

inline Graph& same_graph(Var a, Var b) {
  if (a.graph != b.graph || a.graph == nullptr) {
    throw std::invalid_argument("operands recorded on different graphs");
  }
  return *a.graph;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape()));
  }
}

inline void accumulate(Tensor& dst, const Tensor& src) { as_arr(dst) += as_arr(src); }

/// grad(id) += expr for an elementwise Eigen array expression.
template <class Expr>
void add_to_grad(Graph& g, std::size_t id, const Expr& expr) {
  auto slot = g.grad_slot(id);
  if (slot.fresh) {
    as_arr(slot.t) = expr;
  } else {
    as_arr(slot.t) += expr;
  }
}

/// grad(id)[block] += expr for a matrix product expression.
template <class Expr>
void gemm_to_grad(Tensor& dst, bool fresh, std::size_t rows, std::size_t cols,
                  std::size_t offset, const Expr& expr) {
  auto m = as_mat(dst, rows, cols, offset);
  if (fresh) {
    m.noalias() = expr;
  } else {
    m.noalias() += expr;
  }
}

}  // namespace detail

/// x[m x k] * w[k x n] (+ bias[n] broadcast over rows).
inline Var linear(Var x, Var w, std::optional<Var> bias = std::nullopt) {
  Graph& g = detail::same_graph(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  detail::require_rank(xv, 2, "matmul");
  detail::require_rank(wv, 2, "matmul");
  if (xv.dim(1) != wv.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(xv.shape()) +
                         " x " + shape_str(wv.shape()));
  }
  const std::size_t m = xv.dim(0), k = xv.dim(1), n = wv.dim(1);
  Tensor out({m, n}, uninitialized);
  auto om = detail::as_mat(out, m, n);
  bool rg = g.requires_grad(x) || g.requires_grad(w);
  if (bias) {
    detail::same_graph(x, *bias);
    const Tensor& bv = bias->value();
    if (bv.size() != n) {
      throw DimensionError("linear: bias " + shape_str(bv.shape()) + " for output width " +
                           std::to_string(n));
    }
    om.rowwise() = detail::as_mat(bv, 1, n).row(0);
    om.noalias() += detail::as_mat(xv, m, k) * detail::as_mat(wv, k, n);
    rg = rg || g.requires_grad(*bias);
  } else {
    om.noalias() = detail::as_mat(xv, m, k) * detail::as_mat(wv, k, n);
  }
  const std::optional<std::size_t> ib = bias ? std::optional(bias->id) : std::nullopt;
  return g.push(
      std::move(out), rg, nullptr,
      [ix = x.id, iw = w.id, ib, m, k, n](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        const auto dym = detail::as_mat(dy, m, n);
        if (gr.requires_grad(ix)) {
          auto slot = gr.grad_slot(ix);
          detail::gemm_to_grad(slot.t, slot.fresh, m, k, 0,
                               dym * detail::as_mat(gr.value(iw), k, n).transpose());
        }
        if (gr.requires_grad(iw)) {
          auto slot = gr.grad_slot(iw);
          detail::gemm_to_grad(slot.t, slot.fresh, k, n, 0,
                               detail::as_mat(gr.value(ix), m, k).transpose() * dym);
        }
        if (ib && gr.requires_grad(*ib)) {
          auto slot = gr.grad_slot(*ib);
          auto db = detail::as_mat(slot.t, 1, n);
          if (slot.fresh) {
            db = dym.colwise().sum();
          } else {
            db += dym.colwise().sum();
          }
        }
      },
      bias ? "linear" : "matmul");
}

/// a[m x k] * b[k x n]
inline Var matmul(Var a, Var b) { return linear(a, b); }

/// Batched product over the leading axis, alpha * a[b x m x k] * b[b x k x n],
/// or alpha * a * b^T when `transpose_b` (b is then [b x n x k]).
inline Var bmm(Var a, Var b, bool transpose_b = false, double alpha = 1.0) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank(av, 3, "bmm");
  detail::require_rank(bv, 3, "bmm");
  const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  if (bv.dim(0) != batch || bk != k) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()) + (transpose_b ? "^T" : ""));
  }
  Tensor out({batch, m, n}, uninitialized);
  for (std::size_t i = 0; i < batch; ++i) {
    auto A = detail::as_mat(av, m, k, i * m * k);
    auto C = detail::as_mat(out, m, n, i * m * n);
    if (transpose_b) {
      C.noalias() = alpha * (A * detail::as_mat(bv, n, k, i * n * k).transpose());
    } else {
      C.noalias() = alpha * (A * detail::as_mat(bv, k, n, i * k * n));
    }
  }
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.push(
      std::move(out), rg, nullptr,
      [ia = a.id, ib = b.id, batch, m, k, n, transpose_b, alpha](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        const bool ga = gr.requires_grad(ia), gb = gr.requires_grad(ib);
        // Same node on both sides: fall back to accumulation into zeros.
        const bool aliased = ia == ib;
        Tensor* da = nullptr;
        Tensor* db = nullptr;
        bool fa = false, fb = false;
        if (ga) {
          if (aliased) {
            da = &gr.grad(ia);
          } else {
            auto s = gr.grad_slot(ia);
            da = &s.t;
            fa = s.fresh;
          }
        }
        if (gb) {
          if (aliased) {
            db = &gr.grad(ib);
          } else {
            auto s = gr.grad_slot(ib);
            db = &s.t;
            fb = s.fresh;
          }
        }
        const Tensor& av2 = gr.value(ia);
        const Tensor& bv2 = gr.value(ib);
        for (std::size_t i = 0; i < batch; ++i) {
          const auto dC = detail::as_mat(dy, m, n, i * m * n);
          const auto A = detail::as_mat(av2, m, k, i * m * k);
          if (transpose_b) {
            const auto B = detail::as_mat(bv2, n, k, i * n * k);
            if (ga) detail::gemm_to_grad(*da, fa, m, k, i * m * k, alpha * (dC * B));
            if (gb) detail::gemm_to_grad(*db, fb, n, k, i * n * k, alpha * (dC.transpose() * A));
          } else {
            const auto B = detail::as_mat(bv2, k, n, i * k * n);
            if (ga) detail::gemm_to_grad(*da, fa, m, k, i * m * k, alpha * (dC * B.transpose()));
            if (gb) detail::gemm_to_grad(*db, fb, k, n, i * k * n, alpha * (A.transpose() * dC));
          }
        }
      },
      "bmm");
}

inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor out(a.shape(), uninitialized);
  detail::as_arr(out) = detail::as_arr(a.value()) + detail::as_arr(b.value());
  return g.push(std::move(out), g.requires_grad(a) || g.requires_grad(b), nullptr,
                [ia = a.id, ib = b.id](Graph& gr, std::size_t self) {
                  const auto dy = detail::as_arr(gr.grad(self));
                  if (gr.requires_grad(ia)) detail::add_to_grad(gr, ia, dy);
                  if (gr.requires_grad(ib)) detail::add_to_grad(gr, ib, dy);
                },
                "add");
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor out(a.shape(), uninitialized);
  detail::as_arr(out) = detail::as_arr(a.value()) * detail::as_arr(b.value());
  return g.push(std::move(out), g.requires_grad(a) || g.requires_grad(b), nullptr,
                [ia = a.id, ib = b.id](Graph& gr, std::size_t self) {
                  const auto dy = detail::as_arr(gr.grad(self));
                  if (gr.requires_grad(ia)) {
                    detail::as_arr(gr.grad(ia)) += dy * detail::as_arr(gr.value(ib));
                  }
                  if (gr.requires_grad(ib)) {
                    detail::as_arr(gr.grad(ib)) += dy * detail::as_arr(gr.value(ia));
                  }
                },
                "mul");
}

inline Var scale(Var a, double c) {
  Graph& g = *a.graph;
  Tensor out(a.shape(), uninitialized);
  detail::as_arr(out) = c * detail::as_arr(a.value());
  return g.push(std::move(out), g.requires_grad(a), nullptr,
                [ia = a.id, c](Graph& gr, std::size_t self) {
                  detail::add_to_grad(gr, ia, c * detail::as_arr(gr.grad(self)));
                },
                "scale");
}

/// x[m x n] + bias broadcast over rows; bias has n elements (any shape).
inline Var add_bias(Var x, Var bias) {
  Graph& g = detail::same_graph(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  detail::require_rank(xv, 2, "add_bias");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (bv.size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " vs rows of " +
                         shape_str(xv.shape()));
  }
  Tensor out(xv.shape(), uninitialized);
  detail::as_mat(out, m, n) =
      detail::as_mat(xv, m, n).rowwise() + detail::as_mat(bv, 1, n).row(0);
  return g.push(std::move(out), g.requires_grad(x) || g.requires_grad(bias), nullptr,
                [ix = x.id, ib = bias.id, m, n](Graph& gr, std::size_t self) {
                  const Tensor& dy = gr.grad(self);
                  if (gr.requires_grad(ix)) detail::add_to_grad(gr, ix, detail::as_arr(dy));
                  if (gr.requires_grad(ib)) {
                    detail::as_mat(gr.grad(ib), 1, n) += detail::as_mat(dy, m, n).colwise().sum();
                  }
                },
                "add_bias");
}

/// Standard normal CDF.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// Exact (erf-based) GELU: x * Phi(x).
inline double gelu_scalar(double x) { return x * normal_cdf(x); }

inline Var gelu(Var a) {
  Graph& g = *a.graph;
  const Tensor& xv = a.value();
  Tensor out(xv.shape(), uninitialized);
  Tensor cdf(xv.shape(), uninitialized);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    cdf[i] = normal_cdf(xv[i]);
    out[i] = xv[i] * cdf[i];
  }
  return g.push(std::move(out), g.requires_grad(a), nullptr,
                [ia = a.id, cdf = std::move(cdf)](Graph& gr, std::size_t self) {
                  constexpr double inv_sqrt_2pi = 0.3989422804014327;
                  const auto x = detail::as_arr(gr.value(ia));
                  const auto dy = detail::as_arr(gr.grad(self));
                  // d/dx [x Phi(x)] = Phi(x) + x phi(x)
                  detail::add_to_grad(
                      gr, ia,
                      dy * (detail::as_arr(cdf) + x * inv_sqrt_2pi * (-0.5 * x * x).exp()));
                },
                "gelu");
}

/// Max-subtracted softmax along `axis`.
inline Var softmax(Var a, std::size_t axis) {
  Graph& g = *a.graph;
  const Tensor& xv = a.value();
  if (axis >= xv.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(xv.shape()));
  }
  std::size_t outer = 1, inner = 1;
  const std::size_t len = xv.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  Tensor out(xv.shape(), uninitialized);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] *= inv;
    }
  }
  return g.push(std::move(out), g.requires_grad(a), nullptr,
                [ia = a.id, outer, inner, len](Graph& gr, std::size_t self) {
                  const Tensor& y = gr.value(self);
                  const Tensor& dy = gr.grad(self);
                  Tensor& dx = gr.grad(ia);
                  for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t in = 0; in < inner; ++in) {
                      const std::size_t base = o * len * inner + in;
                      double dot = 0.0;
                      for (std::size_t j = 0; j < len; ++j) {
                        dot += dy[base + j * inner] * y[base + j * inner];
                      }
                      for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t p = base + j * inner;
                        dx[p] += y[p] * (dy[p] - dot);
                      }
                    }
                  }
                },
                "softmax");
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row over the last dimension, then applies gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = kLayerNormEps) {
  Graph& g = detail::same_graph(x, gain);
  detail::same_graph(x, bias);
  const Tensor& xv = x.value();
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.size() / n;
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias length must equal last dim of " +
                         shape_str(xv.shape()));
  }
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape(), uninitialized);
  Tensor xhat(xv.shape(), uninitialized);
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.raw() + r * n;
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(n);
    if (!std::isfinite(var)) throw NumericError("non-finite variance in op 'layer_norm'");
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mean) * is;
      xhat[r * n + c] = h;
      out[r * n + c] = h * gv[c] + bv[c];
    }
  }
  const bool rg = g.requires_grad(x) || g.requires_grad(gain) || g.requires_grad(bias);
  return g.push(
      std::move(out), rg, nullptr,
      [ix = x.id, ig = gain.id, ib = bias.id, rows, n, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& gv2 = gr.value(ig);
        if (gr.requires_grad(ig)) {
          Tensor& dg = gr.grad(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) dg[c] += dy[r * n + c] * xhat[r * n + c];
        }
        if (gr.requires_grad(ib)) {
          Tensor& db = gr.grad(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) db[c] += dy[r * n + c];
        }
        if (gr.requires_grad(ix)) {
          auto slot = gr.grad_slot(ix);
          Tensor& dx = slot.t;
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dh = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              const double d = dy[r * n + c] * gv2[c];
              mean_d += d;
              mean_dh += d * xhat[r * n + c];
            }
            mean_d *= inv_n;
            mean_dh *= inv_n;
            for (std::size_t c = 0; c < n; ++c) {
              const double d = dy[r * n + c] * gv2[c];
              const double v = inv_std[r] * (d - mean_d - xhat[r * n + c] * mean_dh);
              if (slot.fresh) {
                dx[r * n + c] = v;
              } else {
                dx[r * n + c] += v;
              }
            }
          }
        }
      },
      "layer_norm");
}

inline Var reshape(Var a, Shape shape) {
  Graph& g = *a.graph;
  Tensor out = a.value().reshaped(std::move(shape));
  return g.push(std::move(out), g.requires_grad(a), nullptr,
                [ia = a.id](Graph& gr, std::size_t self) {
                  detail::add_to_grad(gr, ia, detail::as_arr(gr.grad(self)));
                },
                "reshape");
}

/// [a, b, c, d] -> [a, c, b, d].
inline Var swap_middle_axes(Var x) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  detail::require_rank(xv, 4, "swap_middle_axes");
  const std::size_t A = xv.dim(0), B = xv.dim(1), C = xv.dim(2), D = xv.dim(3);
  Tensor out({A, C, B, D}, uninitialized);
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const double* src = xv.raw() + ((a * B + b) * C + c) * D;
        double* dst = out.raw() + ((a * C + c) * B + b) * D;
        std::copy(src, src + D, dst);
      }
  return g.push(std::move(out), g.requires_grad(x), nullptr,
                [ix = x.id, A, B, C, D](Graph& gr, std::size_t self) {
                  const Tensor& dy = gr.grad(self);
                  Tensor& dx = gr.grad(ix);
                  for (std::size_t a = 0; a < A; ++a)
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t c = 0; c < C; ++c) {
                        const double* src = dy.raw() + ((a * C + c) * B + b) * D;
                        double* dst = dx.raw() + ((a * B + b) * C + c) * D;
                        for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
                      }
                },
                "swap_middle_axes");
}

namespace detail {

// Copies between token-major [groups*T x H*dh] and head-major
// [groups*H x T x dh] layouts. `to_heads` selects the direction.
inline void permute_heads(const double* src, double* dst, std::size_t groups, std::size_t T,
                          std::size_t H, std::size_t dh, bool to_heads, bool add) {
  for (std::size_t b = 0; b < groups; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t tok = ((b * T + t) * H + h) * dh;
        const std::size_t head = ((b * H + h) * T + t) * dh;
        const double* s = src + (to_heads ? tok : head);
        double* d = dst + (to_heads ? head : tok);
        if (add) {
          for (std::size_t i = 0; i < dh; ++i) d[i] += s[i];
        } else {
          std::copy(s, s + dh, d);
        }
      }
}

}  // namespace detail

/// [groups*T x H*dh] -> [groups*H x T x dh]
inline Var split_heads(Var x, std::size_t groups, std::size_t T, std::size_t H) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  detail::require_rank(xv, 2, "split_heads");
  if (xv.dim(0) != groups * T || xv.dim(1) % H != 0) {
    throw DimensionError("split_heads: cannot split " + shape_str(xv.shape()) + " into " +
                         std::to_string(groups) + " groups of " + std::to_string(T) +
                         " tokens and " + std::to_string(H) + " heads");
  }
  const std::size_t dh = xv.dim(1) / H;
  Tensor out({groups * H, T, dh}, uninitialized);
  detail::permute_heads(xv.raw(), out.raw(), groups, T, H, dh, true, false);
  return g.push(std::move(out), g.requires_grad(x), nullptr,
                [ix = x.id, groups, T, H, dh](Graph& gr, std::size_t self) {
                  auto slot = gr.grad_slot(ix);
                  detail::permute_heads(gr.grad(self).raw(), slot.t.raw(), groups, T, H, dh,
                                        false, !slot.fresh);
                },
                "split_heads");
}

/// [groups*H x T x dh] -> [groups*T x H*dh]
inline Var merge_heads(Var x, std::size_t groups, std::size_t H) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  detail::require_rank(xv, 3, "merge_heads");
  if (xv.dim(0) != groups * H) {
    throw DimensionError("merge_heads: " + shape_str(xv.shape()) + " is not " +
                         std::to_string(groups) + " groups of " + std::to_string(H) + " heads");
  }
  const std::size_t T = xv.dim(1), dh = xv.dim(2);
  Tensor out({groups * T, H * dh}, uninitialized);
  detail::permute_heads(xv.raw(), out.raw(), groups, T, H, dh, false, false);
  return g.push(std::move(out), g.requires_grad(x), nullptr,
                [ix = x.id, groups, T, H, dh](Graph& gr, std::size_t self) {
                  auto slot = gr.grad_slot(ix);
                  detail::permute_heads(gr.grad(self).raw(), slot.t.raw(), groups, T, H, dh,
                                        true, !slot.fresh);
                },
                "merge_heads");
}

/// Gathers rows of a [m x n] matrix; indices may repeat (gradients scatter-add).
inline Var take_rows(Var x, std::vector<std::size_t> rows) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  detail::require_rank(xv, 2, "take_rows");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (rows.empty()) throw DimensionError("take_rows: empty index list");
  Tensor out({rows.size(), n}, uninitialized);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) {
      throw DimensionError("take_rows: row " + std::to_string(rows[i]) + " out of range for " +
                           shape_str(xv.shape()));
    }
    std::copy_n(xv.raw() + rows[i] * n, n, out.raw() + i * n);
  }
  return g.push(std::move(out), g.requires_grad(x), nullptr,
                [ix = x.id, rows = std::move(rows), n](Graph& gr, std::size_t self) {
                  const Tensor& dy = gr.grad(self);
                  Tensor& dx = gr.grad(ix);
                  for (std::size_t i = 0; i < rows.size(); ++i) {
                    const double* src = dy.raw() + i * n;
                    double* dst = dx.raw() + rows[i] * n;
                    for (std::size_t c = 0; c < n; ++c) dst[c] += src[c];
                  }
                },
                "take_rows");
}

inline Var sum(Var a) {
  Graph& g = *a.graph;
  const double s = detail::as_arr(a.value()).sum();
  return g.push(Tensor::scalar(s), g.requires_grad(a), nullptr,
                [ia = a.id](Graph& gr, std::size_t self) {
                  const double d = gr.grad(self)[0];
                  detail::as_arr(gr.grad(ia)) += d;
                },
                "sum");
}

/// Numerically stable log(1 + exp(x)).
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Mean binary cross-entropy on pre-sigmoid logits.
inline Var bce_with_logits(Var logits, std::vector<double> labels) {
  Graph& g = *logits.graph;
  const Tensor& z = logits.value();
  if (z.size() != labels.size()) {
    throw DimensionError("bce_with_logits: " + std::to_string(labels.size()) +
                         " labels for logits of shape " + shape_str(z.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) total += softplus(z[i]) - z[i] * labels[i];
  const double inv = 1.0 / static_cast<double>(z.size());
  return g.push(Tensor::scalar(total * inv), g.requires_grad(logits), nullptr,
                [iz = logits.id, labels = std::move(labels), inv](Graph& gr, std::size_t self) {
                  const double d = gr.grad(self)[0];
                  const Tensor& zv = gr.value(iz);
                  Tensor& dz = gr.grad(iz);
                  for (std::size_t i = 0; i < dz.size(); ++i) {
                    dz[i] += d * inv * (sigmoid(zv[i]) - labels[i]);
                  }
                },
                "bce_with_logits");
}

inline void backward(Graph& graph, Var loss) { graph.backward(loss); }

}  // namespace icl
