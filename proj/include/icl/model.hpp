#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "icl/numerics/graph.hpp"
#include "icl/rng.hpp"
#include "icl/taskgen.hpp"

namespace icl {

enum class Variant { regular, no_pos, frozen_pos, frozen_qk, frozen_attention, interleaved };
enum class LabelMode { bound, absent };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::regular: return "regular";
    case Variant::no_pos: return "no_pos";
    case Variant::frozen_pos: return "frozen_pos";
    case Variant::frozen_qk: return "frozen_qk";
    case Variant::frozen_attention: return "frozen_attention";
    case Variant::interleaved: return "interleaved";
  }
  return "regular";
}

inline Variant parse_variant(std::string_view s) {
  for (auto v : {Variant::regular, Variant::no_pos, Variant::frozen_pos, Variant::frozen_qk,
                 Variant::frozen_attention, Variant::interleaved}) {
    if (to_string(v) == s) return v;
  }
  throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

inline std::string_view to_string(LabelMode m) { return m == LabelMode::bound ? "bound" : "absent"; }

inline LabelMode parse_label_mode(std::string_view s) {
  if (s == "bound") return LabelMode::bound;
  if (s == "absent") return LabelMode::absent;
  throw std::invalid_argument("unknown label_mode '" + std::string(s) + "'");
}

struct ModelConfig {
  std::size_t input_dim = kInputDim;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 512;
  std::size_t n_context = kDefaultContext;
  Variant variant = Variant::regular;
  LabelMode label_mode = LabelMode::bound;

  void validate() const {
    if (input_dim == 0 || d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0 ||
        n_context == 0) {
      throw std::invalid_argument("model config: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw std::invalid_argument("model config: d_model must be divisible by n_heads");
    }
  }

  std::size_t head_dim() const { return d_model / n_heads; }
  /// Tokens per episode: one per context pair plus the query, or x/y pairs
  /// interleaved plus the query.
  std::size_t seq_len() const {
    return variant == Variant::interleaved ? 2 * n_context + 1 : n_context + 1;
  }
  /// Positional table rows; sized for the interleaved layout in every variant.
  std::size_t max_len() const { return 2 * n_context + 1; }

  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"input_dim", c.input_dim}, {"d_model", c.d_model},   {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},   {"d_ff", c.d_ff},         {"n_context", c.n_context},
          {"variant", to_string(c.variant)}, {"label_mode", to_string(c.label_mode)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.n_context = j.at("n_context").get<std::size_t>();
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.label_mode = parse_label_mode(j.at("label_mode").get<std::string>());
  c.validate();
  return c;
}

/// Post-LN encoder block weights. Matrices act on row vectors (y = x W + b).
struct EncoderLayer {
  // No key bias: it shifts every score in a row equally, so softmax cancels it.
  Param wq, bq, wk, wv, bv, wo, bo;
  Param ln1_gain, ln1_bias;
  Param w1, b1, w2, b2;
  Param ln2_gain, ln2_bias;
};

/// Two-layer bidirectional encoder with additive label binding and a scalar
/// readout at the query token.
class IclModel {
 public:
  static constexpr double kReadoutGain = 0.1;

  IclModel(const ModelConfig& config, const Rng& rng) : config_(config) {
    config_.validate();
    const std::size_t d = config_.d_model, dx = config_.input_dim, ff = config_.d_ff;
    std::uint64_t stream = 0;
    auto uniform = [&](std::string name, Shape shape, std::size_t fan_in, double gain = 1.0) {
      Rng r = rng.split(stream++);
      const double bound = gain / std::sqrt(static_cast<double>(fan_in));
      Tensor t(std::move(shape));
      for (auto& v : t.storage()) v = r.uniform(-bound, bound);
      return Param(std::move(name), std::move(t));
    };
    auto constant = [&](std::string name, Shape shape, double value) {
      ++stream;
      return Param(std::move(name), Tensor(std::move(shape), value));
    };

    wx = uniform("embed.wx", {dx, d}, dx);
    bx = uniform("embed.bx", {1, d}, dx);
    wy = uniform("embed.wy", {1, d}, 1);
    by = uniform("embed.by", {1, d}, 1);
    {
      Rng r = rng.split(stream++);
      Tensor t({config_.max_len(), d});
      if (config_.variant != Variant::no_pos) {
        for (auto& v : t.storage()) v = 0.02 * r.normal();
      }
      pos = Param("embed.pos", std::move(t));
    }
    layers.resize(config_.n_layers);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      EncoderLayer& L = layers[l];
      L.wq = uniform(p + "wq", {d, d}, d);
      L.bq = uniform(p + "bq", {1, d}, d);
      L.wk = uniform(p + "wk", {d, d}, d);
      L.wv = uniform(p + "wv", {d, d}, d);
      L.bv = uniform(p + "bv", {1, d}, d);
      L.wo = uniform(p + "wo", {d, d}, d);
      L.bo = uniform(p + "bo", {1, d}, d);
      L.ln1_gain = constant(p + "ln1.gain", {1, d}, 1.0);
      L.ln1_bias = constant(p + "ln1.bias", {1, d}, 0.0);
      L.w1 = uniform(p + "ffn.w1", {d, ff}, d);
      L.b1 = uniform(p + "ffn.b1", {1, ff}, d);
      L.w2 = uniform(p + "ffn.w2", {ff, d}, ff);
      L.b2 = uniform(p + "ffn.b2", {1, d}, ff);
      L.ln2_gain = constant(p + "ln2.gain", {1, d}, 1.0);
      L.ln2_bias = constant(p + "ln2.bias", {1, d}, 0.0);
    }
    // Small readout keeps step-0 logits near zero, so the initial loss is ~ln 2.
    readout_w = uniform("readout.w", {d, 1}, d, kReadoutGain);
    readout_b = constant("readout.b", {1, 1}, 0.0);
    apply_variant_freezing();
  }

  const ModelConfig& config() const { return config_; }

  /// All weights in checkpoint order: embedding, layers, readout.
  std::vector<Param*> parameters() {
    std::vector<Param*> out{&wx, &bx, &wy, &by, &pos};
    for (auto& L : layers) {
      for (Param* p : {&L.wq, &L.bq, &L.wk, &L.wv, &L.bv, &L.wo, &L.bo, &L.ln1_gain,
                       &L.ln1_bias, &L.w1, &L.b1, &L.w2, &L.b2, &L.ln2_gain, &L.ln2_bias}) {
        out.push_back(p);
      }
    }
    out.push_back(&readout_w);
    out.push_back(&readout_b);
    return out;
  }

  std::vector<const Param*> parameters() const {
    auto ps = const_cast<IclModel*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Param* p : parameters()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (Param* p : parameters()) p->zero_grad();
  }

  Param wx, bx, wy, by, pos;
  std::vector<EncoderLayer> layers;
  Param readout_w, readout_b;

 private:
  void apply_variant_freezing() {
    switch (config_.variant) {
      case Variant::no_pos:
      case Variant::frozen_pos:
        pos.trainable = false;
        break;
      case Variant::frozen_qk:
        for (auto& L : layers) {
          for (Param* p : {&L.wq, &L.bq, &L.wk}) p->trainable = false;
        }
        break;
      case Variant::frozen_attention:
        for (auto& L : layers) {
          for (Param* p : {&L.wq, &L.bq, &L.wk, &L.wv, &L.bv, &L.wo, &L.bo}) {
            p->trainable = false;
          }
        }
        break;
      default:
        break;
    }
  }

  ModelConfig config_;
};

/// Query-position internals captured during a forward pass.
struct Trace {
  /// Residual at the query token after the embedding and after each layer.
  std::vector<std::vector<double>> residuals;
  /// Per layer, [n_heads x rows x seq_len]. The last layer only computes the
  /// query row, so its maps have a single row.
  std::vector<Tensor> attention;
};

/// Batched forward output. residuals[p] is [batch x d_model] for probe p
/// (embedding, then after each layer); attention[l] is [batch*heads x rows x seq].
struct BatchForward {
  std::vector<double> logits;
  std::vector<Tensor> residuals;
  std::vector<Tensor> attention;
};

namespace detail {

inline Var bind(Graph& g, Param& p) { return g.param(p); }
inline Var bind(Graph& g, const Param& p) { return g.constant(p.value); }

struct EmbedInputs {
  Tensor x, x_mask, y, y_mask;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> query_rows;
};

inline EmbedInputs embed_inputs(const ModelConfig& cfg, std::span<const Episode> batch) {
  if (batch.empty()) throw DimensionError("embed: empty batch");
  const std::size_t T = cfg.seq_len(), B = batch.size(), dx = cfg.input_dim;
  const bool interleaved = cfg.variant == Variant::interleaved;
  EmbedInputs in{Tensor({B * T, dx}), Tensor({B * T, 1}), Tensor({B * T, 1}),
                 Tensor({B * T, 1}), std::vector<std::size_t>(B * T), {}};
  for (std::size_t b = 0; b < B; ++b) {
    const Episode& ep = batch[b];
    if (ep.dim != dx || ep.n_context() != cfg.n_context || ep.query_x.size() != dx) {
      throw DimensionError("embed: episode has " + std::to_string(ep.n_context()) + " x " +
                           std::to_string(ep.dim) + " context, model expects " +
                           std::to_string(cfg.n_context) + " x " + std::to_string(dx));
    }
    const bool labels = ep.labels_present && cfg.label_mode == LabelMode::bound;
    const std::size_t base = b * T;
    for (std::size_t t = 0; t < T; ++t) in.positions[base + t] = t;
    for (std::size_t i = 0; i < cfg.n_context; ++i) {
      const std::size_t xrow = base + (interleaved ? 2 * i : i);
      std::copy(ep.x(i).begin(), ep.x(i).end(), in.x.raw() + xrow * dx);
      in.x_mask[xrow] = 1.0;
      const std::size_t yrow = interleaved ? xrow + 1 : xrow;
      if (labels) {
        in.y[yrow] = static_cast<double>(ep.context_y[i]);
        in.y_mask[yrow] = 1.0;
      }
    }
    const std::size_t q = base + T - 1;
    std::copy(ep.query_x.begin(), ep.query_x.end(), in.x.raw() + q * dx);
    in.x_mask[q] = 1.0;
    in.query_rows.push_back(q);
  }
  return in;
}

}  // namespace detail

/// Token embeddings for a batch: [batch*seq_len x d_model].
template <class Model>
  requires std::same_as<std::remove_const_t<Model>, IclModel>
Var embed(Graph& g, Model& model, std::span<const Episode> batch,
          std::vector<std::size_t>* query_rows = nullptr) {
  const ModelConfig& cfg = model.config();
  auto in = detail::embed_inputs(cfg, batch);
  Var e = matmul(g.constant(std::move(in.x)), detail::bind(g, model.wx));
  e = add(e, matmul(g.constant(std::move(in.x_mask)), detail::bind(g, model.bx)));
  e = add(e, matmul(g.constant(std::move(in.y)), detail::bind(g, model.wy)));
  e = add(e, matmul(g.constant(std::move(in.y_mask)), detail::bind(g, model.by)));
  e = add(e, take_rows(detail::bind(g, model.pos), std::move(in.positions)));
  if (query_rows) *query_rows = std::move(in.query_rows);
  return e;
}

/// Records the full forward pass. Returns logits [batch x 1]; fills probes
/// (query residuals) and attention maps when requested.
template <class Model>
  requires std::same_as<std::remove_const_t<Model>, IclModel>
Var forward_graph(Graph& g, Model& model, std::span<const Episode> batch,
                  std::vector<Var>* probes = nullptr, std::vector<Var>* attention = nullptr) {
  const ModelConfig& cfg = model.config();
  const std::size_t B = batch.size(), T = cfg.seq_len(), H = cfg.n_heads, dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<std::size_t> query_rows;
  Var h = embed(g, model, batch, &query_rows);
  if (probes) probes->push_back(take_rows(h, query_rows));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto& L = model.layers[l];
    // Only the query token feeds the readout, so the last block is evaluated
    // for that row alone; keys and values still span the whole sequence.
    const bool query_only = l + 1 == cfg.n_layers;
    const std::size_t rows = query_only ? 1 : T;
    try {
      Var hin = query_only ? take_rows(h, query_rows) : h;
      Var q = linear(hin, detail::bind(g, L.wq), detail::bind(g, L.bq));
      Var k = linear(h, detail::bind(g, L.wk));
      Var v = linear(h, detail::bind(g, L.wv), detail::bind(g, L.bv));
      Var qh = split_heads(q, B, rows, H);
      Var kh = split_heads(k, B, T, H);
      Var vh = split_heads(v, B, T, H);
      Var attn = softmax(bmm(qh, kh, true, inv_sqrt_dh), 2);
      if (attention) attention->push_back(attn);
      Var ctx = merge_heads(bmm(attn, vh), B, H);
      Var a = linear(ctx, detail::bind(g, L.wo), detail::bind(g, L.bo));
      Var x1 = layer_norm(add(hin, a), detail::bind(g, L.ln1_gain), detail::bind(g, L.ln1_bias));
      Var f = linear(gelu(linear(x1, detail::bind(g, L.w1), detail::bind(g, L.b1))),
                     detail::bind(g, L.w2), detail::bind(g, L.b2));
      h = layer_norm(add(x1, f), detail::bind(g, L.ln2_gain), detail::bind(g, L.ln2_bias));
    } catch (const NumericError& e) {
      throw NumericError("layer " + std::to_string(l) + ": " + e.what());
    }
    if (probes) probes->push_back(query_only ? h : take_rows(h, query_rows));
  }
  return linear(h, detail::bind(g, model.readout_w), detail::bind(g, model.readout_b));
}

inline BatchForward forward_batch(const IclModel& model, std::span<const Episode> batch,
                                  bool keep_trace = false) {
  Graph g;
  std::vector<Var> probes, attention;
  Var logits = forward_graph(g, model, batch, keep_trace ? &probes : nullptr,
                             keep_trace ? &attention : nullptr);
  BatchForward out;
  out.logits.assign(logits.value().data().begin(), logits.value().data().end());
  for (Var p : probes) out.residuals.push_back(p.value());
  for (Var a : attention) out.attention.push_back(a.value());
  return out;
}

/// Pre-sigmoid logit for one episode.
inline double forward(const IclModel& model, const Episode& episode) {
  return forward_batch(model, std::span<const Episode>(&episode, 1)).logits[0];
}

inline std::pair<double, Trace> forward_with_trace(const IclModel& model, const Episode& episode) {
  auto out = forward_batch(model, std::span<const Episode>(&episode, 1), true);
  Trace trace;
  for (const Tensor& r : out.residuals) trace.residuals.emplace_back(r.data().begin(), r.data().end());
  trace.attention = std::move(out.attention);
  return {out.logits[0], std::move(trace)};
}

/// Applies the readout (weight and bias) to a d_model residual.
inline double readout(const IclModel& model, std::span<const double> residual) {
  double z = model.readout_b.value[0];
  for (std::size_t i = 0; i < residual.size(); ++i) z += residual[i] * model.readout_w.value[i];
  return z;
}

/// W_OV = W_V[:, head] W_O[head, :], a d_model x d_model map on row vectors.
inline Tensor ov_matrix(const IclModel& model, std::size_t layer, std::size_t head) {
  const ModelConfig& cfg = model.config();
  if (layer >= cfg.n_layers || head >= cfg.n_heads) {
    throw std::out_of_range("ov_matrix: layer " + std::to_string(layer) + ", head " +
                            std::to_string(head) + " out of range");
  }
  const std::size_t d = cfg.d_model, dh = cfg.head_dim();
  const auto& L = model.layers[layer];
  Tensor out({d, d});
  detail::as_mat(out, d, d).noalias() =
      detail::as_mat(L.wv.value, d, d).middleCols(static_cast<Eigen::Index>(head * dh),
                                                  static_cast<Eigen::Index>(dh)) *
      detail::as_mat(L.wo.value, d, d).middleRows(static_cast<Eigen::Index>(head * dh),
                                                  static_cast<Eigen::Index>(dh));
  return out;
}

}  // namespace icl
