#pragma once

// Bidirectional Transformer encoder: item + positional embedding, L blocks of
// multi-head self-attention and position-wise feed-forward with post-residual
// layer norm, and an untied linear prediction layer over real items.
//
// Batches are processed as B windows stacked into a (B*T) x d matrix; only
// the attention products work per window. Per layer the attention costs
// O(T^2 d) per window, the projections and feed-forward O(T d^2).

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cbit/autodiff.hpp"
#include "cbit/data.hpp"
#include "cbit/error.hpp"
#include "cbit/random.hpp"
#include "cbit/tensor.hpp"

namespace cbit {

struct ModelConfig {
  std::size_t max_len = 15;      // T
  std::size_t dim = 256;         // d
  std::size_t layers = 2;        // L
  std::size_t heads = 2;         // h
  std::size_t vocab_size = 0;    // |V| + 2
  double dropout = 0.3;
  std::uint64_t seed = 42;
  bool key_padding_mask = false;  // exclude padding keys from attention
  double init_std = 0.02;
  double layer_norm_eps = 1e-12;

  std::size_t num_items() const { return vocab_size - data::kFirstItem; }
  std::size_t head_dim() const { return dim / heads; }

  void validate() const {
    if (heads == 0 || dim == 0 || dim % heads != 0)
      throw ConfigError("dim (" + std::to_string(dim) + ") must be a positive multiple of heads (" +
                        std::to_string(heads) + ")");
    if (max_len < 2) throw ConfigError("max_len must be >= 2 to fit an item and the [mask] token");
    if (vocab_size <= data::kFirstItem) throw ConfigError("vocab_size must exceed the 2 reserved tokens");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  std::vector<Tensor> wq, wk, wv;  // per head, d x d/h
  Tensor wo;                       // d x d
  Tensor w1, b1;                   // d x 4d, 4d
  Tensor w2, b2;                   // 4d x d, d
  Tensor ln1_gain, ln1_bias;       // after attention
  Tensor ln2_gain, ln2_bias;       // after feed-forward
};

struct ModelParams {
  Tensor item_emb;  // (|V|+2) x d, rows 0/1 are padding/[mask]
  Tensor pos_emb;   // T x d
  std::vector<LayerParams> layers;
  Tensor pred_w;    // |V| x d, independent of item_emb
  Tensor pred_b;    // |V|

  // Visits every learnable tensor with a stable name, in a fixed order.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(std::string("item_emb"), self.item_emb);
    f(std::string("pos_emb"), self.pos_emb);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& layer = self.layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      for (std::size_t i = 0; i < layer.wq.size(); ++i) {
        const std::string hp = p + "head" + std::to_string(i) + ".";
        f(hp + "wq", layer.wq[i]);
        f(hp + "wk", layer.wk[i]);
        f(hp + "wv", layer.wv[i]);
      }
      f(p + "wo", layer.wo);
      f(p + "ffn.w1", layer.w1);
      f(p + "ffn.b1", layer.b1);
      f(p + "ffn.w2", layer.w2);
      f(p + "ffn.b2", layer.b2);
      f(p + "ln1.gain", layer.ln1_gain);
      f(p + "ln1.bias", layer.ln1_bias);
      f(p + "ln2.gain", layer.ln2_gain);
      f(p + "ln2.bias", layer.ln2_bias);
    }
    f(std::string("pred.w"), self.pred_w);
    f(std::string("pred.b"), self.pred_b);
  }

  template <typename F>
  void for_each(F&& f) { visit(*this, f); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, f); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }
};

// Zero-initialized parameters with the shapes implied by `cfg`.
inline ModelParams make_params(const ModelConfig& cfg) {
  const std::size_t d = cfg.dim, dh = cfg.head_dim();
  ModelParams p;
  p.item_emb = Tensor({cfg.vocab_size, d});
  p.pos_emb = Tensor({cfg.max_len, d});
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerParams layer;
    for (std::size_t i = 0; i < cfg.heads; ++i) {
      layer.wq.emplace_back(Shape{d, dh});
      layer.wk.emplace_back(Shape{d, dh});
      layer.wv.emplace_back(Shape{d, dh});
    }
    layer.wo = Tensor({d, d});
    layer.w1 = Tensor({d, 4 * d});
    layer.b1 = Tensor({4 * d});
    layer.w2 = Tensor({4 * d, d});
    layer.b2 = Tensor({d});
    layer.ln1_gain = Tensor::ones({d});
    layer.ln1_bias = Tensor({d});
    layer.ln2_gain = Tensor::ones({d});
    layer.ln2_bias = Tensor({d});
    p.layers.push_back(std::move(layer));
  }
  p.pred_w = Tensor({cfg.num_items(), d});
  p.pred_b = Tensor({cfg.num_items()});
  return p;
}

// Truncated normal (std cfg.init_std, cut at 2 std) for embeddings and
// weight matrices; biases zero; layer-norm gains one.
inline ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p = make_params(cfg);
  Rng rng(derive_seed(cfg.seed, 0x1417));
  p.for_each([&](const std::string&, Tensor& t) {
    if (t.rank() != 2) return;
    for (double& v : t.data) v = rng.truncated_normal(cfg.init_std);
  });
  return p;
}

// Parameters registered as leaves of one graph.
struct BoundLayer {
  std::vector<Var> wq, wk, wv;
  Var wo, w1, b1, w2, b2, ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

struct BoundParams {
  Var item_emb, pos_emb;
  std::vector<BoundLayer> layers;
  Var pred_w, pred_b;
};

inline BoundParams bind(Graph& g, const ModelParams& p) {
  BoundParams b;
  b.item_emb = g.param(p.item_emb);
  b.pos_emb = g.param(p.pos_emb);
  for (const LayerParams& l : p.layers) {
    BoundLayer bl;
    for (std::size_t i = 0; i < l.wq.size(); ++i) {
      bl.wq.push_back(g.param(l.wq[i]));
      bl.wk.push_back(g.param(l.wk[i]));
      bl.wv.push_back(g.param(l.wv[i]));
    }
    bl.wo = g.param(l.wo);
    bl.w1 = g.param(l.w1);
    bl.b1 = g.param(l.b1);
    bl.w2 = g.param(l.w2);
    bl.b2 = g.param(l.b2);
    bl.ln1_gain = g.param(l.ln1_gain);
    bl.ln1_bias = g.param(l.ln1_bias);
    bl.ln2_gain = g.param(l.ln2_gain);
    bl.ln2_bias = g.param(l.ln2_bias);
    b.layers.push_back(std::move(bl));
  }
  b.pred_w = g.param(p.pred_w);
  b.pred_b = g.param(p.pred_b);
  return b;
}

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
  bool capture_attention = false;
};

struct EncoderOutput {
  Var hidden;  // (B*T) x d, last-layer states
  // attention[l * heads + i] is a B x T x T tensor of softmax weights.
  std::vector<Tensor> attention;
  // Multiply-adds spent in the two attention products (scores and weighted
  // sum), summed over layers.
  std::size_t attention_flops = 0;
};

namespace detail {

inline Rng& forward_rng(const ForwardContext& ctx, double ratio) {
  static Rng unused(0);
  if (ctx.training && ratio > 0.0 && ctx.rng == nullptr)
    throw UsageError("training forward with dropout needs an Rng");
  return ctx.rng ? *ctx.rng : unused;
}

}  // namespace detail

// H0[t] = item_emb[token_t] + pos_emb[t] for each of the B windows in
// `tokens` (length B*T), followed by dropout in training mode.
inline Var embed(const BoundParams& bp, const ModelConfig& cfg, std::span<const std::size_t> tokens,
                 const ForwardContext& ctx) {
  const std::size_t T = cfg.max_len;
  if (tokens.empty() || tokens.size() % T != 0)
    throw DimensionError("embed: token count " + std::to_string(tokens.size()) +
                         " is not a multiple of T=" + std::to_string(T));
  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  for (std::size_t id : ids)
    if (id >= cfg.vocab_size)
      throw IndexError("token " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
  std::vector<std::size_t> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % T;
  Var h = add(gather_rows(bp.item_emb, std::move(ids)), gather_rows(bp.pos_emb, std::move(positions)));
  return dropout(h, cfg.dropout, detail::forward_rng(ctx, cfg.dropout), ctx.training);
}

// MH(H) = concat(head_1..head_h) W^O, head_i = softmax(Q K^T / sqrt(d/h)) V.
// `key_mask` (B*T entries, nonzero = attend) is optional.
inline Var multi_head_attention(const BoundLayer& layer, Var h, std::size_t batch, std::size_t T,
                                std::span<const unsigned char> key_mask, EncoderOutput* capture,
                                bool keep_maps) {
  const std::size_t heads = layer.wq.size();
  const std::size_t dh = layer.wq.front().shape()[1];
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    Var q = reshape(matmul(h, layer.wq[i]), {batch, T, dh});
    Var k = reshape(matmul(h, layer.wk[i]), {batch, T, dh});
    Var v = reshape(matmul(h, layer.wv[i]), {batch, T, dh});
    Var weights = softmax_rows(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)), key_mask);
    if (capture) {
      capture->attention_flops += 2 * batch * T * T * dh;
      if (keep_maps) capture->attention.push_back(weights.value());
    }
    outs.push_back(reshape(bmm(weights, v), {batch * T, dh}));
  }
  return matmul(heads == 1 ? outs.front() : concat_cols(outs), layer.wo);
}

inline Var feed_forward(const BoundLayer& layer, Var f) {
  return add_row(matmul(gelu(add_row(matmul(f, layer.w1), layer.b1)), layer.w2), layer.b2);
}

// Trm(H) = LN(F + Dropout(PFFN(F))), F = LN(H + Dropout(MH(H))).
inline Var transformer_block(const BoundLayer& layer, const ModelConfig& cfg, Var h, std::size_t batch,
                             std::span<const unsigned char> key_mask, const ForwardContext& ctx,
                             EncoderOutput* out) {
  Rng& rng = detail::forward_rng(ctx, cfg.dropout);
  Var mh = multi_head_attention(layer, h, batch, cfg.max_len, key_mask, out, ctx.capture_attention);
  Var f = layer_norm(add(h, dropout(mh, cfg.dropout, rng, ctx.training)), layer.ln1_gain, layer.ln1_bias,
                     cfg.layer_norm_eps);
  Var ffn = feed_forward(layer, f);
  return layer_norm(add(f, dropout(ffn, cfg.dropout, rng, ctx.training)), layer.ln2_gain, layer.ln2_bias,
                    cfg.layer_norm_eps);
}

// Applies the L blocks to H0 ((B*T) x d). Attention is fully bidirectional.
inline EncoderOutput encode(const BoundParams& bp, const ModelConfig& cfg, Var h0,
                            std::span<const std::size_t> tokens, const ForwardContext& ctx) {
  const std::size_t T = cfg.max_len;
  const std::size_t batch = h0.shape()[0] / T;
  std::vector<unsigned char> key_mask;
  if (cfg.key_padding_mask) {
    key_mask.resize(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) key_mask[i] = tokens[i] != data::kPadToken;
  }
  EncoderOutput out;
  Var h = h0;
  for (const BoundLayer& layer : bp.layers) h = transformer_block(layer, cfg, h, batch, key_mask, ctx, &out);
  out.hidden = h;
  return out;
}

// Embedding followed by the encoder stack.
inline EncoderOutput forward(const BoundParams& bp, const ModelConfig& cfg, std::span<const std::size_t> tokens,
                             const ForwardContext& ctx) {
  return encode(bp, cfg, embed(bp, cfg, tokens, ctx), tokens, ctx);
}

// P(v) = W^P h + b^P for every real item: rows x |V|. Column j scores dense
// item j + 2.
inline Var predict_logits(const BoundParams& bp, Var h_rows) {
  return add_row(matmul(h_rows, bp.pred_w, true), bp.pred_b);
}

// The same logit, but only for one item per row: out[r] = W^P[item_r] . h_r + b^P[item_r].
inline Var item_logits(const BoundParams& bp, Var h_rows, std::span<const std::size_t> items) {
  std::vector<std::size_t> rows;
  rows.reserve(items.size());
  for (std::size_t it : items) {
    if (it < data::kFirstItem) throw IndexError("item_logits: token " + std::to_string(it) + " is not an item");
    rows.push_back(it - data::kFirstItem);
  }
  const std::size_t nv = bp.pred_b.shape()[0];
  Var w = gather_rows(bp.pred_w, rows);
  Var b = reshape(gather_rows(reshape(bp.pred_b, {nv, 1}), rows), {items.size()});
  return add(rowwise_dot(h_rows, w), b);
}

// Softmax weights of a dropout-free forward over one window:
// result[l * heads + i] is T x T.
inline std::vector<Tensor> attention_maps(const ModelParams& params, const ModelConfig& cfg,
                                          std::span<const std::size_t> window) {
  if (window.size() != cfg.max_len) throw DimensionError("attention_maps: window length must equal T");
  Graph g;
  BoundParams bp = bind(g, params);
  EncoderOutput out = forward(bp, cfg, window, {.training = false, .rng = nullptr, .capture_attention = true});
  for (Tensor& t : out.attention) t.shape = {cfg.max_len, cfg.max_len};
  return out.attention;
}

}  // namespace cbit
