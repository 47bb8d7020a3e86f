#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cbit/checkpoint.hpp"
#include "cbit/encoder.hpp"

using namespace cbit;

namespace {

ModelConfig tiny_config(std::size_t T = 3, std::size_t d = 4, std::size_t L = 1, std::size_t h = 2) {
  ModelConfig cfg;
  cfg.max_len = T;
  cfg.dim = d;
  cfg.layers = L;
  cfg.heads = h;
  cfg.vocab_size = 12;
  cfg.dropout = 0.2;
  cfg.seed = 5;
  return cfg;
}

// Re-draws every parameter (including biases and gains) at unit scale so the
// oracle comparison is not dominated by the tiny default init.
ModelParams random_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = make_params(cfg);
  Rng rng(seed);
  p.for_each([&](const std::string&, Tensor& t) {
    for (double& v : t.data) v = 2.0 * rng.uniform() - 1.0;
  });
  return p;
}

using Mat = std::vector<std::vector<double>>;

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat to_mat(const Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

Mat layer_norm_rows(const Mat& x, const Tensor& gain, const Tensor& bias, double eps) {
  Mat out = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double n = static_cast<double>(x[r].size());
    double mu = 0.0, var = 0.0;
    for (double v : x[r]) mu += v / n;
    for (double v : x[r]) var += (v - mu) * (v - mu) / n;
    for (std::size_t c = 0; c < x[r].size(); ++c) out[r][c] = gain[c] * (x[r][c] - mu) / std::sqrt(var + eps) + bias[c];
  }
  return out;
}

// Step-by-step eval-mode forward written with plain loops.
Mat oracle_forward(const ModelParams& p, const ModelConfig& cfg, const std::vector<std::size_t>& tokens) {
  const std::size_t T = cfg.max_len, d = cfg.dim, dh = cfg.head_dim();
  Mat h(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < d; ++c) h[t][c] = p.item_emb.at(tokens[t], c) + p.pos_emb.at(t, c);
  for (const LayerParams& layer : p.layers) {
    Mat concat(T, std::vector<double>());
    for (std::size_t i = 0; i < cfg.heads; ++i) {
      Mat q = mm(h, to_mat(layer.wq[i])), k = mm(h, to_mat(layer.wk[i])), v = mm(h, to_mat(layer.wv[i]));
      for (std::size_t a = 0; a < T; ++a) {
        std::vector<double> w(T);
        double z = 0.0;
        for (std::size_t b = 0; b < T; ++b) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += q[a][c] * k[b][c];
          w[b] = std::exp(s / std::sqrt(double(dh)));
          z += w[b];
        }
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t b = 0; b < T; ++b) acc += w[b] / z * v[b][c];
          concat[a].push_back(acc);
        }
      }
    }
    Mat mh = mm(concat, to_mat(layer.wo));
    Mat f(T, std::vector<double>(d));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < d; ++c) f[t][c] = h[t][c] + mh[t][c];
    f = layer_norm_rows(f, layer.ln1_gain, layer.ln1_bias, cfg.layer_norm_eps);
    Mat hidden = mm(f, to_mat(layer.w1));
    for (auto& row : hidden)
      for (std::size_t c = 0; c < row.size(); ++c) {
        const double x = row[c] + layer.b1[c];
        row[c] = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
      }
    Mat ffn = mm(hidden, to_mat(layer.w2));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < d; ++c) ffn[t][c] += layer.b2[c] + f[t][c];
    h = layer_norm_rows(ffn, layer.ln2_gain, layer.ln2_bias, cfg.layer_norm_eps);
  }
  return h;
}

Tensor eval_hidden(const ModelParams& p, const ModelConfig& cfg, const std::vector<std::size_t>& tokens) {
  Graph g;
  BoundParams bp = bind(g, p);
  return forward(bp, cfg, tokens, {}).hidden.value();
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig cfg = tiny_config();
  EXPECT_NO_THROW(cfg.validate());
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.max_len = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(ModelParams, ShapesAndUntiedPrediction) {
  ModelConfig cfg = tiny_config(6, 8, 2, 2);
  ModelParams p = init_params(cfg);
  EXPECT_EQ(p.item_emb.shape, (Shape{12, 8}));
  EXPECT_EQ(p.pos_emb.shape, (Shape{6, 8}));
  EXPECT_EQ(p.layers[1].wq[1].shape, (Shape{8, 4}));
  EXPECT_EQ(p.layers[0].w1.shape, (Shape{8, 32}));
  EXPECT_EQ(p.pred_w.shape, (Shape{10, 8}));
  EXPECT_EQ(p.pred_b.shape, (Shape{10}));
  EXPECT_NE(p.pred_w.data.data(), p.item_emb.data.data());
  for (double v : p.item_emb.data) EXPECT_LE(std::abs(v), 0.04);
  for (double v : p.layers[0].ln1_gain.data) EXPECT_EQ(v, 1.0);
  for (double v : p.layers[0].b1.data) EXPECT_EQ(v, 0.0);
}

TEST(Embed, AllPaddingWindowIsPadPlusPosition) {
  ModelConfig cfg = tiny_config();
  ModelParams p = random_params(cfg, 1);
  Graph g;
  BoundParams bp = bind(g, p);
  std::vector<std::size_t> tokens(cfg.max_len, data::kPadToken);
  Tensor h = embed(bp, cfg, tokens, {}).value();
  for (std::size_t t = 0; t < cfg.max_len; ++t)
    for (std::size_t c = 0; c < cfg.dim; ++c) EXPECT_EQ(h.at(t, c), p.item_emb.at(0, c) + p.pos_emb.at(t, c));
}

TEST(Embed, ZeroItemTableGivesPositions) {
  ModelConfig cfg = tiny_config();
  ModelParams p = random_params(cfg, 2);
  p.item_emb = Tensor::zeros(p.item_emb.shape);
  Graph g;
  BoundParams bp = bind(g, p);
  std::vector<std::size_t> tokens = {3, 7, 11};
  EXPECT_EQ(embed(bp, cfg, tokens, {}).value().data, p.pos_emb.data);
}

TEST(Embed, MatchesLoopAndRejectsBadTokens) {
  ModelConfig cfg = tiny_config();
  ModelParams p = random_params(cfg, 3);
  Graph g;
  BoundParams bp = bind(g, p);
  std::vector<std::size_t> tokens = {5, 1, 9, 0, 2, 2};  // two windows
  Tensor h = embed(bp, cfg, tokens, {}).value();
  for (std::size_t i = 0; i < tokens.size(); ++i)
    for (std::size_t c = 0; c < cfg.dim; ++c)
      EXPECT_EQ(h.at(i, c), p.item_emb.at(tokens[i], c) + p.pos_emb.at(i % cfg.max_len, c));
  std::vector<std::size_t> bad = {5, 12, 2};
  EXPECT_THROW(embed(bp, cfg, bad, {}), IndexError);
  std::vector<std::size_t> ragged = {5, 2};
  EXPECT_THROW(embed(bp, cfg, ragged, {}), DimensionError);
}

TEST(Encode, EmptyStackIsIdentity) {
  ModelConfig cfg = tiny_config(3, 4, 0, 2);
  ModelParams p = random_params(cfg, 4);
  Graph g;
  BoundParams bp = bind(g, p);
  std::vector<std::size_t> tokens = {2, 3, 4};
  Var h0 = embed(bp, cfg, tokens, {});
  EXPECT_EQ(encode(bp, cfg, h0, tokens, {}).hidden.value().data, h0.value().data);
}

TEST(Encode, SingletonAttentionIsOne) {
  ModelConfig cfg = tiny_config(1, 4, 1, 1);
  ModelParams p = random_params(cfg, 5);
  Graph g;
  BoundParams bp = bind(g, p);
  Rng rng(0);
  Var h = g.constant(Tensor({1, 4}, std::vector<double>{0.3, -0.2, 0.9, 0.1}));
  EncoderOutput capture;
  multi_head_attention(bp.layers[0], h, 1, 1, {}, &capture, true);
  ASSERT_EQ(capture.attention.size(), 1u);
  EXPECT_EQ(capture.attention[0].data, std::vector<double>{1.0});
}

TEST(Encode, MatchesHandRolledForward) {
  ModelConfig cfg = tiny_config(3, 4, 1, 2);
  for (std::uint64_t seed : {6u, 7u, 8u}) {
    ModelParams p = random_params(cfg, seed);
    std::vector<std::size_t> tokens = {0, 4, 9};
    Tensor got = eval_hidden(p, cfg, tokens);
    Mat expect = oracle_forward(p, cfg, tokens);
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(got.at(t, c), expect[t][c], 1e-10);
  }
  ModelConfig deep = tiny_config(4, 6, 2, 3);
  ModelParams p = random_params(deep, 9);
  std::vector<std::size_t> tokens = {2, 3, 1, 7};
  Tensor got = eval_hidden(p, deep, tokens);
  Mat expect = oracle_forward(p, deep, tokens);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(got.at(t, c), expect[t][c], 1e-10);
}

TEST(Encode, BatchedWindowsMatchSingleWindows) {
  ModelConfig cfg = tiny_config(4, 8, 2, 2);
  ModelParams p = random_params(cfg, 10);
  std::vector<std::size_t> a = {0, 2, 3, 4}, b = {5, 6, 1, 11};
  std::vector<std::size_t> both = a;
  both.insert(both.end(), b.begin(), b.end());
  Tensor ha = eval_hidden(p, cfg, a), hb = eval_hidden(p, cfg, b), hab = eval_hidden(p, cfg, both);
  std::vector<double> joined = ha.data;
  joined.insert(joined.end(), hb.data.begin(), hb.data.end());
  EXPECT_EQ(hab.data, joined);
}

TEST(Encode, FutureTokensInfluenceEarlierPositions) {
  ModelConfig cfg = tiny_config(6, 8, 2, 2);
  ModelParams p = init_params(cfg);
  std::vector<std::size_t> tokens = {2, 3, 4, 5, 6, 7};
  Tensor base = eval_hidden(p, cfg, tokens);
  for (std::size_t future = 1; future < cfg.max_len; ++future) {
    std::vector<std::size_t> perturbed = tokens;
    perturbed[future] = 10;
    Tensor h = eval_hidden(p, cfg, perturbed);
    for (std::size_t t = 0; t < future; ++t) {
      double diff = 0.0;
      for (std::size_t c = 0; c < cfg.dim; ++c) diff += std::pow(h.at(t, c) - base.at(t, c), 2);
      EXPECT_GT(std::sqrt(diff), 1e-8) << "position " << t << " blind to position " << future;
    }
  }
}

TEST(Encode, EvalModeIsDeterministicTrainingModeIsNot) {
  ModelConfig cfg = tiny_config(5, 8, 2, 2);
  ModelParams p = init_params(cfg);
  std::vector<std::size_t> tokens = {0, 0, 4, 5, 6};
  EXPECT_EQ(eval_hidden(p, cfg, tokens).data, eval_hidden(p, cfg, tokens).data);
  Rng rng(1);
  Graph g;
  BoundParams bp = bind(g, p);
  Tensor t1 = forward(bp, cfg, tokens, {.training = true, .rng = &rng}).hidden.value();
  Tensor t2 = forward(bp, cfg, tokens, {.training = true, .rng = &rng}).hidden.value();
  EXPECT_NE(t1.data, t2.data);
  EXPECT_THROW(forward(bp, cfg, tokens, {.training = true, .rng = nullptr}), UsageError);
}

TEST(Encode, KeyPaddingMaskZeroesPadColumns) {
  ModelConfig cfg = tiny_config(5, 8, 2, 2);
  cfg.key_padding_mask = true;
  ModelParams p = init_params(cfg);
  std::vector<std::size_t> tokens = {0, 0, 4, 5, 1};
  for (const Tensor& a : attention_maps(p, cfg, tokens))
    for (std::size_t r = 0; r < 5; ++r) {
      EXPECT_EQ(a.at(r, 0), 0.0);
      EXPECT_EQ(a.at(r, 1), 0.0);
      EXPECT_NEAR(a.at(r, 2) + a.at(r, 3) + a.at(r, 4), 1.0, 1e-12);
    }
}

TEST(AttentionMaps, ShapeAndNormalization) {
  ModelConfig cfg = tiny_config(6, 8, 2, 2);
  ModelParams p = init_params(cfg);
  std::vector<std::size_t> same(cfg.max_len, 4);
  auto maps = attention_maps(p, cfg, same);
  ASSERT_EQ(maps.size(), cfg.layers * cfg.heads);
  for (const Tensor& m : maps) {
    ASSERT_EQ(m.shape, (Shape{6, 6}));
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        s += m.at(r, c);
        // Identical tokens: only the small positional embeddings break symmetry.
        EXPECT_NEAR(m.at(r, c), 1.0 / 6.0, 0.05);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(PredictLogits, BiasOnlyAndOneHotSelection) {
  ModelConfig cfg = tiny_config(3, 4, 1, 2);
  ModelParams p = random_params(cfg, 11);
  Graph g;
  Tensor h({1, 4}, std::vector<double>{0.5, -1.5, 2.0, 3.0});
  {
    ModelParams q = p;
    q.pred_w = Tensor::zeros(q.pred_w.shape);
    Graph g2;
    BoundParams bp = bind(g2, q);
    EXPECT_EQ(predict_logits(bp, g2.constant(h)).value().data, q.pred_b.data);
  }
  ModelParams q = p;
  q.pred_w = Tensor::zeros(q.pred_w.shape);
  q.pred_b = Tensor::zeros(q.pred_b.shape);
  for (std::size_t i = 0; i < 4; ++i) q.pred_w.at(i, 3 - i) = 1.0;
  BoundParams bp = bind(g, q);
  Tensor logits = predict_logits(bp, g.constant(h)).value();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(logits[i], h[3 - i]);
  for (std::size_t i = 4; i < 10; ++i) EXPECT_EQ(logits[i], 0.0);
}

TEST(PredictLogits, MatchesLoopAndItemLogits) {
  ModelConfig cfg = tiny_config(3, 4, 1, 2);
  ModelParams p = random_params(cfg, 12);
  Graph g;
  BoundParams bp = bind(g, p);
  Rng rng(3);
  Tensor h({2, 4});
  for (double& v : h.data) v = rng.uniform();
  Var hv = g.constant(h);
  Tensor logits = predict_logits(bp, hv).value();
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t v = 0; v < cfg.num_items(); ++v) {
      double s = p.pred_b[v];
      for (std::size_t c = 0; c < 4; ++c) s += p.pred_w.at(v, c) * h.at(r, c);
      EXPECT_NEAR(logits.at(r, v), s, 1e-15);
    }
  std::vector<std::size_t> items = {7, 2};
  Tensor picked = item_logits(bp, hv, items).value();
  EXPECT_NEAR(picked[0], logits.at(0, 5), 1e-15);
  EXPECT_NEAR(picked[1], logits.at(1, 0), 1e-15);
  std::vector<std::size_t> not_items = {1, 2};
  EXPECT_THROW(item_logits(bp, hv, not_items), IndexError);
}

TEST(Complexity, AttentionCostIsQuadraticInLength) {
  auto flops = [](std::size_t T) {
    ModelConfig cfg = tiny_config(T, 16, 2, 2);
    ModelParams p = init_params(cfg);
    std::vector<std::size_t> tokens(T, 3);
    Graph g;
    BoundParams bp = bind(g, p);
    return static_cast<double>(forward(bp, cfg, tokens, {}).attention_flops);
  };
  for (std::size_t T : {4u, 8u, 16u}) EXPECT_NEAR(flops(2 * T) / flops(T), 4.0, 0.4);
}

TEST(Checkpoint, ByteExactRoundTrip) {
  ModelConfig cfg = tiny_config(6, 8, 2, 2);
  cfg.dropout = 0.1;
  ModelParams p = init_params(cfg);
  const std::string bytes = serialize_checkpoint(cfg, p);
  EXPECT_EQ(bytes.rfind("#cbit-ckpt v1\n", 0), 0u);
  Checkpoint ck = deserialize_checkpoint(bytes);
  EXPECT_EQ(ck.config, cfg);
  EXPECT_EQ(serialize_checkpoint(ck.config, ck.params), bytes);

  auto path = std::filesystem::temp_directory_path() / "cbit_test_ckpt" / "model.ckpt";
  save_checkpoint(path, cfg, p);
  EXPECT_EQ(read_file_bytes(path), bytes);
  EXPECT_EQ(serialize_checkpoint(cfg, load_checkpoint(path).params), bytes);
  std::filesystem::remove_all(path.parent_path());
}

TEST(Checkpoint, CorruptInputsAreRejected) {
  ModelConfig cfg = tiny_config(6, 8, 1, 2);
  ModelParams p = init_params(cfg);
  const std::string bytes = serialize_checkpoint(cfg, p);
  EXPECT_THROW(deserialize_checkpoint("garbage"), DataError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), DataError);
  std::string wrong = bytes;
  wrong.replace(wrong.find("dim=8"), 5, "dim=4");
  EXPECT_THROW(deserialize_checkpoint(wrong), DataError);
}
