#pragma once

// Shared by the unit tests and the acceptance binary.

#include <vector>

#include "cbit/data.hpp"
#include "cbit/encoder.hpp"
#include "cbit/grad_check.hpp"
#include "cbit/objectives.hpp"
#include "cbit/random.hpp"

namespace cbit::fixture {

// d=8, T=6, L=1, h=2, |V|=20 items, m=2 views, N=2 windows.
struct LossFixture {
  ModelConfig cfg;
  ModelParams params;
  MaskedViewBatch batch;
  std::size_t m = 2;
  std::size_t n = 2;
  double tau = 1.0;
  double theta = 0.37;
  std::uint64_t dropout_seed = 99;
};

inline LossFixture make_loss_fixture(std::uint64_t seed = 1) {
  LossFixture f;
  f.cfg.max_len = 6;
  f.cfg.dim = 8;
  f.cfg.layers = 1;
  f.cfg.heads = 2;
  f.cfg.vocab_size = 20 + data::kFirstItem;
  f.cfg.dropout = 0.1;
  f.cfg.seed = seed;
  // A wide init keeps every gradient well away from zero so relative error
  // stays meaningful.
  f.cfg.init_std = 0.5;
  f.params = init_params(f.cfg);
  Rng prng(derive_seed(seed, 3));
  f.params.for_each([&](const std::string&, Tensor& t) {
    if (t.rank() == 1)
      for (double& v : t.data) v += 0.2 * (2.0 * prng.uniform() - 1.0);
  });

  Rng rng(derive_seed(seed, 1));
  f.batch.mask_prob = 0.3;
  f.batch.num_views = f.m;
  const std::vector<std::vector<std::size_t>> sequences = {{2, 5, 7, 9, 11, 13}, {4, 6, 8, 10, 12, 14, 16}};
  for (std::size_t u = 0; u < f.n; ++u) {
    auto windows = data::slide_windows(sequences[u], f.cfg.max_len, 1, u);
    NegativeSampler sampler(sequences[u], f.cfg.vocab_size);
    f.batch.windows.push_back(gen_masked_views(windows.back(), f.batch.mask_prob, f.m, sampler, rng));
  }
  return f;
}

enum class LossKind { main, cl, joint };

inline Var build_fixture_loss(Graph& g, const LossFixture& f, LossKind kind) {
  BoundParams bp = bind(g, f.params);
  Rng drop(f.dropout_seed);
  const std::vector<std::size_t> tokens = f.batch.flat_tokens();
  ForwardContext ctx{true, &drop, false};
  Var h = forward(bp, f.cfg, tokens, ctx).hidden;
  ContrastiveOptions opt;
  opt.tau = f.tau;
  switch (kind) {
    case LossKind::main:
      return cloze_loss(bp, h, f.batch, f.cfg.max_len);
    case LossKind::cl:
      return multi_pair_contrastive_loss(h, f.m, f.n, f.cfg.max_len, opt);
    case LossKind::joint:
      return joint_loss(cloze_loss(bp, h, f.batch, f.cfg.max_len),
                        multi_pair_contrastive_loss(h, f.m, f.n, f.cfg.max_len, opt), f.theta);
  }
  return h;
}

// Synthetic corpus: user u walks the item cycle starting at u mod items,
// so every next item is a deterministic function of the current one.
inline data::InteractionDataset cyclic_dataset(std::size_t users = 50, std::size_t items = 20, std::size_t length = 15) {
  data::InteractionDataset ds;
  for (std::size_t i = 0; i < items; ++i) ds.items.add("i" + std::to_string(i));
  for (std::size_t u = 0; u < users; ++u) {
    ds.users.push_back("u" + std::to_string(u));
    std::vector<std::size_t> s;
    for (std::size_t k = 0; k < length; ++k) s.push_back(data::kFirstItem + (u + k) % items);
    ds.sequences.push_back(std::move(s));
  }
  return ds;
}

// Each training sequence's last item, predicted from the items before it.
inline std::vector<data::HeldOut> training_targets(const data::EvalSplit& split) {
  std::vector<data::HeldOut> out;
  for (std::size_t u = 0; u < split.train_sequences.size(); ++u) {
    const auto& s = split.train_sequences[u];
    if (s.size() < 2) continue;
    out.push_back({u, std::vector<std::size_t>(s.begin(), s.end() - 1), s.back()});
  }
  return out;
}

inline std::vector<NamedTensor> named_params(ModelParams& p) {
  std::vector<NamedTensor> out;
  p.for_each([&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
  return out;
}

}  // namespace cbit::fixture
