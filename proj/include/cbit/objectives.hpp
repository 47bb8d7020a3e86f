#pragma once

// Training objectives: cloze masking, the cloze loss with one sampled
// negative per masked position, multi-pair InfoNCE over all views of a batch,
// the dynamic weight theta, and the joint loss.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cbit/autodiff.hpp"
#include "cbit/data.hpp"
#include "cbit/encoder.hpp"
#include "cbit/error.hpp"
#include "cbit/random.hpp"

namespace cbit {

enum class Reduction { mean, sum };
enum class Representation { flatten, mean_pool };

// One cloze-masked copy of a window.
struct MaskedView {
  std::vector<std::size_t> tokens;     // T tokens, masked positions hold kMaskToken
  std::vector<std::size_t> positions;  // masked positions, ascending
  std::vector<std::size_t> targets;    // ground-truth item per masked position
  std::vector<std::size_t> negatives;  // sampled item per masked position, never in the source sequence
};

struct MaskedWindow {
  std::size_t source_user = 0;
  std::vector<MaskedView> views;  // m views
};

struct MaskedViewBatch {
  std::vector<MaskedWindow> windows;  // N windows
  double mask_prob = 0.15;
  std::size_t num_views = 2;

  std::size_t size() const { return windows.size(); }

  // Tokens of all views, window-major: view j of window u is block u*m + j.
  std::vector<std::size_t> flat_tokens() const {
    std::vector<std::size_t> out;
    for (const auto& w : windows)
      for (const auto& v : w.views) out.insert(out.end(), v.tokens.begin(), v.tokens.end());
    return out;
  }
};

// Which items a negative must avoid. `sequence` excludes every item of the
// source user's sequence; `target` only excludes the item being predicted.
enum class NegativeExclusion { sequence, target };

// Draws negatives uniformly from the items the policy allows.
class NegativeSampler {
 public:
  NegativeSampler(std::span<const std::size_t> source_sequence, std::size_t vocab_size,
                  NegativeExclusion policy = NegativeExclusion::sequence)
      : vocab_size_(vocab_size) {
    if (policy == NegativeExclusion::sequence) seen_.assign(source_sequence.begin(), source_sequence.end());
    std::sort(seen_.begin(), seen_.end());
    seen_.erase(std::unique(seen_.begin(), seen_.end()), seen_.end());
    const std::size_t items = vocab_size_ > data::kFirstItem ? vocab_size_ - data::kFirstItem : 0;
    if (items < 2 || seen_.size() >= items)
      throw DataError("no negative item available: the sequence covers the whole item set");
  }

  // A negative for a masked position whose ground truth is `target`.
  std::size_t draw(Rng& rng, std::size_t target) const {
    const std::size_t n = vocab_size_ - data::kFirstItem;
    for (;;) {
      const std::size_t item = data::kFirstItem + rng.index(n);
      if (item != target && !excludes(item)) return item;
    }
  }

  bool excludes(std::size_t item) const { return std::binary_search(seen_.begin(), seen_.end(), item); }

 private:
  std::vector<std::size_t> seen_;
  std::size_t vocab_size_;
};

// m independent cloze maskings of one window. Each non-padding position is
// masked with probability `mask_prob`; a draw with no mask gets one uniformly
// chosen non-padding position forced.
inline MaskedWindow gen_masked_views(const data::TrainingWindow& window, double mask_prob, std::size_t m,
                                     const NegativeSampler& negatives, Rng& rng) {
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("mask probability must lie in (0, 1)");
  if (m < 1) throw ConfigError("need at least one view per window");
  std::vector<std::size_t> candidates;
  for (std::size_t t = 0; t < window.tokens.size(); ++t)
    if (window.tokens[t] != data::kPadToken) candidates.push_back(t);
  if (candidates.empty()) throw DataError("cannot mask a window that is all padding");

  MaskedWindow out;
  out.source_user = window.source_user;
  for (std::size_t j = 0; j < m; ++j) {
    MaskedView view;
    view.tokens = window.tokens;
    for (std::size_t t : candidates)
      if (rng.bernoulli(mask_prob)) view.positions.push_back(t);
    if (view.positions.empty()) view.positions.push_back(candidates[rng.index(candidates.size())]);
    for (std::size_t t : view.positions) {
      view.targets.push_back(window.tokens[t]);
      view.tokens[t] = data::kMaskToken;
      view.negatives.push_back(negatives.draw(rng, window.tokens[t]));
    }
    out.views.push_back(std::move(view));
  }
  return out;
}

// -sum over masked positions of [log sigma(P(v_t)) + log(1 - sigma(P(v_t^-)))],
// where P is the prediction-layer logit at that position. `hidden` holds the
// views in MaskedViewBatch::flat_tokens() order.
inline Var cloze_loss(const BoundParams& bp, Var hidden, const MaskedViewBatch& batch, std::size_t T,
                      Reduction reduction = Reduction::mean) {
  std::vector<std::size_t> rows, targets, negatives;
  std::size_t view_index = 0;
  for (const auto& w : batch.windows)
    for (const auto& v : w.views) {
      for (std::size_t k = 0; k < v.positions.size(); ++k) {
        rows.push_back(view_index * T + v.positions[k]);
        targets.push_back(v.targets[k]);
        negatives.push_back(v.negatives[k]);
      }
      ++view_index;
    }
  if (rows.empty()) throw DataError("cloze loss over an empty mask set");
  if (hidden.shape()[0] != view_index * T)
    throw DimensionError("cloze_loss: hidden rows do not match the number of views");
  Var h = gather_rows(hidden, rows);
  Var pos = log_sigmoid(item_logits(bp, h, targets));
  Var neg = log_sigmoid(scale(item_logits(bp, h, negatives), -1.0));
  Var total = scale(add(sum(pos), sum(neg)), -1.0);
  return reduction == Reduction::mean ? scale(total, 1.0 / static_cast<double>(rows.size())) : total;
}

// One InfoNCE term: the anchor row's similarity to its positive against the
// listed negatives.
struct PairTerm {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::vector<std::size_t> negatives;
};

// All ordered pairs x != y among the m views of each of N windows (views
// indexed u*m + j). Each pair's negatives are views x and y of every other
// window: 2(N-1) of them.
inline std::vector<PairTerm> multi_pair_terms(std::size_t m, std::size_t n) {
  std::vector<PairTerm> terms;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t x = 0; x < m; ++x)
      for (std::size_t y = 0; y < m; ++y) {
        if (x == y) continue;
        PairTerm t{u * m + x, u * m + y, {}};
        for (std::size_t k = 0; k < n; ++k) {
          if (k == u) continue;
          t.negatives.push_back(k * m + x);
          t.negatives.push_back(k * m + y);
        }
        terms.push_back(std::move(t));
      }
  return terms;
}

// Sum (or mean) over `terms` of -log(e^{s_ap/tau} / (e^{s_ap/tau} + sum_n e^{s_an/tau}))
// on a similarity matrix.
inline Var info_nce(Var sim, std::vector<PairTerm> terms, double tau, Reduction reduction) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  const Tensor& S = sim.value();
  if (S.rank() != 2 || S.dim(0) != S.dim(1)) throw DimensionError("info_nce: similarity matrix must be square");
  const double weight = reduction == Reduction::mean && !terms.empty() ? 1.0 / static_cast<double>(terms.size()) : 1.0;
  double total = 0.0;
  for (const PairTerm& t : terms) {
    const double zp = S.at(t.anchor, t.positive) / tau;
    double mx = zp;
    for (std::size_t n : t.negatives) mx = std::max(mx, S.at(t.anchor, n) / tau);
    double z = std::exp(zp - mx);
    for (std::size_t n : t.negatives) z += std::exp(S.at(t.anchor, n) / tau - mx);
    total += (mx + std::log(z)) - zp;
  }
  return sim.graph->record(
      "info_nce", Tensor::scalar(weight * total), {sim},
      [si = sim.id, terms = std::move(terms), tau, weight](Graph& g, std::size_t self) {
        if (!g.needs_grad(si)) return;
        const double up = g.upstream(self).data[0] * weight;
        const Tensor& S = g.value(si);
        Tensor& gs = g.grad_buffer(si);
        for (const PairTerm& t : terms) {
          const double zp = S.at(t.anchor, t.positive) / tau;
          double mx = zp;
          for (std::size_t n : t.negatives) mx = std::max(mx, S.at(t.anchor, n) / tau);
          double z = std::exp(zp - mx);
          for (std::size_t n : t.negatives) z += std::exp(S.at(t.anchor, n) / tau - mx);
          gs.at(t.anchor, t.positive) += up * (std::exp(zp - mx) / z - 1.0) / tau;
          for (std::size_t n : t.negatives) gs.at(t.anchor, n) += up * std::exp(S.at(t.anchor, n) / tau - mx) / z / tau;
        }
      });
}

// Rows of `hidden` ((M*T) x d) turned into one vector per view: the whole
// T x d block flattened, or its mean over positions.
inline Var view_representations(Var hidden, std::size_t T, Representation rep) {
  const std::size_t rows = hidden.shape()[0], d = hidden.shape()[1];
  if (rows % T != 0) throw DimensionError("view_representations: rows not a multiple of T");
  return rep == Representation::flatten ? reshape(hidden, {rows / T, T * d}) : segment_mean(hidden, T);
}

// Cosine-similarity matrix between all rows of `reps`.
inline Var cosine_matrix(Var reps) {
  Var unit = l2_normalize_rows(reps);
  return matmul(unit, unit, true);
}

struct ContrastiveOptions {
  double tau = 1.0;
  Representation representation = Representation::flatten;
  Reduction reduction = Reduction::mean;
};

// One pair term l(H_u^x, H_u^y) against the other windows' x and y views.
inline Var pair_contrastive_loss(Var hidden, std::size_t m, std::size_t n, std::size_t T, std::size_t user,
                                 std::size_t x, std::size_t y, const ContrastiveOptions& opt) {
  if (x == y || x >= m || y >= m || user >= n) throw UsageError("pair_contrastive_loss: bad view indices");
  std::vector<PairTerm> terms;
  for (PairTerm& t : multi_pair_terms(m, n))
    if (t.anchor == user * m + x && t.positive == user * m + y) terms.push_back(std::move(t));
  return info_nce(cosine_matrix(view_representations(hidden, T, opt.representation)), std::move(terms), opt.tau,
                  Reduction::sum);
}

// Multi-pair loss over all m(m-1) ordered view pairs of each of the N windows.
inline Var multi_pair_contrastive_loss(Var hidden, std::size_t m, std::size_t n, std::size_t T,
                                       const ContrastiveOptions& opt) {
  if (m < 2) throw ConfigError("multi-pair contrastive loss needs at least 2 views, got " + std::to_string(m));
  if (hidden.shape()[0] != m * n * T) throw DimensionError("multi_pair_contrastive_loss: hidden rows != m*N*T");
  return info_nce(cosine_matrix(view_representations(hidden, T, opt.representation)), multi_pair_terms(m, n),
                  opt.tau, opt.reduction);
}

// Dynamic contrastive weight:
//   theta_hat = main / (main + lambda * cl)
//   theta'    = alpha * theta_hat + (1 - alpha) * theta
struct ThetaState {
  double theta = 0.0;
  double alpha = 0.1;
  double lambda = 1.0;
  std::size_t step = 0;
  bool last_degenerate = false;  // main + lambda*cl was 0 at the last update
};

inline ThetaState update_theta(ThetaState state, double main_loss, double cl_loss) {
  if (!std::isfinite(main_loss) || !std::isfinite(cl_loss) || main_loss < 0.0 || cl_loss < 0.0)
    throw NumericError("update_theta: losses must be finite and non-negative");
  const double denom = main_loss + state.lambda * cl_loss;
  const double theta_hat = denom == 0.0 ? 0.0 : main_loss / denom;
  state.last_degenerate = denom == 0.0;
  state.theta = state.alpha * theta_hat + (1.0 - state.alpha) * state.theta;
  ++state.step;
  return state;
}

// main + theta * cl, with theta a constant. theta == 0 returns `main` itself
// so the cloze-only gradient is reproduced bit for bit.
inline Var joint_loss(Var main, Var cl, double theta) {
  if (theta == 0.0) return main;
  return add(main, scale(cl, theta));
}

struct LossReport {
  double main_loss = 0.0;
  double cl_loss = 0.0;
  double theta = 0.0;
  double joint = 0.0;
};

}  // namespace cbit
