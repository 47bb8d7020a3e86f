#pragma once

// Optimisation loop: Adam with step-wise exponential learning-rate decay,
// batch assembly, theta bookkeeping and best-on-validation model selection.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cbit/autodiff.hpp"
#include "cbit/data.hpp"
#include "cbit/encoder.hpp"
#include "cbit/error.hpp"
#include "cbit/eval.hpp"
#include "cbit/objectives.hpp"
#include "cbit/random.hpp"

namespace cbit {

struct TrainConfig {
  std::size_t batch_size = 256;
  std::size_t epochs = 250;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double decay_gamma = 0.1;
  std::size_t decay_every = 100;
  std::size_t num_views = 4;  // m
  double mask_prob = 0.15;    // rho
  double tau = 0.3;
  double alpha = 0.1;
  double lambda = 5.0;
  NegativeExclusion negatives = NegativeExclusion::sequence;
  bool contrastive = true;  // false: cloze-only training, cl never computed
  Representation representation = Representation::flatten;
  Reduction cl_reduction = Reduction::mean;
  std::size_t stride = 1;
  std::uint64_t seed = 42;
  double clip_norm = 0.0;  // global-norm clip; 0 disables
  EvalOptions eval;        // validation protocol

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (!(decay_gamma > 0.0)) throw ConfigError("decay_gamma must be positive");
    if (decay_every == 0) throw ConfigError("decay_every must be at least 1");
    if (num_views == 0) throw ConfigError("num_views must be at least 1");
    if (contrastive && num_views < 2) throw ConfigError("contrastive training needs num_views >= 2");
    if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("mask_prob must lie in (0, 1)");
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
    if (stride == 0) throw ConfigError("stride must be at least 1");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be non-negative");
  }
};

inline double lr_schedule(std::size_t epoch, double base_lr, double gamma, std::size_t every) {
  if (every == 0) throw ConfigError("lr_schedule: every must be at least 1");
  return base_lr * std::pow(gamma, static_cast<double>(epoch / every));
}

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
  double lr = 0.0;

  static OptimizerState for_params(const ModelParams& p) {
    OptimizerState s;
    p.for_each([&](const std::string&, const Tensor& t) {
      s.m.emplace_back(t.shape);
      s.v.emplace_back(t.shape);
    });
    return s;
  }
};

// Gradients of every parameter tensor, in ModelParams::for_each order.
inline std::vector<Tensor> collect_grads(const Graph& g, const ModelParams& p) {
  std::vector<Tensor> grads;
  p.for_each([&](const std::string&, const Tensor& t) { grads.push_back(g.param_grad(t)); });
  return grads;
}

inline void check_finite_grads(const ModelParams& p, const std::vector<Tensor>& grads) {
  std::size_t k = 0;
  p.for_each([&](const std::string& name, const Tensor&) {
    if (k >= grads.size()) throw DimensionError("gradient list shorter than parameter list");
    const Tensor& gr = grads[k++];
    for (std::size_t i = 0; i < gr.size(); ++i)
      if (!std::isfinite(gr.data[i]))
        throw NumericError("non-finite gradient in " + name + " at index " + std::to_string(i));
  });
}

// Rescales all gradients together so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.data) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g.data) v *= f;
  }
  return norm;
}

// One bias-corrected Adam update of a single tensor; `step` counts from 1.
inline void adam_update(Tensor& w, const Tensor& g, Tensor& m, Tensor& v, std::size_t step, double lr, double beta1,
                        double beta2, double eps) {
  if (g.shape != w.shape || m.shape != w.shape || v.shape != w.shape)
    throw DimensionError("adam_update: shape mismatch " + shape_str(w.shape) + " vs " + shape_str(g.shape));
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < w.size(); ++i) {
    m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g.data[i];
    v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
    w.data[i] -= lr * (m.data[i] / c1) / (std::sqrt(v.data[i] / c2) + eps);
  }
}

inline void adam_step(ModelParams& params, const std::vector<Tensor>& grads, OptimizerState& st, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  check_finite_grads(params, grads);
  if (st.m.empty()) st = OptimizerState::for_params(params);
  ++st.step;
  st.lr = lr;
  std::size_t k = 0;
  params.for_each([&](const std::string&, Tensor& w) {
    adam_update(w, grads[k], st.m[k], st.v[k], st.step, lr, beta1, beta2, eps);
    ++k;
  });
}

// Windows plus per-user negative samplers built from each training sequence.
struct TrainingSet {
  std::vector<data::TrainingWindow> windows;
  std::vector<NegativeSampler> samplers;  // indexed by source user
};

inline TrainingSet make_training_set(const data::EvalSplit& split, std::size_t T, std::size_t stride,
                                     std::size_t vocab_size,
                                     NegativeExclusion policy = NegativeExclusion::sequence) {
  TrainingSet ts;
  ts.windows = data::training_windows(split, T, stride);
  if (ts.windows.empty()) throw DataError("no training windows");
  for (const auto& s : split.train_sequences) ts.samplers.emplace_back(s, vocab_size, policy);
  return ts;
}

// Everything that evolves across optimizer steps.
struct TrainerState {
  ModelParams params;
  OptimizerState opt;
  ThetaState theta;
};

inline ThetaState initial_theta(const TrainConfig& tc) {
  ThetaState t;
  t.alpha = tc.alpha;
  t.lambda = tc.lambda;
  return t;
}

inline std::uint64_t batch_seed(std::uint64_t seed, std::size_t epoch, std::size_t batch) {
  return derive_seed(derive_seed(seed, 0xba7c, epoch), batch);
}

// One optimizer step on the given windows. Masking, negatives and dropout
// are all drawn from `seed`.
inline LossReport train_step(TrainerState& state, const ModelConfig& cfg, const TrainConfig& tc,
                             const TrainingSet& data, std::span<const std::size_t> window_ids, double lr,
                             std::uint64_t seed) {
  if (window_ids.empty()) throw DataError("empty batch");
  Rng mask_rng(derive_seed(seed, 1));
  Rng drop_rng(derive_seed(seed, 2));
  MaskedViewBatch batch;
  batch.mask_prob = tc.mask_prob;
  batch.num_views = tc.num_views;
  for (std::size_t id : window_ids) {
    const auto& w = data.windows[id];
    batch.windows.push_back(gen_masked_views(w, tc.mask_prob, tc.num_views, data.samplers.at(w.source_user), mask_rng));
  }

  Graph g;
  BoundParams bp = bind(g, state.params);
  const auto tokens = batch.flat_tokens();
  Var hidden = forward(bp, cfg, tokens, ForwardContext{true, &drop_rng, false}).hidden;
  Var main = cloze_loss(bp, hidden, batch, cfg.max_len);
  LossReport rep;
  rep.main_loss = main.value().item();
  rep.theta = state.theta.theta;
  Var joint = main;
  if (tc.contrastive) {
    ContrastiveOptions co{tc.tau, tc.representation, tc.cl_reduction};
    Var cl = multi_pair_contrastive_loss(hidden, tc.num_views, window_ids.size(), cfg.max_len, co);
    rep.cl_loss = cl.value().item();
    joint = joint_loss(main, cl, state.theta.theta);
  }
  rep.joint = joint.value().item();
  if (!std::isfinite(rep.joint)) throw NumericError("non-finite loss");
  g.backward(joint);
  std::vector<Tensor> grads = collect_grads(g, state.params);
  if (tc.clip_norm > 0.0) clip_global_norm(grads, tc.clip_norm);
  adam_step(state.params, grads, state.opt, lr, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
  if (tc.contrastive) {
    state.theta.alpha = tc.alpha;
    state.theta.lambda = tc.lambda;
    state.theta = update_theta(state.theta, rep.main_loss, rep.cl_loss);
  }
  return rep;
}

// One pass over all windows in a per-epoch shuffled order. The last partial
// batch is kept.
inline std::vector<LossReport> train_epoch(TrainerState& state, const ModelConfig& cfg, const TrainConfig& tc,
                                           const TrainingSet& data, std::size_t epoch) {
  if (data.windows.empty()) throw DataError("no training windows");
  std::vector<std::size_t> order(data.windows.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(derive_seed(tc.seed, 0x5f1e, epoch));
  shuffle_rng.shuffle(order.begin(), order.end());
  const double lr = lr_schedule(epoch, tc.learning_rate, tc.decay_gamma, tc.decay_every);
  std::vector<LossReport> reports;
  for (std::size_t start = 0, b = 0; start < order.size(); start += tc.batch_size, ++b) {
    const std::size_t end = std::min(order.size(), start + tc.batch_size);
    std::span<const std::size_t> ids(order.data() + start, end - start);
    reports.push_back(train_step(state, cfg, tc, data, ids, lr, batch_seed(tc.seed, epoch, b)));
  }
  return reports;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double main_loss = 0.0;  // mean over the epoch's batches
  double cl_loss = 0.0;
  double theta = 0.0;  // after the epoch's last step
  double lr = 0.0;
  double val_hr10 = 0.0;
  double val_ndcg10 = 0.0;
};

// Tab-separated training-log line.
inline std::string format_epoch(const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%.8f\t%.8f\t%.8f\t%.8g\t%.6f\t%.6f", r.epoch, r.main_loss, r.cl_loss, r.theta,
                r.lr, r.val_hr10, r.val_ndcg10);
  return buf;
}

inline constexpr const char* kTrainLogHeader = "epoch\tmain_loss\tcl_loss\ttheta\tlr\tval_hr10\tval_ndcg10";

// Validation metrics for a parameter snapshot: HR@10 and NDCG@10.
using Validator = std::function<MetricEntry(const ModelParams&, std::size_t epoch)>;

struct FitResult {
  ModelParams best;
  std::size_t best_epoch = 0;
  MetricEntry best_metrics;
  std::vector<EpochRecord> log;
  TrainerState final_state;
};

struct FitHooks {
  Validator validator;  // defaults to whole-set validation on split.validation
  std::function<void(const EpochRecord&, bool improved, const ModelParams&)> on_epoch;
};

// Trains for tc.epochs epochs, validating after each; keeps the parameters
// with the highest validation NDCG@10 (earliest on ties).
inline FitResult fit(const ModelConfig& cfg, ModelParams init, const data::EvalSplit& split, const TrainConfig& tc,
                     FitHooks hooks = {}) {
  cfg.validate();
  tc.validate();
  const TrainingSet data = make_training_set(split, cfg.max_len, tc.stride, cfg.vocab_size, tc.negatives);
  if (!hooks.validator) {
    EvalOptions eo = tc.eval;
    if (std::find(eo.ks.begin(), eo.ks.end(), 10) == eo.ks.end()) eo.ks.push_back(10);
    hooks.validator = [&split, &cfg, eo](const ModelParams& p, std::size_t) {
      return evaluate_split(p, cfg, split, SplitName::validation, eo).at.at(10);
    };
  }
  FitResult res;
  TrainerState state{std::move(init), {}, initial_theta(tc)};
  state.opt = OptimizerState::for_params(state.params);
  bool have_best = false;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto reports = train_epoch(state, cfg, tc, data, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    for (const auto& r : reports) {
      rec.main_loss += r.main_loss / static_cast<double>(reports.size());
      rec.cl_loss += r.cl_loss / static_cast<double>(reports.size());
    }
    rec.theta = state.theta.theta;
    rec.lr = lr_schedule(epoch, tc.learning_rate, tc.decay_gamma, tc.decay_every);
    const MetricEntry val = hooks.validator(state.params, epoch);
    rec.val_hr10 = val.hr;
    rec.val_ndcg10 = val.ndcg;
    const bool improved = !have_best || val.ndcg > res.best_metrics.ndcg;
    if (improved) {
      have_best = true;
      res.best = state.params;
      res.best_epoch = epoch;
      res.best_metrics = val;
    }
    res.log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec, improved, state.params);
  }
  if (!have_best) res.best = state.params;
  res.final_state = std::move(state);
  return res;
}

}  // namespace cbit
