#pragma once

// Whole-item-set ranking evaluation, next-item inference, attention export.

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cbit/autodiff.hpp"
#include "cbit/data.hpp"
#include "cbit/encoder.hpp"
#include "cbit/error.hpp"

namespace cbit {

// Last T-1 items of `history`, then the mask token, pre-padded to length T.
inline std::vector<std::size_t> inference_window(std::span<const std::size_t> history, std::size_t T) {
  if (history.empty()) throw DataError("next-item inference needs a non-empty history");
  const auto kept = data::truncate_for_inference(history, T);
  std::vector<std::size_t> w(T - 1 - kept.size(), data::kPadToken);
  w.insert(w.end(), kept.begin(), kept.end());
  w.push_back(data::kMaskToken);
  return w;
}

// Logits over all items at the mask slot for each history: rows x |V|, column
// j scoring dense item j + 2. Dropout is off.
inline Tensor next_item_scores_batch(const ModelParams& params, const ModelConfig& cfg,
                                     const std::vector<std::span<const std::size_t>>& histories) {
  const std::size_t T = cfg.max_len;
  std::vector<std::size_t> tokens;
  tokens.reserve(histories.size() * T);
  for (auto h : histories) {
    const auto w = inference_window(h, T);
    tokens.insert(tokens.end(), w.begin(), w.end());
  }
  Graph g;
  BoundParams bp = bind(g, params);
  Var hidden = forward(bp, cfg, tokens, {}).hidden;
  std::vector<std::size_t> last(histories.size());
  for (std::size_t b = 0; b < last.size(); ++b) last[b] = b * T + T - 1;
  return predict_logits(bp, gather_rows(hidden, last)).value();
}

inline Tensor next_item_scores(const ModelParams& params, const ModelConfig& cfg, std::span<const std::size_t> history) {
  Tensor all = next_item_scores_batch(params, cfg, {history});
  return Tensor({all.cols()}, all.data);
}

// 1 + #{i : s_i > s_t} + #{i < t : s_i == s_t}; ties go to the lower index.
inline std::size_t rank_of_target(std::span<const double> scores, std::size_t target_index) {
  if (target_index >= scores.size()) throw IndexError("rank_of_target: target index out of range");
  const double st = scores[target_index];
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > st || (i < target_index && scores[i] == st)) ++rank;
  return rank;
}

struct RankingResult {
  std::size_t user = 0;
  std::size_t target = 0;  // dense item id
  std::size_t rank = 0;
};

struct MetricEntry {
  double hr = 0.0;
  double ndcg = 0.0;
};

struct MetricsReport {
  std::map<std::size_t, MetricEntry> at;  // K -> metrics
  std::size_t users = 0;
};

inline MetricEntry hr_ndcg(std::span<const RankingResult> results, std::size_t k) {
  if (results.empty()) throw DataError("no ranking results to aggregate");
  MetricEntry e;
  for (const auto& r : results)
    if (r.rank <= k) {
      e.hr += 1.0;
      e.ndcg += 1.0 / std::log2(static_cast<double>(r.rank) + 1.0);
    }
  e.hr /= static_cast<double>(results.size());
  e.ndcg /= static_cast<double>(results.size());
  return e;
}

struct EvalOptions {
  std::vector<std::size_t> ks{5, 10, 20};
  // Exclude items already in the context (except the target) from ranking.
  bool filter_seen = false;
  std::size_t batch_size = 256;
};

inline std::vector<RankingResult> rank_held_out(const ModelParams& params, const ModelConfig& cfg,
                                                const std::vector<data::HeldOut>& cases, const EvalOptions& opt = {}) {
  std::vector<RankingResult> out;
  out.reserve(cases.size());
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  for (std::size_t start = 0; start < cases.size(); start += bs) {
    const std::size_t end = std::min(cases.size(), start + bs);
    std::vector<std::span<const std::size_t>> histories;
    for (std::size_t i = start; i < end; ++i) histories.emplace_back(cases[i].context);
    Tensor scores = next_item_scores_batch(params, cfg, histories);
    for (std::size_t i = start; i < end; ++i) {
      const auto& c = cases[i];
      if (c.target < data::kFirstItem || c.target >= cfg.vocab_size)
        throw IndexError("held-out target " + std::to_string(c.target) + " outside the item vocabulary");
      auto row = scores.row(i - start);
      std::vector<double> s(row.begin(), row.end());
      if (opt.filter_seen)
        for (std::size_t it : c.context)
          if (it != c.target) s[it - data::kFirstItem] = -std::numeric_limits<double>::infinity();
      out.push_back({c.user, c.target, rank_of_target(s, c.target - data::kFirstItem)});
    }
  }
  return out;
}

inline MetricsReport summarize(std::span<const RankingResult> results, const std::vector<std::size_t>& ks) {
  MetricsReport rep;
  rep.users = results.size();
  for (std::size_t k : ks) rep.at[k] = hr_ndcg(results, k);
  return rep;
}

inline MetricsReport evaluate(const ModelParams& params, const ModelConfig& cfg, const std::vector<data::HeldOut>& cases,
                              const EvalOptions& opt = {}) {
  const auto results = rank_held_out(params, cfg, cases, opt);
  return summarize(results, opt.ks);
}

enum class SplitName { validation, test };

inline MetricsReport evaluate_split(const ModelParams& params, const ModelConfig& cfg, const data::EvalSplit& split,
                                    SplitName which, const EvalOptions& opt = {}) {
  return evaluate(params, cfg, which == SplitName::validation ? split.validation : split.test, opt);
}

// `split K HR NDCG` lines.
inline void write_metrics(std::ostream& os, const std::string& split, const MetricsReport& rep) {
  char buf[128];
  for (const auto& [k, e] : rep.at) {
    std::snprintf(buf, sizeof buf, "%s\t%zu\t%.6f\t%.6f\n", split.c_str(), k, e.hr, e.ndcg);
    os << buf;
  }
}

// Attention averaged over the inference windows of `histories`:
// result[l * heads + i] is T x T.
inline std::vector<Tensor> average_attention(const ModelParams& params, const ModelConfig& cfg,
                                             const std::vector<std::span<const std::size_t>>& histories) {
  if (histories.empty()) throw DataError("attention export needs at least one window");
  std::vector<Tensor> mean;
  for (auto h : histories) {
    const auto maps = attention_maps(params, cfg, inference_window(h, cfg.max_len));
    if (mean.empty()) {
      mean = maps;
      continue;
    }
    for (std::size_t k = 0; k < maps.size(); ++k)
      for (std::size_t i = 0; i < maps[k].size(); ++i) mean[k].data[i] += maps[k].data[i];
  }
  for (auto& m : mean)
    for (double& v : m.data) v /= static_cast<double>(histories.size());
  return mean;
}

// Mean over heads of each layer: result[l] is T x T.
inline std::vector<Tensor> head_average(const std::vector<Tensor>& maps, std::size_t heads) {
  std::vector<Tensor> out;
  for (std::size_t l = 0; l * heads < maps.size(); ++l) {
    Tensor m(maps[l * heads].shape);
    for (std::size_t i = 0; i < heads; ++i)
      for (std::size_t j = 0; j < m.size(); ++j) m.data[j] += maps[l * heads + i].data[j] / static_cast<double>(heads);
    out.push_back(std::move(m));
  }
  return out;
}

// One `# layer l head h` header per matrix, then T rows of T decimals.
// `heads` = 1 with head-averaged maps writes `head mean`.
inline void write_attention(std::ostream& os, const std::vector<Tensor>& maps, std::size_t heads, bool averaged = false) {
  char buf[32];
  for (std::size_t k = 0; k < maps.size(); ++k) {
    if (averaged)
      os << "# layer " << k << " head mean\n";
    else
      os << "# layer " << k / heads << " head " << k % heads << '\n';
    const Tensor& m = maps[k];
    for (std::size_t r = 0; r < m.dim(0); ++r) {
      for (std::size_t c = 0; c < m.dim(1); ++c) {
        std::snprintf(buf, sizeof buf, "%.10f", m.at(r, c));
        if (c) os << ' ';
        os << buf;
      }
      os << '\n';
    }
  }
}

}  // namespace cbit
