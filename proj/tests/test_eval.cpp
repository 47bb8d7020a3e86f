#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cbit/eval.hpp"

using namespace cbit;

namespace {

ModelConfig small_config(std::size_t items = 30, std::size_t T = 5) {
  ModelConfig cfg;
  cfg.max_len = T;
  cfg.dim = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.vocab_size = items + data::kFirstItem;
  cfg.dropout = 0.3;
  cfg.seed = 9;
  return cfg;
}

ModelParams random_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = make_params(cfg);
  Rng rng(seed);
  p.for_each([&](const std::string&, Tensor& t) {
    for (double& v : t.data) v = 2.0 * rng.uniform() - 1.0;
  });
  return p;
}

// Rank by sorting item indices on (score desc, index asc).
std::size_t sort_rank(const std::vector<double>& s, std::size_t target) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  return static_cast<std::size_t>(std::find(idx.begin(), idx.end(), target) - idx.begin()) + 1;
}

}  // namespace

TEST(InferenceWindow, TruncatesAppendsMaskAndPads) {
  std::vector<std::size_t> h = {5, 6};
  EXPECT_EQ(inference_window(h, 5), (std::vector<std::size_t>{0, 0, 5, 6, data::kMaskToken}));
  std::vector<std::size_t> long_h = {2, 3, 4, 5, 6, 7, 8};
  EXPECT_EQ(inference_window(long_h, 4), (std::vector<std::size_t>{6, 7, 8, data::kMaskToken}));
  std::vector<std::size_t> empty;
  EXPECT_THROW(inference_window(empty, 4), DataError);
}

TEST(NextItemScores, EqualsLastRowOfEvalForward) {
  ModelConfig cfg = small_config();
  ModelParams p = random_params(cfg, 1);
  std::vector<std::size_t> h = {4, 9, 11};
  Tensor s = next_item_scores(p, cfg, h);
  ASSERT_EQ(s.size(), cfg.num_items());
  Graph g;
  BoundParams bp = bind(g, p);
  const auto w = inference_window(h, cfg.max_len);
  Var hid = forward(bp, cfg, w, {}).hidden;
  Tensor want = predict_logits(bp, gather_rows(hid, {cfg.max_len - 1})).value();
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(s[i], want.data[i]);
  // Deterministic: dropout is off.
  EXPECT_EQ(next_item_scores(p, cfg, h).data, s.data);
}

TEST(NextItemScores, OnlyLastTMinusOneItemsMatter) {
  ModelConfig cfg = small_config();
  ModelParams p = random_params(cfg, 2);
  std::vector<std::size_t> a = {3, 4, 5, 6, 7, 8, 9};
  std::vector<std::size_t> b = {20, 21, 22, 6, 7, 8, 9};
  EXPECT_EQ(next_item_scores(p, cfg, a).data, next_item_scores(p, cfg, b).data);
  std::vector<std::size_t> c = {3, 4, 5, 10, 7, 8, 9};
  EXPECT_NE(next_item_scores(p, cfg, a).data, next_item_scores(p, cfg, c).data);
}

TEST(NextItemScores, BatchMatchesSingle) {
  ModelConfig cfg = small_config();
  ModelParams p = random_params(cfg, 3);
  std::vector<std::vector<std::size_t>> hs = {{2}, {5, 6, 7, 8, 9, 10}, {12, 13}};
  std::vector<std::span<const std::size_t>> spans(hs.begin(), hs.end());
  Tensor all = next_item_scores_batch(p, cfg, spans);
  for (std::size_t b = 0; b < hs.size(); ++b) {
    Tensor one = next_item_scores(p, cfg, hs[b]);
    for (std::size_t i = 0; i < one.size(); ++i) EXPECT_NEAR(all.at(b, i), one[i], 1e-12);
  }
}

TEST(RankOfTarget, TieBreakAndExtremes) {
  std::vector<double> s = {0.1, 0.9, 0.3};
  EXPECT_EQ(rank_of_target(s, 1), 1u);
  EXPECT_EQ(rank_of_target(s, 0), 3u);
  std::vector<double> flat(6, 0.5);
  EXPECT_EQ(rank_of_target(flat, 0), 1u);
  EXPECT_EQ(rank_of_target(flat, 4), 5u);
  EXPECT_THROW(rank_of_target(flat, 6), IndexError);
}

TEST(RankOfTarget, MatchesSortOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(1 + rng.index(60));
    // Coarse values so ties are common.
    for (double& v : s) v = static_cast<double>(rng.index(7));
    const std::size_t t = rng.index(s.size());
    EXPECT_EQ(rank_of_target(s, t), sort_rank(s, t));
  }
}

TEST(HrNdcg, ClosedForms) {
  std::vector<RankingResult> ones(4, RankingResult{0, 2, 1});
  MetricEntry e = hr_ndcg(ones, 10);
  EXPECT_EQ(e.hr, 1.0);
  EXPECT_EQ(e.ndcg, 1.0);
  std::vector<RankingResult> r3 = {{0, 2, 3}};
  e = hr_ndcg(r3, 10);
  EXPECT_EQ(e.hr, 1.0);
  EXPECT_DOUBLE_EQ(e.ndcg, 0.5);
  EXPECT_EQ(hr_ndcg(r3, 2).hr, 0.0);
  std::vector<RankingResult> none;
  EXPECT_THROW(hr_ndcg(none, 10), DataError);
}

TEST(HrNdcg, RandomRanksAgainstDirectFormula) {
  Rng rng(6);
  std::vector<RankingResult> rs;
  for (int u = 0; u < 1000; ++u) rs.push_back({static_cast<std::size_t>(u), 2, 1 + rng.index(50)});
  double prev_hr = 0.0, prev_ndcg = 0.0;
  for (std::size_t k : {1u, 5u, 10u, 20u, 50u}) {
    double hr = 0.0, dcg = 0.0;
    for (const auto& r : rs)
      if (r.rank <= k) hr += 1.0, dcg += std::log(2.0) / std::log(r.rank + 1.0);
    MetricEntry e = hr_ndcg(rs, k);
    EXPECT_NEAR(e.hr, hr / 1000.0, 1e-15);
    EXPECT_NEAR(e.ndcg, dcg / 1000.0, 1e-13);
    EXPECT_LE(e.ndcg, e.hr);
    EXPECT_GE(e.hr, prev_hr);
    EXPECT_GE(e.ndcg, prev_ndcg);
    prev_hr = e.hr;
    prev_ndcg = e.ndcg;
  }
}

TEST(EvaluateSplit, UniformScoresGiveIndexRank) {
  // All-zero parameters make every score equal, so rank = target index + 1.
  ModelConfig cfg = small_config(100);
  ModelParams p = make_params(cfg);
  Rng rng(8);
  std::vector<data::HeldOut> cases;
  for (std::size_t u = 0; u < 2000; ++u)
    cases.push_back({u, {data::kFirstItem + rng.index(100)}, data::kFirstItem + rng.index(100)});
  auto results = rank_held_out(p, cfg, cases);
  std::size_t in_top10 = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    EXPECT_EQ(results[i].rank, cases[i].target - data::kFirstItem + 1);
    in_top10 += results[i].rank <= 10;
  }
  MetricsReport rep = summarize(results, {5, 10, 20});
  EXPECT_DOUBLE_EQ(rep.at[10].hr, in_top10 / 2000.0);
  EXPECT_NEAR(rep.at[10].hr, 0.1, 0.02);
}

TEST(EvaluateSplit, BiasOnlyModelHitsItsFavouriteItem) {
  ModelConfig cfg = small_config(10);
  ModelParams p = make_params(cfg);
  p.pred_b[3] = 10.0;  // item 5
  data::EvalSplit split;
  for (std::size_t u = 0; u < 7; ++u) {
    split.train_sequences.push_back({2, 3, 4});
    split.validation.push_back({u, {2, 3, 4}, 5});
    split.test.push_back({u, {2, 3, 4, 5}, 6});
  }
  MetricsReport val = evaluate_split(p, cfg, split, SplitName::validation, {{1, 10}});
  EXPECT_EQ(val.at[1].hr, 1.0);
  EXPECT_EQ(val.users, 7u);
  MetricsReport test = evaluate_split(p, cfg, split, SplitName::test, {{1, 10}});
  EXPECT_EQ(test.at[1].hr, 0.0);
  EXPECT_EQ(test.at[10].hr, 1.0);
}

TEST(EvaluateSplit, OrderAndDuplicationInvariant) {
  ModelConfig cfg = small_config();
  ModelParams p = random_params(cfg, 10);
  Rng rng(11);
  std::vector<data::HeldOut> cases;
  for (std::size_t u = 0; u < 40; ++u) {
    std::vector<std::size_t> ctx(1 + rng.index(8));
    for (auto& v : ctx) v = data::kFirstItem + rng.index(30);
    cases.push_back({u, ctx, data::kFirstItem + rng.index(30)});
  }
  EvalOptions small_batches;
  small_batches.batch_size = 3;
  MetricsReport a = evaluate(p, cfg, cases);
  MetricsReport b = evaluate(p, cfg, cases, small_batches);
  std::vector<data::HeldOut> doubled = cases;
  doubled.insert(doubled.end(), cases.rbegin(), cases.rend());
  MetricsReport c = evaluate(p, cfg, doubled);
  for (std::size_t k : {5u, 10u, 20u}) {
    EXPECT_NEAR(a.at[k].hr, b.at[k].hr, 1e-15);
    EXPECT_NEAR(a.at[k].ndcg, b.at[k].ndcg, 1e-15);
    EXPECT_NEAR(a.at[k].hr, c.at[k].hr, 1e-15);
    EXPECT_NEAR(a.at[k].ndcg, c.at[k].ndcg, 1e-15);
  }
}

TEST(EvaluateSplit, FilterSeenDropsContextItems) {
  ModelConfig cfg = small_config(10);
  ModelParams p = make_params(cfg);
  p.pred_b.data = {9, 8, 7, 6, 5, 4, 3, 2, 1, 0};  // item 2 best, item 11 worst
  std::vector<data::HeldOut> cases = {{0, {2, 3, 4}, 6}, {1, {2, 6}, 6}};
  EvalOptions plain;
  EvalOptions filtered;
  filtered.filter_seen = true;
  auto r0 = rank_held_out(p, cfg, cases, plain);
  auto r1 = rank_held_out(p, cfg, cases, filtered);
  EXPECT_EQ(r0[0].rank, 5u);
  EXPECT_EQ(r1[0].rank, 2u);
  // The target itself is never filtered, even when it appears in the context.
  EXPECT_EQ(r0[1].rank, 5u);
  EXPECT_EQ(r1[1].rank, 4u);
}

TEST(MetricsOutput, ThreeRowsPerSplit) {
  MetricsReport rep;
  rep.at[5] = {0.5, 0.25};
  rep.at[10] = {0.75, 0.3};
  rep.at[20] = {1.0, 0.35};
  std::ostringstream os;
  write_metrics(os, "test", rep);
  EXPECT_EQ(os.str(), "test\t5\t0.500000\t0.250000\ntest\t10\t0.750000\t0.300000\ntest\t20\t1.000000\t0.350000\n");
}

TEST(AttentionExport, SingleWindowEqualsMapsAndRowsSumToOne) {
  ModelConfig cfg = small_config();
  ModelParams p = random_params(cfg, 12);
  std::vector<std::size_t> h = {4, 5, 6};
  auto avg = average_attention(p, cfg, {h});
  auto direct = attention_maps(p, cfg, inference_window(h, cfg.max_len));
  ASSERT_EQ(avg.size(), cfg.layers * cfg.heads);
  for (std::size_t k = 0; k < avg.size(); ++k) EXPECT_EQ(avg[k].data, direct[k].data);

  std::ostringstream os;
  write_attention(os, avg, cfg.heads);
  std::istringstream in(os.str());
  std::string line;
  std::size_t headers = 0, rows = 0;
  while (std::getline(in, line)) {
    if (line.rfind("# layer ", 0) == 0) {
      ++headers;
      continue;
    }
    std::istringstream row(line);
    double v, total = 0.0;
    std::size_t n = 0;
    while (row >> v) total += v, ++n;
    EXPECT_EQ(n, cfg.max_len);
    EXPECT_NEAR(total, 1.0, 1e-6);
    ++rows;
  }
  EXPECT_EQ(headers, cfg.layers * cfg.heads);
  EXPECT_EQ(rows, headers * cfg.max_len);
  EXPECT_NE(os.str().find("# layer 1 head 0\n"), std::string::npos);
}

TEST(AttentionExport, AverageIsArithmeticMean) {
  ModelConfig cfg = small_config();
  ModelParams p = random_params(cfg, 13);
  Rng rng(14);
  std::vector<std::vector<std::size_t>> hs;
  for (int i = 0; i < 10; ++i) {
    std::vector<std::size_t> h(1 + rng.index(6));
    for (auto& v : h) v = data::kFirstItem + rng.index(30);
    hs.push_back(h);
  }
  std::vector<std::span<const std::size_t>> spans(hs.begin(), hs.end());
  auto avg = average_attention(p, cfg, spans);
  std::vector<Tensor> sum;
  for (const auto& h : hs) {
    auto one = average_attention(p, cfg, {h});
    if (sum.empty()) sum = one;
    else
      for (std::size_t k = 0; k < one.size(); ++k)
        for (std::size_t i = 0; i < one[k].size(); ++i) sum[k].data[i] += one[k].data[i];
  }
  for (std::size_t k = 0; k < avg.size(); ++k)
    for (std::size_t i = 0; i < avg[k].size(); ++i) EXPECT_NEAR(avg[k].data[i], sum[k].data[i] / 10.0, 1e-15);
  auto heads = head_average(avg, cfg.heads);
  ASSERT_EQ(heads.size(), cfg.layers);
  EXPECT_NEAR(heads[0].at(1, 2), (avg[0].at(1, 2) + avg[1].at(1, 2)) / 2.0, 1e-15);
}
