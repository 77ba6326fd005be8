#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "beamllm/error.hpp"
#include "beamllm/eval.hpp"
#include "beamllm/random.hpp"
#include "beamllm/reprogram.hpp"

using namespace beamllm;

namespace {

BeamPrediction column_scores(std::vector<double> s) {
  BeamPrediction p{Tensor({s.size(), 1})};
  for (std::size_t i = 0; i < s.size(); ++i) p.scores(i, 0) = s[i];
  return p;
}

// Sort-based reference: order indices by score descending, index ascending.
bool oracle_in_top_k(const Tensor& scores, std::size_t step, std::size_t label, std::size_t k) {
  std::vector<std::size_t> idx(scores.dim(0));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores(a, step) != scores(b, step)) return scores(a, step) > scores(b, step);
    return a < b;
  });
  return std::find(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), label) != idx.begin() + static_cast<std::ptrdiff_t>(k);
}

std::vector<WindowSample> all_windows(std::uint64_t seed) {
  ScenarioConfig sc;
  sc.box_noise = 0.0;
  std::vector<WindowSample> out;
  for (const auto& rec : generate_scenario(sc, seed)) {
    auto w = sliding_windows(rec, 8, 5);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

}  // namespace

TEST(TopK, CountingExamples) {
  // labels 0..3 against the same scores; top-3 is {2, 0, 1}
  const BeamPrediction p = column_scores({0.5, 0.1, 0.9, -1.0});
  std::vector<BeamPrediction> preds(4, p);
  const std::vector<std::vector<std::size_t>> labels{{3}, {0}, {3}, {2}};
  EXPECT_DOUBLE_EQ(top_k_accuracy(preds, labels, 3, 0), 0.5);
  EXPECT_DOUBLE_EQ(top_k_accuracy(preds, labels, 1, 0), 0.25);
  EXPECT_DOUBLE_EQ(top_k_accuracy(preds, labels, 4, 0), 1.0);
  EXPECT_THROW(top_k_accuracy(preds, labels, 5, 0), Error);
  EXPECT_THROW(top_k_accuracy(preds, labels, 0, 0), Error);
  EXPECT_THROW(top_k_accuracy(preds, labels, 1, 1), Error);
  // ties go to the lower index
  const BeamPrediction tie = column_scores({1.0, 1.0, 1.0});
  EXPECT_TRUE(in_top_k(tie.scores, 0, 0, 1));
  EXPECT_FALSE(in_top_k(tie.scores, 0, 1, 1));
  EXPECT_TRUE(in_top_k(tie.scores, 0, 1, 2));
}

TEST(TopK, MatchesSortOracle) {
  Rng rng(12);
  std::size_t disagreements = 0;
  for (int c = 0; c < 500; ++c) {
    const std::size_t m = 1 + rng.index(40);
    Tensor s({m, 3});
    // coarse integer scores so ties are common
    for (double& v : s.data()) v = static_cast<double>(rng.index(6));
    const std::size_t label = rng.index(m);
    const std::size_t step = rng.index(3);
    const std::size_t k = 1 + rng.index(m);
    disagreements += in_top_k(s, step, label, k) != oracle_in_top_k(s, step, label, k);
  }
  EXPECT_EQ(disagreements, 0u);
}

TEST(TopK, MonotoneInKAndRankOnly) {
  Rng rng(13);
  std::vector<BeamPrediction> preds;
  std::vector<std::vector<std::size_t>> labels;
  for (int i = 0; i < 200; ++i) {
    BeamPrediction p{Tensor({32, 2})};
    for (double& v : p.scores.data()) v = rng.normal();
    preds.push_back(p);
    labels.push_back({rng.index(32), rng.index(32)});
  }
  for (std::size_t j = 0; j < 2; ++j) {
    double prev = 0.0;
    for (std::size_t k = 1; k <= 32; ++k) {
      const double a = top_k_accuracy(preds, labels, k, j);
      EXPECT_GE(a, prev);
      prev = a;
    }
    EXPECT_EQ(prev, 1.0);
  }
  auto squashed = preds;
  for (auto& p : squashed) {
    for (double& v : p.scores.data()) v = std::exp(3.0 * v) + 2.0;
  }
  for (std::size_t k : {1, 3, 5}) EXPECT_EQ(top_k_accuracy(preds, labels, k, 1), top_k_accuracy(squashed, labels, k, 1));
}

TEST(TopK, RandomScoresHitOneInThirtyTwo) {
  const auto windows = all_windows(7);
  ASSERT_GE(windows.size(), 1000u);
  Rng rng(99);
  std::vector<BeamPrediction> preds;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    BeamPrediction p{Tensor({32, 5})};
    for (double& v : p.scores.data()) v = rng.uniform();
    preds.push_back(p);
  }
  const TopKReport r = report_from(preds, windows, 32, "random", "standard", "n/a");
  const double n = static_cast<double>(windows.size());
  const double sigma = std::sqrt((1.0 / 32.0) * (31.0 / 32.0) / n);
  for (double a : r.per_step[0]) EXPECT_NEAR(a, 1.0 / 32.0, 3.0 * sigma);
}

TEST(Evaluate, ReportShapeAndModeCheck) {
  auto model = make_predictor("rnn", Mode::standard, 3);
  ScenarioConfig sc;
  sc.n_passes = 10;
  const DatasetSplit split = split_dataset(generate_scenario(sc, 3), 3, 8, 5);
  const TopKReport r = evaluate(*model, split.test, Mode::standard);
  EXPECT_EQ(r.model, "rnn");
  EXPECT_EQ(r.pap, "n/a");
  EXPECT_EQ(r.n_test, split.test.size());
  ASSERT_EQ(r.ks, (std::vector<std::size_t>{1, 3, 5}));
  double sum = 0.0;
  for (std::size_t j = 0; j < 5; ++j) {
    EXPECT_LE(r.per_step[0][j], r.per_step[1][j]);
    EXPECT_LE(r.per_step[1][j], r.per_step[2][j]);
    sum += r.per_step[0][j];
  }
  EXPECT_DOUBLE_EQ(r.mean(0), sum / 5.0);
  EXPECT_DOUBLE_EQ(r.mean_for(1), r.mean(0));
  EXPECT_DOUBLE_EQ(r.degradation(0), r.per_step[0][0] - r.per_step[0][4]);
  EXPECT_THROW(r.mean_for(2), Error);
  try {
    evaluate(*model, split.test, Mode::fewshot);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }

  const std::vector<TopKReport> reports{r};
  const std::string csv = format_metrics_csv(reports);
  EXPECT_EQ(csv.rfind("model,mode,pap,K,step,accuracy,n_test\nrnn,standard,n/a,1,1,", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * (5 + 2));
  EXPECT_NE(csv.find(",mean,"), std::string::npos);
  EXPECT_NE(csv.find(",degradation,"), std::string::npos);
}

TEST(Evaluate, SmallCodebookSkipsLargeK) {
  std::vector<WindowSample> ws(3);
  for (auto& w : ws) w.future_beams = {1, 2};
  std::vector<BeamPrediction> preds(3, BeamPrediction{Tensor({4, 2})});
  const TopKReport r = report_from(preds, ws, 4, "x", "standard", "n/a");
  EXPECT_EQ(r.ks, (std::vector<std::size_t>{1, 3}));
}

TEST(Evaluate, MajorityBaseline) {
  ScenarioConfig sc;
  sc.box_noise = 0.0;
  const DatasetSplit split = split_dataset(generate_scenario(sc, 7), 7, 8, 5);
  const TopKReport r = evaluate_majority(split.train, split.test, 32, Mode::standard);
  std::vector<std::size_t> freq(32, 0);
  for (const auto& w : split.train) {
    for (std::size_t b : w.future_beams) ++freq[b];
  }
  const std::size_t top = static_cast<std::size_t>(std::max_element(freq.begin(), freq.end()) - freq.begin());
  std::size_t hits = 0;
  for (const auto& w : split.test) hits += static_cast<std::size_t>(std::count(w.future_beams.begin(), w.future_beams.end(), top));
  EXPECT_NEAR(r.mean_for(1), static_cast<double>(hits) / (5.0 * static_cast<double>(split.test.size())), 1e-12);
  EXPECT_LE(r.mean_for(1), 0.15);
  EXPECT_LE(r.mean_for(1), r.mean_for(3));
}

TEST(Complexity, CountsAndTiming) {
  std::vector<ComplexityRow> rows;
  Tensor h({4, 8}, 0.3);
  h(0, 3) = 0.4;
  for (const char* kind : {"rnn", "gru", "lstm"}) {
    auto m = make_predictor(kind, Mode::standard, 1);
    rows.push_back(complexity_report(*m, h));
    EXPECT_EQ(rows.back().trainable_params, rows.back().total_params);
    EXPECT_EQ(rows.back().runs, 1000u);
  }
  EXPECT_LT(rows[0].total_params, rows[1].total_params);
  EXPECT_LT(rows[1].total_params, rows[2].total_params);

  BeamLlmConfig tiny;
  tiny.backbone.vocab_size = 50;
  tiny.backbone.hidden = 16;
  tiny.backbone.n_layers = 1;
  tiny.backbone.n_heads = 2;
  BeamLlmModel b(tiny);
  const ComplexityRow a1 = complexity_report(b, h, 50);
  const ComplexityRow a2 = complexity_report(b, h, 50);
  EXPECT_LT(a1.trainable_params, a1.total_params);
  EXPECT_EQ(a1.trainable_params, b.trainable().total_count());
  EXPECT_EQ(a1.total_params - a1.trainable_params, b.backbone().params().total_count());
  for (const auto& r : {a1, a2}) {
    EXPECT_GT(r.mean_inference_sec, 0.0);
    EXPECT_TRUE(std::isfinite(r.mean_inference_sec));
  }
  EXPECT_LT(std::max(a1.mean_inference_sec, a2.mean_inference_sec) / std::min(a1.mean_inference_sec, a2.mean_inference_sec), 1.5);
  rows.push_back(a1);
  const std::string csv = format_complexity_csv(rows);
  EXPECT_EQ(csv.rfind("model,total_params,trainable_params,mean_inference_sec,runs\n", 0), 0u);
}
