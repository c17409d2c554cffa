#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "tfs/metrics.hpp"
#include "tfs/rng.hpp"

namespace tfs::metrics {
namespace {

// Tag helpers for type t: B = 2t+1, I = 2t+2.
constexpr int B(int t) { return 2 * t + 1; }
constexpr int I(int t) { return 2 * t + 2; }

TEST(Accuracy, HandCases) {
  const std::vector<int> a = {0, 1, 1, 0}, b = {0, 1, 0, 1};
  EXPECT_EQ(accuracy(a, a), 1.0);
  EXPECT_EQ(accuracy(a, b), 0.5);
  EXPECT_THROW(accuracy(std::vector<int>{}, std::vector<int>{}), MetricError);
  EXPECT_THROW(accuracy(a, std::vector<int>{0}), MetricError);
}

TEST(BinaryF1, HandCases) {
  // TP=1, FP=1, FN=0.
  EXPECT_EQ(binary_f1(std::vector<int>{1, 1, 0}, std::vector<int>{1, 0, 0}), 2.0 / 3.0);
  EXPECT_EQ(binary_f1(std::vector<int>{1, 0, 1}, std::vector<int>{1, 0, 1}), 1.0);
  EXPECT_EQ(binary_f1(std::vector<int>{0, 0}, std::vector<int>{0, 0}), 0.0);
}

TEST(BinaryF1, RecallOnAllPositiveGoldIsAccuracy) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> pred(20), gold(20, 1);
    for (int& p : pred) p = static_cast<int>(rng.below(2));
    const double acc = accuracy(pred, gold);
    // With FP = 0, F1 = 2R/(1+R).
    const double expected = acc == 0.0 ? 0.0 : 2.0 * acc / (1.0 + acc);
    EXPECT_NEAR(binary_f1(pred, gold), expected, 1e-12);
  }
}

TEST(SpanF1, HandCases) {
  const int O = 0, PER = 0, LOC = 1;
  // Gold PER[1,2] vs predicted PER[1,2].
  EXPECT_EQ(span_f1({{O, B(PER), I(PER), O}}, {{O, B(PER), I(PER), O}}), 1.0);
  // Predicted PER[1,1] vs gold PER[1,2].
  EXPECT_EQ(span_f1({{O, B(PER), O, O}}, {{O, B(PER), I(PER), O}}), 0.0);
  // Gold {PER[0,0], LOC[3,4]}, predicted {PER[0,0]}.
  EXPECT_EQ(span_f1({{B(PER), O, O, O, O}}, {{B(PER), O, O, B(LOC), I(LOC)}}), 2.0 / 3.0);
  // I without B opens a span.
  EXPECT_EQ(span_f1({{O, I(LOC), I(LOC)}}, {{O, B(LOC), I(LOC)}}), 1.0);
  EXPECT_THROW(span_f1({{-1}}, {{0}}), MetricError);
  EXPECT_THROW(span_f1({{5}}, {{0}}, 5), MetricError);
}

// Independent span test: [s,e] is an entity of type x iff it opens at s, every
// later position continues it, and position e+1 does not.
std::vector<Span> brute_spans(const std::vector<int>& tags) {
  std::vector<Span> out;
  const std::size_t n = tags.size();
  for (int x = 0; x < 3; ++x) {
    for (std::size_t s = 0; s < n; ++s) {
      const bool opens = tags[s] == B(x) ||
                         (tags[s] == I(x) && (s == 0 || (tags[s - 1] != B(x) && tags[s - 1] != I(x))));
      if (!opens) continue;
      for (std::size_t e = s; e < n; ++e) {
        bool inside = true;
        for (std::size_t k = s + 1; k <= e; ++k) inside = inside && tags[k] == I(x);
        const bool closes = e + 1 == n || tags[e + 1] != I(x);
        if (inside && closes) out.emplace_back(x, s, e);
      }
    }
  }
  return out;
}

double brute_f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  if (tp == 0) return 0.0;
  const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double r = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * p * r / (p + r);
}

TEST(SpanF1, MatchesBruteForce) {
  Rng rng(2);
  for (int instance = 0; instance < 200; ++instance) {
    std::vector<std::vector<int>> pred, gold;
    std::size_t tp = 0, fp = 0, fn = 0;
    const std::size_t sentences = 1 + rng.below(4);
    for (std::size_t s = 0; s < sentences; ++s) {
      const std::size_t n = 1 + rng.below(7);
      std::vector<int> p(n), g(n);
      for (auto& t : p) t = static_cast<int>(rng.below(7));
      for (auto& t : g) t = static_cast<int>(rng.below(7));
      const auto ps = brute_spans(p), gs = brute_spans(g);
      for (const auto& sp : ps) {
        if (std::find(gs.begin(), gs.end(), sp) != gs.end()) {
          ++tp;
        } else {
          ++fp;
        }
      }
      for (const auto& sp : gs) fn += std::find(ps.begin(), ps.end(), sp) == ps.end();
      pred.push_back(p);
      gold.push_back(g);
    }
    ASSERT_EQ(span_f1(pred, gold, 7), brute_f1(tp, fp, fn)) << "instance " << instance;
    // Swapping predicted and gold exchanges P and R; F1 is unchanged.
    ASSERT_EQ(span_f1(gold, pred, 7), span_f1(pred, gold, 7));
  }
}

TEST(MicroF1, HandCases) {
  EXPECT_EQ(micro_f1({{0}, {1}}, {{0}, {1}}, 2), 1.0);
  EXPECT_EQ(micro_f1({{0}, {1, 2}}, {{0, 1}, {1}}, 3), 2.0 / 3.0);
  EXPECT_EQ(micro_f1({{}, {}}, {{0}, {1}}, 2), 0.0);
  EXPECT_THROW(micro_f1({{3}}, {{0}}, 3), MetricError);
}

TEST(MicroF1, MatchesBruteForce) {
  Rng rng(3);
  for (int instance = 0; instance < 200; ++instance) {
    const int k = 2 + static_cast<int>(rng.below(4));
    const std::size_t n = 1 + rng.below(6);
    std::vector<std::vector<int>> pred(n), gold(n);
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      // Indicator-matrix view of the pooled decisions.
      for (int c = 0; c < k; ++c) {
        const bool p = rng.bernoulli(0.4), g = rng.bernoulli(0.4);
        if (p) pred[i].push_back(c);
        if (g) gold[i].push_back(c);
        tp += p && g;
        fp += p && !g;
        fn += !p && g;
      }
      std::reverse(pred[i].begin(), pred[i].end());
    }
    ASSERT_EQ(micro_f1(pred, gold, k), brute_f1(tp, fp, fn)) << "instance " << instance;
  }
}

TEST(MicroF1, SingleLabelEqualsAccuracy) {
  Rng rng(4);
  std::vector<std::vector<int>> pred, gold;
  std::vector<int> p1, g1;
  for (int i = 0; i < 50; ++i) {
    p1.push_back(static_cast<int>(rng.below(4)));
    g1.push_back(static_cast<int>(rng.below(4)));
    pred.push_back({p1.back()});
    gold.push_back({g1.back()});
  }
  EXPECT_NEAR(micro_f1(pred, gold, 4), accuracy(p1, g1), 1e-12);
}

TEST(Aggregate, MeanAndPopulationStd) {
  const std::vector<double> v = {1, 2, 3};
  const auto r = aggregate(v);
  EXPECT_DOUBLE_EQ(r.mean, 2.0);
  EXPECT_NEAR(r.std, std::sqrt(2.0 / 3.0), 1e-12);
  EXPECT_EQ(aggregate(std::vector<double>{0.7}).std, 0.0);
  EXPECT_EQ(aggregate(std::vector<double>{0.4, 0.4, 0.4}).std, 0.0);
  EXPECT_THROW(aggregate(std::vector<double>{}), MetricError);
  const std::vector<double> shuffled = {3, 1, 2};
  EXPECT_EQ(aggregate(shuffled).mean, r.mean);
  EXPECT_EQ(aggregate(shuffled).std, r.std);
}

TEST(AdditiveReference, ReferenceValues) {
  const auto one = [](double v) { return aggregate(std::vector<double>{v}, "", "accuracy"); };
  EXPECT_NEAR(additive_reference(one(79.1), one(82.0), one(80.2)), 83.1, 1e-9);
  EXPECT_NEAR(additive_reference(one(57.3), one(58.8), one(59.2)), 60.7, 1e-9);
  EXPECT_EQ(additive_reference(one(70.0), one(70.0), one(70.0)), 70.0);
  auto f1 = one(80.0);
  f1.metric = "binary_f1";
  EXPECT_THROW(additive_reference(one(1), one(2), f1), MetricError);
}

}  // namespace
}  // namespace tfs::metrics
