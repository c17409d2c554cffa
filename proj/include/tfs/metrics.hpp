#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "tfs/error.hpp"

namespace tfs::metrics {

struct MetricValue {
  std::string name;
  double value = 0.0;
  std::string split;
};

// F1 from pooled counts; 0 when there are no true positives.
inline double f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  if (tp == 0) return 0.0;
  const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double r = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * p * r / (p + r);
}

namespace detail {
template <typename A, typename B>
void require_same_length(const A& a, const B& b, const char* op) {
  if (a.size() != b.size()) {
    throw MetricError(std::string(op) + ": " + std::to_string(a.size()) + " predictions vs " +
                      std::to_string(b.size()) + " gold labels");
  }
  if (a.empty()) throw MetricError(std::string(op) + ": empty input");
}
}  // namespace detail

inline double accuracy(std::span<const int> predicted, std::span<const int> gold) {
  detail::require_same_length(predicted, gold, "accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += predicted[i] == gold[i];
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

inline double binary_f1(std::span<const int> predicted, std::span<const int> gold,
                        int positive_class = 1) {
  detail::require_same_length(predicted, gold, "binary_f1");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const bool p = predicted[i] == positive_class, g = gold[i] == positive_class;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
  }
  return f1_from_counts(tp, fp, fn);
}

// BIO tag indices: 0 = O, 2t+1 = B of type t, 2t+2 = I of type t.
inline bool is_outside(int tag) { return tag == 0; }
inline bool is_begin(int tag) { return tag > 0 && tag % 2 == 1; }
inline int tag_type(int tag) { return (tag - 1) / 2; }

// (type, first, last) with inclusive bounds.
using Span = std::tuple<int, std::size_t, std::size_t>;

// A span starts at B-x, or at I-x not continuing a span of type x, and
// extends over the following I-x tags.
inline std::vector<Span> extract_spans(std::span<const int> tags) {
  std::vector<Span> spans;
  std::size_t i = 0;
  while (i < tags.size()) {
    if (is_outside(tags[i])) {
      ++i;
      continue;
    }
    const int type = tag_type(tags[i]);
    std::size_t j = i + 1;
    while (j < tags.size() && !is_outside(tags[j]) && !is_begin(tags[j]) &&
           tag_type(tags[j]) == type) {
      ++j;
    }
    spans.emplace_back(type, i, j - 1);
    i = j;
  }
  return spans;
}

// Entity-level exact-match F1 pooled over sentences. Tags must lie in
// [0, num_tags) when num_tags > 0.
inline double span_f1(const std::vector<std::vector<int>>& predicted,
                      const std::vector<std::vector<int>>& gold, int num_tags = 0) {
  detail::require_same_length(predicted, gold, "span_f1");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    if (predicted[s].size() != gold[s].size()) {
      throw MetricError("span_f1: sentence " + std::to_string(s) + " length mismatch");
    }
    for (const auto* seq : {&predicted[s], &gold[s]}) {
      for (const int t : *seq) {
        if (t < 0 || (num_tags > 0 && t >= num_tags)) {
          throw MetricError("span_f1: invalid tag index " + std::to_string(t));
        }
      }
    }
    const auto p = extract_spans(predicted[s]);
    const auto g = extract_spans(gold[s]);
    const std::set<Span> gold_set(g.begin(), g.end());
    std::size_t matched = 0;
    for (const auto& span : p) matched += gold_set.count(span);
    tp += matched;
    fp += p.size() - matched;
    fn += g.size() - matched;
  }
  return f1_from_counts(tp, fp, fn);
}

// Pooled (example, class) decisions over label sets.
inline double micro_f1(const std::vector<std::vector<int>>& predicted,
                       const std::vector<std::vector<int>>& gold, int num_classes) {
  detail::require_same_length(predicted, gold, "micro_f1");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    std::set<int> p, g;
    for (const int c : predicted[i]) p.insert(c);
    for (const int c : gold[i]) g.insert(c);
    for (const auto* s : {&p, &g}) {
      for (const int c : *s) {
        if (c < 0 || c >= num_classes) {
          throw MetricError("micro_f1: label " + std::to_string(c) + " outside [0," +
                            std::to_string(num_classes) + ")");
        }
      }
    }
    for (const int c : p) {
      if (g.count(c)) {
        ++tp;
      } else {
        ++fp;
      }
    }
    for (const int c : g) fn += p.count(c) == 0;
  }
  return f1_from_counts(tp, fp, fn);
}

struct AggregateResult {
  std::string regime;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::vector<double> values;
};

inline AggregateResult aggregate(std::span<const double> values, std::string regime = {},
                                 std::string metric = {}) {
  if (values.empty()) throw MetricError("aggregate: no runs");
  AggregateResult r{std::move(regime), std::move(metric), 0.0, 0.0,
                    std::vector<double>(values.begin(), values.end())};
  // Summing sorted offsets from the minimum makes the result independent of
  // run order and exact for constant inputs.
  std::vector<double> sorted = r.values;
  std::sort(sorted.begin(), sorted.end());
  const double origin = sorted[0];
  double offset = 0.0;
  for (const double v : sorted) offset += v - origin;
  offset /= static_cast<double>(sorted.size());
  r.mean = origin + offset;
  double sq = 0.0;
  for (const double v : sorted) sq += (v - origin - offset) * (v - origin - offset);
  r.std = std::sqrt(sq / static_cast<double>(values.size()));
  return r;
}

// FT + (TAPT − FT) + (ST − FT).
inline double additive_reference(const AggregateResult& ft, const AggregateResult& tapt,
                                 const AggregateResult& st) {
  if (ft.metric != tapt.metric || ft.metric != st.metric) {
    throw MetricError("additive_reference: results use different metrics");
  }
  return ft.mean + (tapt.mean - ft.mean) + (st.mean - ft.mean);
}

}  // namespace tfs::metrics
