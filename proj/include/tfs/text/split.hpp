#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <variant>
#include <vector>

#include "tfs/error.hpp"
#include "tfs/rng.hpp"
#include "tfs/text/dataset.hpp"

namespace tfs::text {

struct Split {
  std::vector<LabeledExample> labeled;  // D_l
  std::vector<Example> unlabeled;       // D_u, labels stripped
};

// Samples round(ratio * N) labeled examples; the rest become unlabeled.
// Single-label tasks get at least one labeled example per class present
// whenever the labeled budget allows it. Unlabeled examples keep file order.
inline Split sample_split(const std::vector<LabeledExample>& dataset, double labeled_ratio,
                          std::uint64_t seed) {
  if (!(labeled_ratio > 0.0 && labeled_ratio < 1.0)) {
    throw ConfigError("labeled_ratio must be in (0,1)");
  }
  const std::size_t n = dataset.size();
  const auto count = static_cast<std::size_t>(std::llround(labeled_ratio * static_cast<double>(n)));
  if (count == 0) throw ConfigError("labeled_ratio yields zero labeled examples");
  if (count >= n) throw ConfigError("labeled_ratio leaves no unlabeled examples");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle<std::size_t>(order);

  std::vector<std::uint8_t> chosen(n, 0);
  std::vector<std::size_t> picked;
  std::set<int> classes;
  for (const auto& ex : dataset) {
    if (const auto* c = std::get_if<ClassLabel>(&ex.label)) classes.insert(c->id);
  }
  if (!classes.empty() && classes.size() <= count) {
    for (const int cls : classes) {
      for (const std::size_t i : order) {
        const auto* c = std::get_if<ClassLabel>(&dataset[i].label);
        if (c != nullptr && c->id == cls && !chosen[i]) {
          chosen[i] = 1;
          picked.push_back(i);
          break;
        }
      }
    }
  }
  for (const std::size_t i : order) {
    if (picked.size() >= count) break;
    if (!chosen[i]) {
      chosen[i] = 1;
      picked.push_back(i);
    }
  }
  Split split;
  split.labeled.reserve(count);
  for (const std::size_t i : picked) split.labeled.push_back(dataset[i]);
  split.unlabeled.reserve(n - count);
  for (std::size_t i = 0; i < n; ++i) {
    if (!chosen[i]) split.unlabeled.push_back(dataset[i].example);
  }
  return split;
}

// Holds out the last `fraction` of a shuffled copy as a dev set (at least one
// example when possible).
inline std::pair<std::vector<LabeledExample>, std::vector<LabeledExample>> hold_out(
    const std::vector<LabeledExample>& data, double fraction, std::uint64_t seed) {
  std::vector<LabeledExample> train = data;
  Rng rng(seed);
  rng.shuffle<LabeledExample>(train);
  auto dev_count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size())));
  if (dev_count == 0 && data.size() > 1) dev_count = 1;
  std::vector<LabeledExample> dev(train.end() - static_cast<std::ptrdiff_t>(dev_count), train.end());
  train.resize(train.size() - dev_count);
  return {std::move(train), std::move(dev)};
}

}  // namespace tfs::text
