#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "tfs/tensor.hpp"

namespace tfs {

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
};

// Compares the reverse-mode gradient of `loss` against central differences,
// coordinate by coordinate. `loss` must rebuild the graph from `params` on
// every call. Relative error is |a − n| / max(|a|, |n|, floor); the floor keeps
// coordinates whose true gradient is ~0 from dominating the report.
template <typename T>
GradCheckReport finite_difference_check(
    const std::function<BasicTensor<T>()>& loss, std::span<BasicTensor<T>> params,
    double step, double tolerance, double floor = 1e-6) {
  for (auto& p : params) p.zero_grad();
  loss().backward();
  std::vector<std::vector<T>> analytic;
  for (const auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const T original = data[j];
      data[j] = static_cast<T>(original + step);
      const double up = loss().item();
      data[j] = static_cast<T>(original - step);
      const double down = loss().item();
      data[j] = original;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[i][j];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
      report.max_relative_error = std::max(report.max_relative_error, rel_err);
      ++report.coordinates;
    }
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace tfs
