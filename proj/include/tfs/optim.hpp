#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tfs/error.hpp"
#include "tfs/tensor.hpp"

namespace tfs {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment accumulators, one pair per parameter, zero at step 0.
struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  OptimizerState() = default;
  explicit OptimizerState(AdamConfig cfg) : config(cfg) {
    if (!(cfg.lr > 0) || !(cfg.beta1 > 0) || !(cfg.beta2 > 0) || !(cfg.eps > 0) ||
        cfg.beta1 >= 1 || cfg.beta2 >= 1) {
      throw ConfigError("adam: lr, beta1, beta2, eps must be positive and betas < 1");
    }
  }
};

// One bias-corrected Adam update over `params`. Every parameter must carry a
// gradient. Moment buffers are created lazily on the first call and must keep
// the same parameter order afterwards.
template <typename T>
void adam_step(std::span<BasicTensor<T>> params, OptimizerState& state) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw OptimizerError("adam: parameter list changed between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw OptimizerError("adam: parameter " + std::to_string(i) + " has no gradient");
    }
    if (state.first_moment[i].size() != params[i].numel()) {
      throw OptimizerError("adam: parameter " + std::to_string(i) + " changed size");
    }
  }
  ++state.step;
  const AdamConfig& c = state.config;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    const auto grad = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      const double m_hat = m[j] / correct1;
      const double v_hat = v[j] / correct2;
      data[j] = static_cast<T>(data[j] - c.lr * m_hat / (std::sqrt(v_hat) + c.eps));
    }
  }
}

}  // namespace tfs
