#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "tfs/error.hpp"
#include "tfs/metrics.hpp"
#include "tfs/model/batch.hpp"
#include "tfs/model/encoder.hpp"
#include "tfs/ops.hpp"
#include "tfs/text/dataset.hpp"

namespace tfs {

inline constexpr float kMultiLabelThreshold = 0.5f;

// Inference-mode probabilities per example: K class probabilities
// (classification), K independent sigmoid outputs (multi-label), or
// num_words × K rows (tagging), stored flat.
inline std::vector<std::vector<float>> predict_probabilities(
    const model::Model& m, const text::TaskSpec& task, std::span<const text::Example* const> examples,
    std::size_t batch_size = 64) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  NoGradGuard no_grad;
  const auto head = model::head_for(task.kind);
  const auto k = static_cast<std::size_t>(task.num_classes);
  std::vector<std::vector<float>> out;
  out.reserve(examples.size());
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const auto chunk = examples.subspan(start, std::min(batch_size, examples.size() - start));
    const auto batch = model::make_batch(chunk);
    const auto logits = m.head_forward(head, m.encode(batch));
    if (task.kind == text::TaskKind::kMultiLabelClassification) {
      const auto probs = ops::sigmoid(logits);
      for (std::size_t b = 0; b < batch.size; ++b) {
        out.emplace_back(probs.data().begin() + static_cast<std::ptrdiff_t>(b * k),
                         probs.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * k));
      }
    } else if (task.kind == text::TaskKind::kTokenTagging) {
      const auto probs = ops::softmax(logits);
      for (std::size_t b = 0; b < batch.size; ++b) {
        std::vector<float> rows;
        for (const std::size_t pos : batch.word_positions(b)) {
          rows.insert(rows.end(), probs.data().begin() + static_cast<std::ptrdiff_t>(pos * k),
                      probs.data().begin() + static_cast<std::ptrdiff_t>((pos + 1) * k));
        }
        out.push_back(std::move(rows));
      }
    } else {
      const auto probs = ops::softmax(logits);
      for (std::size_t b = 0; b < batch.size; ++b) {
        out.emplace_back(probs.data().begin() + static_cast<std::ptrdiff_t>(b * k),
                         probs.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * k));
      }
    }
  }
  return out;
}

inline int argmax(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

// Hard decisions from probabilities: one class id per row (softmax tasks) or
// the ids above threshold (multi-label).
inline std::vector<int> decide(std::span<const float> probs, const text::TaskSpec& task) {
  const auto k = static_cast<std::size_t>(task.num_classes);
  std::vector<int> out;
  if (task.kind == text::TaskKind::kMultiLabelClassification) {
    for (std::size_t j = 0; j < k; ++j) {
      if (probs[j] >= kMultiLabelThreshold) out.push_back(static_cast<int>(j));
    }
    return out;
  }
  for (std::size_t r = 0; r + k <= probs.size(); r += k) out.push_back(argmax(probs.subspan(r, k)));
  return out;
}

// Task metric of `m` on labeled data, in [0,1].
inline double evaluate(const model::Model& m, const text::TaskSpec& task,
                       const std::vector<text::LabeledExample>& data, std::size_t batch_size = 64) {
  if (data.empty()) throw MetricError("evaluate: empty dataset");
  std::vector<const text::Example*> ex;
  for (const auto& d : data) ex.push_back(&d.example);
  const auto probs = predict_probabilities(m, task, ex, batch_size);
  switch (task.kind) {
    case text::TaskKind::kTokenTagging: {
      std::vector<std::vector<int>> pred, gold;
      for (std::size_t i = 0; i < data.size(); ++i) {
        pred.push_back(decide(probs[i], task));
        gold.push_back(std::get<text::TagSequence>(data[i].label).tags);
      }
      if (task.metric == text::Metric::kAccuracy) {
        std::vector<int> p, g;
        for (std::size_t i = 0; i < pred.size(); ++i) {
          p.insert(p.end(), pred[i].begin(), pred[i].end());
          g.insert(g.end(), gold[i].begin(), gold[i].end());
        }
        return metrics::accuracy(p, g);
      }
      return metrics::span_f1(pred, gold, task.num_classes);
    }
    case text::TaskKind::kMultiLabelClassification: {
      std::vector<std::vector<int>> pred, gold;
      for (std::size_t i = 0; i < data.size(); ++i) {
        pred.push_back(decide(probs[i], task));
        gold.push_back(std::get<text::LabelSet>(data[i].label).ids);
      }
      return metrics::micro_f1(pred, gold, task.num_classes);
    }
    default: {
      std::vector<int> pred, gold;
      for (std::size_t i = 0; i < data.size(); ++i) {
        pred.push_back(decide(probs[i], task).at(0));
        gold.push_back(std::get<text::ClassLabel>(data[i].label).id);
      }
      if (task.metric == text::Metric::kBinaryF1) return metrics::binary_f1(pred, gold);
      return metrics::accuracy(pred, gold);
    }
  }
}

inline double evaluate(const model::ModelCheckpoint& ckpt, const text::TaskSpec& task,
                       const std::vector<text::LabeledExample>& data, std::size_t batch_size = 64) {
  return evaluate(model::Model(ckpt), task, data, batch_size);
}

}  // namespace tfs
