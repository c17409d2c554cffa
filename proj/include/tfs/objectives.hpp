#pragma once

#include <cmath>
#include <span>
#include <variant>
#include <vector>

#include "tfs/error.hpp"
#include "tfs/model/batch.hpp"
#include "tfs/model/encoder.hpp"
#include "tfs/ops.hpp"
#include "tfs/rng.hpp"
#include "tfs/tensor.hpp"
#include "tfs/text/dataset.hpp"

namespace tfs::objectives {

using model::Batch;
using model::BasicModel;
using model::HeadKind;
using text::LabeledExample;
using text::TaskKind;
using text::TaskSpec;
using text::TokenId;

inline constexpr double kDefaultMaskProb = 0.15;

// Corrupted copy of a batch. `positions` lists the masked flat positions in
// increasing order and `targets` their original ids.
struct MaskedBatch {
  Batch batch;
  std::vector<std::uint8_t> indicator;
  std::vector<std::size_t> positions;
  std::vector<int> targets;
};

// Masks each eligible (non-special) position independently with probability
// mask_prob, replacing it by [MASK]. A batch that draws no mask is re-drawn
// once, then one eligible position is forced.
inline MaskedBatch apply_dynamic_mask(const Batch& batch, double mask_prob, Rng& rng) {
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) {
    throw ConfigError("mask probability must be in (0,1)");
  }
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < batch.positions(); ++i) {
    if (!batch.special[i]) eligible.push_back(i);
  }
  if (eligible.empty()) throw DataError("apply_dynamic_mask: no maskable positions in batch");
  MaskedBatch out;
  out.batch = batch;
  out.indicator.assign(batch.positions(), 0);
  for (int attempt = 0; attempt < 2 && out.positions.empty(); ++attempt) {
    for (const std::size_t i : eligible) {
      if (rng.bernoulli(mask_prob)) out.positions.push_back(i);
    }
  }
  if (out.positions.empty()) out.positions.push_back(eligible[rng.below(eligible.size())]);
  for (const std::size_t i : out.positions) {
    out.indicator[i] = 1;
    out.targets.push_back(batch.ids[i]);
    out.batch.ids[i] = text::kMaskId;
  }
  return out;
}

// Mean over masked positions of −log p(original | corrupted), given scores
// for every position ([positions × V]). Rows of unmasked positions are never
// read.
template <typename T>
BasicTensor<T> mlm_loss_from_logits(const BasicTensor<T>& logits, const MaskedBatch& masked) {
  if (masked.positions.empty()) throw ObjectiveError("mlm_loss: no masked positions");
  const auto rows = ops::gather_rows(logits, std::span<const std::size_t>(masked.positions));
  return ops::nll_loss(ops::log_softmax(rows), std::span<const int>(masked.targets));
}

// Only the masked rows are projected onto the vocabulary.
template <typename T>
BasicTensor<T> mlm_loss(const BasicModel<T>& model, const MaskedBatch& masked,
                        Rng* dropout_rng = nullptr) {
  if (masked.positions.empty()) throw ObjectiveError("mlm_loss: no masked positions");
  const auto hidden = model.encode(masked.batch, dropout_rng);
  const auto rows = ops::gather_rows(hidden.states, std::span<const std::size_t>(masked.positions));
  return ops::nll_loss(ops::log_softmax(model.mlm_logits(rows)),
                       std::span<const int>(masked.targets));
}

namespace detail {

inline std::vector<const text::Example*> examples_of(
    std::span<const LabeledExample* const> batch) {
  std::vector<const text::Example*> out;
  out.reserve(batch.size());
  for (const auto* e : batch) out.push_back(&e->example);
  return out;
}

// Flat positions of all word-start pieces, example by example.
inline std::vector<std::size_t> word_rows(const Batch& batch) {
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < batch.size; ++b) {
    const auto w = batch.word_positions(b);
    rows.insert(rows.end(), w.begin(), w.end());
  }
  return rows;
}

inline const std::vector<int>& tags_of(const text::Label& label) {
  const auto* seq = std::get_if<text::TagSequence>(&label);
  if (seq == nullptr) throw DataError("tagging task needs a tag sequence label");
  return seq->tags;
}

}  // namespace detail

// Supervised loss from head scores: [B×K] for classification kinds,
// [B*T×K] for tagging. Classification: mean CE over examples. Tagging: mean
// CE over first pieces of words. Multi-label: mean binary CE over all B*K
// outputs.
template <typename T>
BasicTensor<T> supervised_loss_from_logits(const TaskSpec& task, const BasicTensor<T>& logits,
                                           const Batch& batch,
                                           std::span<const text::Label* const> labels) {
  if (labels.size() != batch.size) throw ObjectiveError("label count does not match batch");
  const int k = task.num_classes;
  switch (task.kind) {
    case TaskKind::kTokenTagging: {
      std::vector<int> targets;
      for (std::size_t b = 0; b < batch.size; ++b) {
        const auto& tags = detail::tags_of(*labels[b]);
        if (tags.size() != batch.word_positions(b).size()) {
          throw DataError("tag count does not match the number of words");
        }
        targets.insert(targets.end(), tags.begin(), tags.end());
      }
      const auto rows = detail::word_rows(batch);
      if (rows.empty()) throw DataError("tagging batch has no words");
      const auto selected = ops::gather_rows(logits, std::span<const std::size_t>(rows));
      return ops::nll_loss(ops::log_softmax(selected), std::span<const int>(targets));
    }
    case TaskKind::kMultiLabelClassification: {
      std::vector<float> targets(batch.size * static_cast<std::size_t>(k), 0.0f);
      for (std::size_t b = 0; b < batch.size; ++b) {
        const auto* set = std::get_if<text::LabelSet>(labels[b]);
        if (set == nullptr) throw DataError("multi-label task needs a label set");
        for (const int id : set->ids) {
          if (id < 0 || id >= k) throw DataError("label " + std::to_string(id) + " out of range");
          targets[b * static_cast<std::size_t>(k) + static_cast<std::size_t>(id)] = 1.0f;
        }
      }
      return ops::bce_with_logits(logits, std::span<const float>(targets));
    }
    default: {
      std::vector<int> targets;
      for (std::size_t b = 0; b < batch.size; ++b) {
        const auto* c = std::get_if<text::ClassLabel>(labels[b]);
        if (c == nullptr) throw DataError("classification task needs a class label");
        targets.push_back(c->id);
      }
      return ops::nll_loss(ops::log_softmax(logits), std::span<const int>(targets));
    }
  }
}

template <typename T>
BasicTensor<T> supervised_loss(const BasicModel<T>& model, const TaskSpec& task,
                               std::span<const LabeledExample* const> examples,
                               Rng* dropout_rng = nullptr) {
  if (examples.empty()) throw ObjectiveError("supervised_loss: empty batch");
  const auto ex = detail::examples_of(examples);
  const auto batch = model::make_batch(std::span<const text::Example* const>(ex));
  std::vector<const text::Label*> labels;
  for (const auto* e : examples) labels.push_back(&e->label);
  const auto logits = model.head_forward(model::head_for(task.kind), model.encode(batch, dropout_rng));
  return supervised_loss_from_logits(task, logits, batch,
                                     std::span<const text::Label* const>(labels));
}

// Teacher outputs for unlabeled examples. Per example: a distribution over K
// classes (classification), K independent probabilities (multi-label), or
// num_words × K row distributions (tagging), stored flat.
struct PseudoLabeledSet {
  TaskKind kind = TaskKind::kSingleSentenceClassification;
  int num_classes = 2;
  std::vector<text::Example> examples;
  std::vector<std::vector<float>> distributions;
  std::string labeler_id;

  std::size_t size() const { return examples.size(); }

  // Checks non-negativity, sums (softmax tasks), and sizes.
  void validate() const {
    if (distributions.size() != examples.size()) {
      throw DistributionError("pseudo labels: one distribution per example required");
    }
    const auto k = static_cast<std::size_t>(num_classes);
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto& d = distributions[i];
      const std::size_t rows = kind == TaskKind::kTokenTagging ? examples[i].num_words() : 1;
      if (d.size() != rows * k) throw DistributionError("pseudo labels: wrong distribution size");
      for (const float v : d) {
        if (!(v >= 0.0f && v <= 1.0f)) throw DistributionError("pseudo labels: value outside [0,1]");
      }
      if (kind == TaskKind::kMultiLabelClassification) continue;
      for (std::size_t r = 0; r < rows; ++r) {
        double total = 0.0;
        for (std::size_t j = 0; j < k; ++j) total += d[r * k + j];
        if (std::abs(total - 1.0) > 1e-5) {
          throw DistributionError("pseudo labels: distribution sums to " + std::to_string(total));
        }
      }
    }
  }
};

// Mean KL(teacher ‖ student) from student head scores. The teacher
// distributions are constants. Classification: mean over examples; tagging:
// mean over word-start positions; multi-label: mean Bernoulli KL over B*K.
template <typename T>
BasicTensor<T> distillation_loss_from_logits(TaskKind kind, int num_classes,
                                             const BasicTensor<T>& logits, const Batch& batch,
                                             std::span<const std::vector<float>* const> dists) {
  if (dists.size() != batch.size) throw ObjectiveError("distribution count does not match batch");
  const auto k = static_cast<std::size_t>(num_classes);
  std::vector<float> flat;
  for (const auto* d : dists) flat.insert(flat.end(), d->begin(), d->end());
  if (kind == TaskKind::kMultiLabelClassification) {
    return ops::bernoulli_kl_with_logits(std::span<const float>(flat), logits);
  }
  BasicTensor<T> student = logits;
  if (kind == TaskKind::kTokenTagging) {
    const auto rows = detail::word_rows(batch);
    if (rows.empty()) throw DataError("tagging batch has no words");
    student = ops::gather_rows(logits, std::span<const std::size_t>(rows));
  }
  if (flat.size() != student.dim(0) * k) {
    throw DistributionError("teacher distributions do not match student outputs");
  }
  const auto teacher = BasicTensor<T>::from({student.dim(0), k},
                                            std::vector<T>(flat.begin(), flat.end()));
  return ops::kl_divergence(teacher, ops::log_softmax(student));
}

template <typename T>
struct StLossTerms {
  BasicTensor<T> ce;
  BasicTensor<T> kl;  // undefined when the pseudo batch is empty
  BasicTensor<T> total;
};

// Self-training loss: CE on labeled + lambda * KL(teacher ‖ student) on
// pseudo-labeled examples. An empty pseudo batch gives total == ce.
template <typename T>
StLossTerms<T> st_loss_terms(const BasicModel<T>& student, const TaskSpec& task,
                             std::span<const LabeledExample* const> labeled,
                             const PseudoLabeledSet& pseudo,
                             std::span<const std::size_t> pseudo_indices, double lambda = 1.0,
                             Rng* dropout_rng = nullptr) {
  if (pseudo.kind != task.kind || pseudo.num_classes != task.num_classes) {
    throw ObjectiveError("st_loss: pseudo labels are for a different task");
  }
  StLossTerms<T> terms;
  terms.ce = supervised_loss(student, task, labeled, dropout_rng);
  terms.total = terms.ce;
  if (pseudo_indices.empty()) return terms;
  std::vector<const text::Example*> ex;
  std::vector<const std::vector<float>*> dists;
  for (const std::size_t i : pseudo_indices) {
    if (i >= pseudo.size()) throw ObjectiveError("st_loss: pseudo index out of range");
    ex.push_back(&pseudo.examples[i]);
    dists.push_back(&pseudo.distributions[i]);
  }
  const auto batch = model::make_batch(std::span<const text::Example* const>(ex));
  const auto logits =
      student.head_forward(model::head_for(task.kind), student.encode(batch, dropout_rng));
  terms.kl = distillation_loss_from_logits(task.kind, task.num_classes, logits, batch,
                                           std::span<const std::vector<float>* const>(dists));
  terms.total = ops::add(terms.ce, ops::scale(terms.kl, static_cast<float>(lambda)));
  return terms;
}

template <typename T>
BasicTensor<T> st_loss(const BasicModel<T>& student, const TaskSpec& task,
                       std::span<const LabeledExample* const> labeled,
                       const PseudoLabeledSet& pseudo, std::span<const std::size_t> pseudo_indices,
                       double lambda = 1.0, Rng* dropout_rng = nullptr) {
  return st_loss_terms(student, task, labeled, pseudo, pseudo_indices, lambda, dropout_rng).total;
}

}  // namespace tfs::objectives
