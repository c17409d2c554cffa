#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tfs/error.hpp"
#include "tfs/evaluate.hpp"
#include "tfs/model/batch.hpp"
#include "tfs/model/checkpoint.hpp"
#include "tfs/model/encoder.hpp"
#include "tfs/objectives.hpp"
#include "tfs/optim.hpp"
#include "tfs/rng.hpp"
#include "tfs/text/dataset.hpp"

namespace tfs::protocols {

using model::HeadKind;
using model::Model;
using model::ModelCheckpoint;
using model::Provenance;
using objectives::PseudoLabeledSet;
using text::Example;
using text::LabeledExample;
using text::TaskSpec;

enum class Regime { kFT, kTAPT, kST, kSTTI, kTFS };

inline constexpr Regime kAllRegimes[] = {Regime::kFT, Regime::kTAPT, Regime::kST, Regime::kSTTI,
                                         Regime::kTFS};

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::kFT: return "FT";
    case Regime::kTAPT: return "TAPT";
    case Regime::kST: return "ST";
    case Regime::kSTTI: return "STTI";
    case Regime::kTFS: return "TFS";
  }
  return "?";
}

inline Regime regime_from_string(std::string_view s) {
  for (const Regime r : kAllRegimes) {
    if (to_string(r) == s) return r;
  }
  throw ConfigError("unknown regime '" + std::string(s) + "'");
}

struct RegimeConfig {
  Regime regime = Regime::kFT;
  TaskSpec task;
  int tapt_epochs = 3;
  int finetune_epochs = 10;
  int st_epochs_per_round = 3;
  int max_rounds = 3;
  std::size_t tapt_batch_size = 32;
  std::size_t finetune_batch_size = 16;
  std::size_t st_labeled_batch_size = 16;
  std::size_t st_pseudo_batch_size = 32;
  std::size_t eval_batch_size = 64;
  AdamConfig tapt_optimizer{5e-4};
  AdamConfig finetune_optimizer{1e-3};
  AdamConfig st_optimizer{1e-3};
  double clip_norm = 1.0;  // global gradient-norm clip; 0 disables
  double mask_prob = objectives::kDefaultMaskProb;
  double st_lambda = 1.0;
  // Epochs without dev improvement before finetuning stops (best epoch kept);
  // 0 trains for all epochs.
  int finetune_patience = 0;
  // Rounds without dev improvement before self-training stops.
  int round_patience = 1;
  std::uint64_t seed = 0;

  // Range checks for user-supplied configs. Protocol functions themselves
  // also accept 0 epochs / rounds as degenerate cases.
  void validate() const {
    task.validate();
    if (tapt_epochs < 1 || finetune_epochs < 1 || st_epochs_per_round < 1) {
      throw ConfigError("epochs must be >= 1");
    }
    if (max_rounds < 1) throw ConfigError("max_rounds must be >= 1");
    if (tapt_batch_size == 0 || finetune_batch_size == 0 || st_labeled_batch_size == 0 ||
        st_pseudo_batch_size == 0 || eval_batch_size == 0) {
      throw ConfigError("batch sizes must be positive");
    }
    for (const auto* a : {&tapt_optimizer, &finetune_optimizer, &st_optimizer}) {
      OptimizerState check(*a);
    }
    if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("mask_prob must be in (0,1)");
    if (!(st_lambda >= 0.0)) throw ConfigError("st_lambda must be >= 0");
    if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
    if (finetune_patience < 0 || round_patience < 1) {
      throw ConfigError("finetune_patience must be >= 0 and round_patience >= 1");
    }
  }
};

namespace detail {

inline Provenance child_of(const ModelCheckpoint& parent, std::string tag) {
  Provenance p;
  p.tag = std::move(tag);
  p.lineage = parent.provenance().lineage;
  p.lineage.push_back(parent.provenance().tag);
  p.parent_id = parent.id();
  return p;
}

// Ensures the head exists; records it as fresh in `prov` when attached here.
inline ModelCheckpoint attach_head(const ModelCheckpoint& ckpt, HeadKind kind, int classes,
                                   std::uint64_t seed, Provenance& prov) {
  if (ckpt.has_head(kind)) return model::with_head(ckpt, kind, classes, seed);
  prov.fresh_heads.push_back(model::to_string(kind));
  return model::with_head(ckpt, kind, classes, seed);
}

// Clips the global gradient norm, fills missing gradients with zeros, and
// applies one Adam step.
inline void optimizer_step(std::vector<Tensor>& params, OptimizerState& state, double clip_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.has_grad()) p.zero_grad();
    for (const float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (clip_norm > 0.0 && norm > clip_norm) {
    const auto factor = static_cast<float>(clip_norm / norm);
    for (auto& p : params) {
      for (float& g : p.mutable_grad()) g *= factor;
    }
  }
  adam_step(std::span<Tensor>(params), state);
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  rng.shuffle<std::size_t>(idx);
  return idx;
}

enum : std::uint64_t {
  kStreamShuffle = 1,
  kStreamDropout = 2,
  kStreamMask = 3,
  kStreamHead = 4,
  kStreamLabeled = 5,
};

}  // namespace detail

struct TaptResult {
  ModelCheckpoint checkpoint;
  std::vector<double> epoch_losses;  // mean MLM loss per epoch
};

// Continued MLM training on `corpus`. The input checkpoint is untouched.
inline TaptResult run_tapt(const ModelCheckpoint& init, const std::vector<Example>& corpus,
                           const RegimeConfig& config, std::uint64_t seed) {
  if (corpus.empty()) throw ProtocolError("run_tapt: empty corpus");
  Provenance prov = detail::child_of(init, "tapt");
  const auto start = detail::attach_head(init, HeadKind::kMlm, 0, seed, prov);
  Model m(start);
  auto params = m.parameters({HeadKind::kMlm});
  OptimizerState opt(config.tapt_optimizer);
  Rng shuffle_rng(derive_seed({seed, detail::kStreamShuffle}));
  Rng dropout_rng(derive_seed({seed, detail::kStreamDropout}));
  Rng mask_rng(derive_seed({seed, detail::kStreamMask}));
  std::vector<double> losses;
  for (int epoch = 0; epoch < config.tapt_epochs; ++epoch) {
    const auto order = detail::shuffled_indices(corpus.size(), shuffle_rng);
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t s = 0; s < order.size(); s += config.tapt_batch_size) {
      std::vector<const Example*> chunk;
      for (std::size_t i = s; i < std::min(order.size(), s + config.tapt_batch_size); ++i) {
        chunk.push_back(&corpus[order[i]]);
      }
      const auto batch = model::make_batch(std::span<const Example* const>(chunk));
      const auto masked = objectives::apply_dynamic_mask(batch, config.mask_prob, mask_rng);
      m.zero_grad();
      const auto loss = objectives::mlm_loss(m, masked, &dropout_rng);
      loss.backward();
      detail::optimizer_step(params, opt, config.clip_norm);
      total += loss.item();
      ++steps;
    }
    losses.push_back(total / static_cast<double>(steps));
  }
  return {m.snapshot(prov), losses};
}

struct FinetuneResult {
  ModelCheckpoint checkpoint;
  std::vector<double> epoch_losses;
  std::vector<double> dev_metrics;  // per epoch, when a dev set is given
  int best_epoch = 0;               // 1-based; 0 = no training
};

// Supervised training of the task head and encoder on D_l.
inline FinetuneResult run_finetune(const ModelCheckpoint& init,
                                   const std::vector<LabeledExample>& labeled,
                                   const TaskSpec& task, const RegimeConfig& config,
                                   std::uint64_t seed,
                                   const std::vector<LabeledExample>* dev = nullptr) {
  if (labeled.empty()) throw ProtocolError("run_finetune: empty labeled set");
  Provenance prov = detail::child_of(init, "finetuned");
  const auto head = model::head_for(task.kind);
  const auto start = detail::attach_head(init, head, task.num_classes,
                                         derive_seed({seed, detail::kStreamHead}), prov);
  Model m(start);
  auto params = m.parameters({head});
  OptimizerState opt(config.finetune_optimizer);
  Rng shuffle_rng(derive_seed({seed, detail::kStreamShuffle}));
  Rng dropout_rng(derive_seed({seed, detail::kStreamDropout}));
  FinetuneResult result{m.snapshot(prov), {}, {}, 0};
  double best = -std::numeric_limits<double>::infinity();
  int since_best = 0;
  for (int epoch = 1; epoch <= config.finetune_epochs; ++epoch) {
    const auto order = detail::shuffled_indices(labeled.size(), shuffle_rng);
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t s = 0; s < order.size(); s += config.finetune_batch_size) {
      std::vector<const LabeledExample*> chunk;
      for (std::size_t i = s; i < std::min(order.size(), s + config.finetune_batch_size); ++i) {
        chunk.push_back(&labeled[order[i]]);
      }
      m.zero_grad();
      const auto loss = objectives::supervised_loss(
          m, task, std::span<const LabeledExample* const>(chunk), &dropout_rng);
      loss.backward();
      detail::optimizer_step(params, opt, config.clip_norm);
      total += loss.item();
      ++steps;
    }
    result.epoch_losses.push_back(total / static_cast<double>(steps));
    if (dev != nullptr && config.finetune_patience > 0) {
      const double metric = evaluate(m, task, *dev, config.eval_batch_size);
      result.dev_metrics.push_back(metric);
      if (metric > best) {
        best = metric;
        since_best = 0;
        result.best_epoch = epoch;
        result.checkpoint = m.snapshot(prov);
      } else if (++since_best >= config.finetune_patience) {
        break;
      }
    } else {
      result.best_epoch = epoch;
    }
  }
  if (dev == nullptr || config.finetune_patience == 0) result.checkpoint = m.snapshot(prov);
  return result;
}

// Teacher predictions on D_u in inference mode, regenerated from scratch on
// every call.
inline PseudoLabeledSet generate_pseudo_labels(const ModelCheckpoint& teacher,
                                               const std::vector<Example>& unlabeled,
                                               const TaskSpec& task,
                                               std::size_t batch_size = 64) {
  const auto head = model::head_for(task.kind);
  if (!teacher.has_head(head)) {
    throw ProtocolError("generate_pseudo_labels: teacher has no " + model::to_string(head) +
                        " head");
  }
  if (teacher.head_classes(head) != task.num_classes) {
    throw ProtocolError("generate_pseudo_labels: teacher head has the wrong class count");
  }
  PseudoLabeledSet out;
  out.kind = task.kind;
  out.num_classes = task.num_classes;
  out.examples = unlabeled;
  out.labeler_id = teacher.id();
  std::vector<const Example*> ptrs;
  for (const auto& e : unlabeled) ptrs.push_back(&e);
  out.distributions = predict_probabilities(Model(teacher), task, ptrs, batch_size);
  // Renormalize softmax rows in double so each sums to 1 despite rounding.
  if (task.kind != text::TaskKind::kMultiLabelClassification) {
    const auto k = static_cast<std::size_t>(task.num_classes);
    for (auto& d : out.distributions) {
      for (std::size_t r = 0; r < d.size(); r += k) {
        double total = 0.0;
        for (std::size_t j = 0; j < k; ++j) total += d[r + j];
        for (std::size_t j = 0; j < k; ++j) d[r + j] = static_cast<float>(d[r + j] / total);
      }
    }
  }
  out.validate();
  return out;
}

// Fraction of hard decisions shared by two pseudo-label sets over the same
// examples.
inline double pseudo_label_agreement(const PseudoLabeledSet& a, const PseudoLabeledSet& b,
                                     const TaskSpec& task) {
  if (a.size() != b.size()) throw ProtocolError("agreement: sets differ in size");
  std::size_t same = 0, total = 0;
  const auto k = static_cast<std::size_t>(task.num_classes);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (task.kind == text::TaskKind::kMultiLabelClassification) {
      for (std::size_t j = 0; j < k; ++j) {
        same += (a.distributions[i][j] >= kMultiLabelThreshold) ==
                (b.distributions[i][j] >= kMultiLabelThreshold);
        ++total;
      }
    } else {
      const auto da = decide(a.distributions[i], task), db = decide(b.distributions[i], task);
      for (std::size_t j = 0; j < da.size(); ++j) same += da[j] == db[j];
      total += da.size();
    }
  }
  return total == 0 ? 1.0 : static_cast<double>(same) / static_cast<double>(total);
}

struct RoundLog {
  int round = 0;
  std::string teacher_id;
  std::string teacher_id_after;  // teacher re-hashed after student training
  std::string student_id;
  std::string student_init_id;
  std::optional<double> agreement;   // with the previous round's pseudo labels
  std::optional<double> dev_metric;
  std::vector<double> train_losses;  // mean st_loss per epoch
};

struct SelfTrainingResult {
  ModelCheckpoint student;
  std::vector<RoundLog> rounds;
  std::vector<ModelCheckpoint> students;  // one per completed round
  int selected_round = 0;
};

// Algorithm: pseudo-label D_u with the teacher, train a student on st_loss,
// promote the student to teacher; repeat up to max_rounds or until the dev
// metric stops improving. Round 1 starts from `student_init`; later rounds
// start from the previous student (encoder and head). Returns the best
// student by dev metric (the last one without a dev set).
inline SelfTrainingResult run_self_training(const ModelCheckpoint& teacher,
                                            const ModelCheckpoint& student_init,
                                            const std::vector<LabeledExample>& labeled,
                                            const std::vector<Example>& unlabeled,
                                            const TaskSpec& task, const RegimeConfig& config,
                                            std::uint64_t seed,
                                            const std::vector<LabeledExample>* dev = nullptr) {
  if (unlabeled.empty()) throw ProtocolError("run_self_training: empty unlabeled set");
  if (labeled.empty()) throw ProtocolError("run_self_training: empty labeled set");
  const auto head = model::head_for(task.kind);
  if (!teacher.has_head(head)) throw ProtocolError("run_self_training: teacher is not finetuned");
  SelfTrainingResult result{teacher, {}, {}, 0};
  ModelCheckpoint current_teacher = teacher;
  std::optional<PseudoLabeledSet> previous;
  std::optional<double> best_dev;
  int since_best = 0;
  for (int round = 1; round <= config.max_rounds; ++round) {
    const std::uint64_t round_seed = derive_seed({seed, static_cast<std::uint64_t>(round)});
    auto pseudo = generate_pseudo_labels(current_teacher, unlabeled, task, config.eval_batch_size);
    RoundLog log;
    log.round = round;
    log.teacher_id = current_teacher.id();
    if (previous) log.agreement = pseudo_label_agreement(*previous, pseudo, task);

    const ModelCheckpoint& init = round == 1 ? student_init : current_teacher;
    Provenance prov = detail::child_of(init, "student_round_" + std::to_string(round));
    // Lineage follows the labeling chain (teacher's lineage, then the
    // teacher); parent_id still names the checkpoint the weights start from.
    prov.lineage = current_teacher.provenance().lineage;
    prov.lineage.push_back(current_teacher.provenance().tag);
    prov.labeler_id = current_teacher.id();
    prov.labeler_tag = current_teacher.provenance().tag;
    const auto start = detail::attach_head(
        init, head, task.num_classes, derive_seed({round_seed, detail::kStreamHead}), prov);
    log.student_init_id = start.id();
    Model student(start);
    auto params = student.parameters({head});
    OptimizerState opt(config.st_optimizer);
    Rng shuffle_rng(derive_seed({round_seed, detail::kStreamShuffle}));
    Rng labeled_rng(derive_seed({round_seed, detail::kStreamLabeled}));
    Rng dropout_rng(derive_seed({round_seed, detail::kStreamDropout}));
    std::vector<std::size_t> labeled_order;
    std::size_t labeled_cursor = 0;
    for (int epoch = 0; epoch < config.st_epochs_per_round; ++epoch) {
      const auto order = detail::shuffled_indices(pseudo.size(), shuffle_rng);
      double total = 0.0;
      std::size_t steps = 0;
      for (std::size_t s = 0; s < order.size(); s += config.st_pseudo_batch_size) {
        const std::vector<std::size_t> pseudo_idx(
            order.begin() + static_cast<std::ptrdiff_t>(s),
            order.begin() + static_cast<std::ptrdiff_t>(
                                std::min(order.size(), s + config.st_pseudo_batch_size)));
        // Labeled batches cycle through reshuffled passes over D_l.
        std::vector<const LabeledExample*> lab;
        while (lab.size() < std::min(config.st_labeled_batch_size, labeled.size())) {
          if (labeled_cursor == labeled_order.size()) {
            labeled_order = detail::shuffled_indices(labeled.size(), labeled_rng);
            labeled_cursor = 0;
          }
          lab.push_back(&labeled[labeled_order[labeled_cursor++]]);
        }
        student.zero_grad();
        const auto loss = objectives::st_loss(student, task,
                                              std::span<const LabeledExample* const>(lab), pseudo,
                                              std::span<const std::size_t>(pseudo_idx),
                                              config.st_lambda, &dropout_rng);
        loss.backward();
        detail::optimizer_step(params, opt, config.clip_norm);
        total += loss.item();
        ++steps;
      }
      log.train_losses.push_back(total / static_cast<double>(steps));
    }
    auto trained = student.snapshot(prov);
    log.student_id = trained.id();
    log.teacher_id_after = current_teacher.id();
    if (dev != nullptr) log.dev_metric = evaluate(student, task, *dev, config.eval_batch_size);
    result.rounds.push_back(log);
    result.students.push_back(trained);

    bool improved = true;
    if (dev != nullptr) {
      improved = !best_dev || *log.dev_metric > *best_dev;
      if (improved) best_dev = log.dev_metric;
    }
    if (improved) {
      result.student = trained;
      result.selected_round = round;
      since_best = 0;
    } else {
      ++since_best;
    }
    current_teacher = std::move(trained);
    previous = std::move(pseudo);
    if (since_best >= config.round_patience) break;
  }
  return result;
}

// Datasets for one run. Dev may be empty, in which case no dev-based
// selection or early stopping happens.
struct RunData {
  const std::vector<LabeledExample>* labeled = nullptr;
  const std::vector<Example>* unlabeled = nullptr;
  const std::vector<LabeledExample>* dev = nullptr;
  const std::vector<LabeledExample>* test = nullptr;
};

// Checkpoints shared between regimes. `random_init` must be set; the others
// are filled on first use. FT and TAPT results double as the ST/STTI and TFS
// teachers, so a cache shared across the five regimes of one
// (ratio, split, seed) trains each phase once.
struct RegimeCache {
  std::optional<ModelCheckpoint> random_init;
  std::optional<ModelCheckpoint> tapt;
  std::optional<ModelCheckpoint> ft_model;
  std::optional<ModelCheckpoint> tapt_ft_model;
  std::optional<TaptResult> tapt_log;
  std::optional<FinetuneResult> ft_log;
  std::optional<FinetuneResult> tapt_ft_log;
};

struct RunResult {
  Regime regime = Regime::kFT;
  std::string metric;
  double dev_metric = std::numeric_limits<double>::quiet_NaN();
  double test_metric = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;
  std::string checkpoint_id;
  Provenance provenance;
  std::string teacher_id;       // self-training regimes
  std::string student_init_id;  // self-training regimes
  std::string init_tag;         // tag of the checkpoint training started from
  std::string pseudo_labeler;   // "FT" or "TAPT" for self-training regimes
  std::vector<RoundLog> rounds;
  int selected_round = 0;
  std::vector<nlohmann::json> phases;  // run log records
  std::optional<ModelCheckpoint> checkpoint;
};

// Seed for one regime's own training phase given the run's base seed.
inline std::uint64_t regime_seed(std::uint64_t base, Regime r) {
  return derive_seed({base, 0x7265676dULL, static_cast<std::uint64_t>(r)});
}

inline nlohmann::json round_json(const RoundLog& r) {
  nlohmann::json j = {{"phase", "self_training_round"},
                      {"round", r.round},
                      {"teacher_id", r.teacher_id},
                      {"teacher_id_after", r.teacher_id_after},
                      {"student_init_id", r.student_init_id},
                      {"student_id", r.student_id},
                      {"train_losses", r.train_losses}};
  j["agreement"] = r.agreement ? nlohmann::json(*r.agreement) : nlohmann::json(nullptr);
  j["dev_metric"] = r.dev_metric ? nlohmann::json(*r.dev_metric) : nlohmann::json(nullptr);
  return j;
}

namespace detail {

inline std::vector<Example> tapt_corpus(const RunData& data) {
  std::vector<Example> corpus;
  for (const auto& l : *data.labeled) corpus.push_back(l.example);
  corpus.insert(corpus.end(), data.unlabeled->begin(), data.unlabeled->end());
  return corpus;
}

inline const ModelCheckpoint& ensure_tapt(RegimeCache& cache, const RunData& data,
                                          const RegimeConfig& config) {
  if (!cache.tapt) {
    auto r = run_tapt(*cache.random_init, tapt_corpus(data), config,
                      derive_seed({config.seed, 0x74617074ULL}));
    cache.tapt = r.checkpoint;
    cache.tapt_log = std::move(r);
  }
  return *cache.tapt;
}

inline const ModelCheckpoint& ensure_ft(RegimeCache& cache, const RunData& data,
                                        const RegimeConfig& config) {
  if (!cache.ft_model) {
    auto r = run_finetune(*cache.random_init, *data.labeled, config.task, config,
                          regime_seed(config.seed, Regime::kFT), data.dev);
    cache.ft_model = r.checkpoint;
    cache.ft_log = std::move(r);
  }
  return *cache.ft_model;
}

inline const ModelCheckpoint& ensure_tapt_ft(RegimeCache& cache, const RunData& data,
                                             const RegimeConfig& config) {
  if (!cache.tapt_ft_model) {
    const auto& tapt = ensure_tapt(cache, data, config);
    auto r = run_finetune(tapt, *data.labeled, config.task, config,
                          regime_seed(config.seed, Regime::kTAPT), data.dev);
    cache.tapt_ft_model = r.checkpoint;
    cache.tapt_ft_log = std::move(r);
  }
  return *cache.tapt_ft_model;
}

inline nlohmann::json finetune_json(const FinetuneResult& r, const char* init) {
  return {{"phase", "finetune"},
          {"init", init},
          {"checkpoint_id", r.checkpoint.id()},
          {"epoch_losses", r.epoch_losses},
          {"dev_metrics", r.dev_metrics},
          {"best_epoch", r.best_epoch}};
}

}  // namespace detail

// Dispatches one regime:
//   FT   finetune(random_init)
//   TAPT finetune(tapt(random_init))
//   ST   self-train: teacher FT, round-1 student from random_init
//   STTI self-train: teacher FT, round-1 student from tapt
//   TFS  self-train: teacher TAPT-finetuned, round-1 student from tapt
// config.seed is the run's base seed; teacher phases reuse the FT / TAPT
// regime seeds so that teachers equal those regimes' checkpoints.
inline RunResult run_regime(Regime regime, const RunData& data, const RegimeConfig& config,
                            RegimeCache& cache) {
  if (!cache.random_init) throw ProtocolError("run_regime: no random_init checkpoint");
  if (data.labeled == nullptr || data.unlabeled == nullptr) {
    throw ProtocolError("run_regime: labeled and unlabeled sets are required");
  }
  const auto& task = config.task;
  const auto* dev = data.dev != nullptr && !data.dev->empty() ? data.dev : nullptr;
  RunData d = data;
  d.dev = dev;
  RunResult result;
  result.regime = regime;
  result.metric = std::string(text::to_string(task.metric));
  result.seed = regime_seed(config.seed, regime);
  std::optional<ModelCheckpoint> final_ckpt;
  const auto record_tapt = [&] {
    const auto& tapt = detail::ensure_tapt(cache, d, config);
    result.phases.push_back({{"phase", "tapt"},
                             {"checkpoint_id", tapt.id()},
                             {"epoch_losses", cache.tapt_log ? cache.tapt_log->epoch_losses
                                                             : std::vector<double>{}}});
    return tapt;
  };
  switch (regime) {
    case Regime::kFT: {
      result.init_tag = cache.random_init->provenance().tag;
      final_ckpt = detail::ensure_ft(cache, d, config);
      result.phases.push_back(detail::finetune_json(*cache.ft_log, "random_init"));
      break;
    }
    case Regime::kTAPT: {
      result.init_tag = record_tapt().provenance().tag;
      final_ckpt = detail::ensure_tapt_ft(cache, d, config);
      result.phases.push_back(detail::finetune_json(*cache.tapt_ft_log, "tapt"));
      break;
    }
    case Regime::kST:
    case Regime::kSTTI:
    case Regime::kTFS: {
      const bool tapt_teacher = regime == Regime::kTFS;
      const bool tapt_student = regime != Regime::kST;
      std::optional<ModelCheckpoint> tapt;
      if (tapt_teacher || tapt_student) tapt = record_tapt();
      const ModelCheckpoint teacher =
          tapt_teacher ? detail::ensure_tapt_ft(cache, d, config) : detail::ensure_ft(cache, d, config);
      result.phases.push_back(tapt_teacher ? detail::finetune_json(*cache.tapt_ft_log, "tapt")
                                           : detail::finetune_json(*cache.ft_log, "random_init"));
      const ModelCheckpoint& student_init = tapt_student ? *tapt : *cache.random_init;
      result.teacher_id = teacher.id();
      result.student_init_id = student_init.id();
      result.init_tag = student_init.provenance().tag;
      const auto& tl = teacher.provenance().lineage;
      result.pseudo_labeler = std::find(tl.begin(), tl.end(), "tapt") != tl.end() ? "TAPT" : "FT";
      if (config.max_rounds <= 0) {
        final_ckpt = teacher;
        break;
      }
      auto st = run_self_training(teacher, student_init, *d.labeled, *d.unlabeled, task, config,
                                  result.seed, dev);
      for (const auto& r : st.rounds) result.phases.push_back(round_json(r));
      result.rounds = std::move(st.rounds);
      result.selected_round = st.selected_round;
      final_ckpt = std::move(st.student);
      break;
    }
  }
  result.checkpoint_id = final_ckpt->id();
  result.provenance = final_ckpt->provenance();
  const Model m(*final_ckpt);
  if (dev != nullptr) result.dev_metric = evaluate(m, task, *dev, config.eval_batch_size);
  if (data.test != nullptr && !data.test->empty()) {
    result.test_metric = evaluate(m, task, *data.test, config.eval_batch_size);
  }
  result.checkpoint = std::move(final_ckpt);
  return result;
}

}  // namespace tfs::protocols
