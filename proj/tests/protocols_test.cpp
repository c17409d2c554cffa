#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "tfs/protocols.hpp"
#include "tfs/text/split.hpp"
#include "tfs/text/synthetic.hpp"

namespace tfs::protocols {
namespace {

using model::EncoderConfig;
using text::LabeledExample;

struct Fixture {
  std::vector<LabeledExample> labeled;
  std::vector<Example> unlabeled;
  std::vector<LabeledExample> dev;
  std::vector<LabeledExample> test;
  std::optional<ModelCheckpoint> init_ckpt;
  const ModelCheckpoint& init() const { return *init_ckpt; }
  RegimeConfig config;
};

Fixture make_fixture(double noise = 0.0, std::uint64_t seed = 1) {
  text::SyntheticSpec spec;
  spec.vocab_size = 40;
  spec.num_examples = 160;
  spec.min_length = 4;
  spec.max_length = 6;
  spec.signal_words_per_class = 5;
  spec.signal_per_example = 2;
  spec.noise_rate = noise;
  spec.seed = seed;
  const auto corpus = text::generate_synthetic_corpus(spec);
  const auto vocab = text::synthetic_vocabulary(spec);
  const auto all = text::synthetic_examples(corpus, vocab);
  const std::vector<LabeledExample> train(all.begin(), all.begin() + 120);
  const auto split = text::sample_split(train, 0.2, seed);
  Fixture f;
  f.labeled = split.labeled;
  f.unlabeled = split.unlabeled;
  f.dev.assign(all.begin() + 120, all.begin() + 140);
  f.test.assign(all.begin() + 140, all.end());
  EncoderConfig c;
  c.vocab_size = vocab.size();
  c.hidden = 16;
  c.layers = 1;
  c.heads = 2;
  c.ff = 16;
  c.max_positions = 16;
  f.init_ckpt = model::init_model(c, {}, seed);
  f.config.task = text::TaskSpec::make(text::TaskKind::kSingleSentenceClassification, 2);
  f.config.tapt_epochs = 2;
  f.config.finetune_epochs = 4;
  f.config.st_epochs_per_round = 1;
  f.config.max_rounds = 3;
  f.config.round_patience = 3;  // run every round unless noted
  f.config.seed = 99;
  return f;
}

std::vector<Example> texts(const Fixture& f) {
  std::vector<Example> out;
  for (const auto& l : f.labeled) out.push_back(l.example);
  out.insert(out.end(), f.unlabeled.begin(), f.unlabeled.end());
  return out;
}

TEST(Tapt, ZeroEpochsKeepsEncoder) {
  auto f = make_fixture();
  f.config.tapt_epochs = 0;
  const auto r = run_tapt(f.init(), texts(f), f.config, 1);
  EXPECT_TRUE(r.checkpoint.same_encoder(f.init()));
  EXPECT_TRUE(r.checkpoint.has_head(HeadKind::kMlm));
  EXPECT_TRUE(r.epoch_losses.empty());
}

TEST(Tapt, LossDecreasesAndLineage) {
  auto f = make_fixture();
  f.config.tapt_epochs = 6;
  f.config.tapt_optimizer.lr = 3e-3;
  const auto r = run_tapt(f.init(), texts(f), f.config, 1);
  ASSERT_EQ(r.epoch_losses.size(), 6U);
  EXPECT_LT(r.epoch_losses.back(), r.epoch_losses.front());
  EXPECT_FALSE(r.checkpoint.same_encoder(f.init()));
  EXPECT_EQ(r.checkpoint.provenance().tag, "tapt");
  EXPECT_EQ(r.checkpoint.provenance().lineage, std::vector<std::string>{"random_init"});
  EXPECT_EQ(r.checkpoint.provenance().parent_id, f.init().id());
}

TEST(Tapt, Deterministic) {
  const auto f = make_fixture();
  const auto a = run_tapt(f.init(), texts(f), f.config, 5);
  const auto b = run_tapt(f.init(), texts(f), f.config, 5);
  EXPECT_TRUE(a.checkpoint.same_parameters(b.checkpoint));
  EXPECT_EQ(a.checkpoint.id(), b.checkpoint.id());
  EXPECT_EQ(a.epoch_losses, b.epoch_losses);
  const auto c = run_tapt(f.init(), texts(f), f.config, 6);
  EXPECT_NE(a.checkpoint.id(), c.checkpoint.id());
}

TEST(Tapt, EmptyCorpusRejected) {
  const auto f = make_fixture();
  EXPECT_THROW(run_tapt(f.init(), {}, f.config, 1), ProtocolError);
}

TEST(Finetune, FitsNoiselessLabeledSet) {
  auto f = make_fixture();
  f.config.finetune_epochs = 30;
  f.config.finetune_optimizer.lr = 3e-3;
  const auto r = run_finetune(f.init(), f.labeled, f.config.task, f.config, 3);
  EXPECT_EQ(evaluate(r.checkpoint, f.config.task, f.labeled), 1.0);
  EXPECT_EQ(r.checkpoint.provenance().tag, "finetuned");
  EXPECT_EQ(r.checkpoint.provenance().fresh_heads,
            std::vector<std::string>{"single_sentence_classification"});
}

TEST(Finetune, ZeroEpochsAddsOnlyAHead) {
  auto f = make_fixture();
  f.config.finetune_epochs = 0;
  const auto r = run_finetune(f.init(), f.labeled, f.config.task, f.config, 3);
  EXPECT_TRUE(r.checkpoint.same_encoder(f.init()));
  EXPECT_TRUE(r.checkpoint.has_head(HeadKind::kSingleSentenceClassification));
  EXPECT_EQ(r.best_epoch, 0);
}

TEST(Finetune, EarlyStoppingKeepsBestEpoch) {
  auto f = make_fixture(0.2);
  f.config.finetune_epochs = 12;
  f.config.finetune_patience = 2;
  const auto r = run_finetune(f.init(), f.labeled, f.config.task, f.config, 3, &f.dev);
  ASSERT_FALSE(r.dev_metrics.empty());
  const double best = *std::max_element(r.dev_metrics.begin(), r.dev_metrics.end());
  EXPECT_EQ(r.dev_metrics[static_cast<std::size_t>(r.best_epoch - 1)], best);
  EXPECT_EQ(evaluate(r.checkpoint, f.config.task, f.dev), best);
}

TEST(PseudoLabels, DistributionsAndCoverage) {
  const auto f = make_fixture();
  const auto teacher = run_finetune(f.init(), f.labeled, f.config.task, f.config, 3).checkpoint;
  const auto p = generate_pseudo_labels(teacher, f.unlabeled, f.config.task);
  ASSERT_EQ(p.size(), f.unlabeled.size());
  EXPECT_EQ(p.labeler_id, teacher.id());
  for (const auto& d : p.distributions) {
    ASSERT_EQ(d.size(), 2U);
    EXPECT_NEAR(d[0] + d[1], 1.0, 1e-6);
  }
  const auto q = generate_pseudo_labels(teacher, f.unlabeled, f.config.task, 7);
  EXPECT_EQ(p.distributions, q.distributions);  // independent of batching and dropout
  EXPECT_THROW(generate_pseudo_labels(f.init(), f.unlabeled, f.config.task), ProtocolError);
}

TEST(SelfTraining, RoundStructure) {
  const auto f = make_fixture();
  const auto teacher = run_finetune(f.init(), f.labeled, f.config.task, f.config, 3).checkpoint;
  const auto teacher_copy = teacher;
  const auto st =
      run_self_training(teacher, f.init(), f.labeled, f.unlabeled, f.config.task, f.config, 4);
  ASSERT_EQ(st.rounds.size(), 3U);
  ASSERT_EQ(st.students.size(), 3U);
  EXPECT_TRUE(teacher.same_parameters(teacher_copy));
  EXPECT_EQ(st.rounds[0].teacher_id, teacher.id());
  EXPECT_EQ(st.rounds[0].student_init_id,
            model::with_head(f.init(), HeadKind::kSingleSentenceClassification, 2,
                             derive_seed({derive_seed({4, 1}), 4}))
                .id());
  for (std::size_t r = 0; r < st.rounds.size(); ++r) {
    EXPECT_EQ(st.rounds[r].round, static_cast<int>(r + 1));
    EXPECT_EQ(st.rounds[r].teacher_id, st.rounds[r].teacher_id_after);
    EXPECT_EQ(st.rounds[r].student_id, st.students[r].id());
    EXPECT_EQ(st.students[r].provenance().tag, "student_round_" + std::to_string(r + 1));
    EXPECT_EQ(st.students[r].provenance().labeler_id, st.rounds[r].teacher_id);
    if (r > 0) {
      EXPECT_EQ(st.rounds[r].teacher_id, st.rounds[r - 1].student_id);
      EXPECT_EQ(st.rounds[r].student_init_id, st.rounds[r - 1].student_id);
      ASSERT_TRUE(st.rounds[r].agreement.has_value());
    } else {
      EXPECT_FALSE(st.rounds[r].agreement.has_value());
    }
  }
  EXPECT_EQ(st.student.id(), st.students.back().id());
  EXPECT_EQ(st.selected_round, 3);
}

TEST(SelfTraining, StopsWhenDevStopsImproving) {
  auto f = make_fixture(0.1);
  f.config.round_patience = 1;
  const auto teacher = run_finetune(f.init(), f.labeled, f.config.task, f.config, 3).checkpoint;
  const auto st = run_self_training(teacher, f.init(), f.labeled, f.unlabeled, f.config.task,
                                    f.config, 4, &f.dev);
  ASSERT_FALSE(st.rounds.empty());
  for (std::size_t r = 1; r + 1 < st.rounds.size(); ++r) {
    EXPECT_GT(*st.rounds[r].dev_metric, *st.rounds[r - 1].dev_metric);
  }
  double best = -1;
  int best_round = 0;
  for (const auto& r : st.rounds) {
    if (*r.dev_metric > best) {
      best = *r.dev_metric;
      best_round = r.round;
    }
  }
  EXPECT_EQ(st.selected_round, best_round);
  EXPECT_EQ(st.student.id(), st.students[static_cast<std::size_t>(best_round - 1)].id());
}

RunData data_of(const Fixture& f) { return {&f.labeled, &f.unlabeled, &f.dev, &f.test}; }

TEST(Regimes, TfsLineage) {
  const auto f = make_fixture();
  RegimeCache cache;
  cache.random_init = f.init();
  const auto r = run_regime(Regime::kTFS, data_of(f), f.config, cache);
  const auto& lineage = r.provenance.lineage;
  ASSERT_GE(lineage.size(), 3U);
  EXPECT_EQ(lineage[0], "random_init");
  EXPECT_EQ(lineage[1], "tapt");
  EXPECT_EQ(lineage[2], "finetuned");
  for (std::size_t i = 3; i < lineage.size(); ++i) {
    EXPECT_EQ(lineage[i], "student_round_" + std::to_string(i - 2));
  }
  EXPECT_EQ(r.teacher_id, cache.tapt_ft_model->id());
  EXPECT_EQ(r.student_init_id, cache.tapt->id());
  EXPECT_GE(r.test_metric, 0.0);
  EXPECT_LE(r.test_metric, 1.0);
}

TEST(Regimes, DispatchUsesSharedTeachers) {
  const auto f = make_fixture();
  RegimeCache cache;
  cache.random_init = f.init();
  const auto ft = run_regime(Regime::kFT, data_of(f), f.config, cache);
  const auto tapt = run_regime(Regime::kTAPT, data_of(f), f.config, cache);
  const auto st = run_regime(Regime::kST, data_of(f), f.config, cache);
  const auto stti = run_regime(Regime::kSTTI, data_of(f), f.config, cache);
  const auto tfs = run_regime(Regime::kTFS, data_of(f), f.config, cache);
  EXPECT_EQ(st.teacher_id, ft.checkpoint_id);
  EXPECT_EQ(stti.teacher_id, ft.checkpoint_id);
  EXPECT_EQ(tfs.teacher_id, tapt.checkpoint_id);
  EXPECT_EQ(st.student_init_id, f.init().id());
  EXPECT_EQ(stti.student_init_id, cache.tapt->id());
  EXPECT_EQ(ft.provenance.lineage, std::vector<std::string>{"random_init"});
  EXPECT_EQ(tapt.provenance.lineage, (std::vector<std::string>{"random_init", "tapt"}));
}

TEST(Regimes, ZeroRoundsCollapse) {
  auto f = make_fixture();
  f.config.max_rounds = 0;
  RegimeCache cache;
  cache.random_init = f.init();
  const auto ft = run_regime(Regime::kFT, data_of(f), f.config, cache);
  const auto tapt = run_regime(Regime::kTAPT, data_of(f), f.config, cache);
  const auto st = run_regime(Regime::kST, data_of(f), f.config, cache);
  const auto tfs = run_regime(Regime::kTFS, data_of(f), f.config, cache);
  EXPECT_EQ(st.checkpoint_id, ft.checkpoint_id);
  EXPECT_EQ(tfs.checkpoint_id, tapt.checkpoint_id);
  EXPECT_EQ(st.test_metric, ft.test_metric);
  EXPECT_EQ(tfs.test_metric, tapt.test_metric);
}

TEST(Regimes, FreshCachesReproduceExactly) {
  const auto f = make_fixture(0.1);
  for (const Regime regime : kAllRegimes) {
    RegimeCache a, b;
    a.random_init = b.random_init = f.init();
    const auto ra = run_regime(regime, data_of(f), f.config, a);
    const auto rb = run_regime(regime, data_of(f), f.config, b);
    EXPECT_EQ(ra.checkpoint_id, rb.checkpoint_id) << to_string(regime);
    EXPECT_TRUE(ra.checkpoint->same_parameters(*rb.checkpoint)) << to_string(regime);
    EXPECT_EQ(ra.test_metric, rb.test_metric);
    EXPECT_EQ(ra.dev_metric, rb.dev_metric);
  }
}

TEST(Regimes, Names) {
  for (const Regime r : kAllRegimes) EXPECT_EQ(regime_from_string(to_string(r)), r);
  EXPECT_THROW(regime_from_string("BERT"), ConfigError);
}

TEST(Regimes, RequiresInitialCheckpoint) {
  const auto f = make_fixture();
  RegimeCache cache;
  EXPECT_THROW(run_regime(Regime::kFT, data_of(f), f.config, cache), ProtocolError);
}

TEST(RegimeConfig, Validation) {
  RegimeConfig c;
  EXPECT_NO_THROW(c.validate());
  c.max_rounds = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RegimeConfig{};
  c.mask_prob = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RegimeConfig{};
  c.st_optimizer.lr = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace tfs::protocols
