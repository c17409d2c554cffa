// Acceptance suite: one PASS/FAIL line per criterion.
//   acceptance_test            run everything
//   acceptance_test 3 5        run only criteria 3 and 5
//   --report <file>            also append the lines to <file>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tfs/gradcheck.hpp"
#include "tfs/harness.hpp"
#include "tfs/metrics.hpp"
#include "tfs/objectives.hpp"
#include "tfs/protocols.hpp"
#include "tfs/report.hpp"
#include "tfs/text/split.hpp"
#include "tfs/text/synthetic.hpp"

#ifndef TFS_SOURCE_DIR
#define TFS_SOURCE_DIR "."
#endif

namespace {

namespace fs = std::filesystem;
using namespace tfs;
using model::BasicModel;
using model::EncoderConfig;
using model::HeadKind;
using model::ModelCheckpoint;
using objectives::PseudoLabeledSet;
using protocols::Regime;
using text::ClassLabel;
using text::Example;
using text::LabeledExample;
using text::TaskKind;
using text::TaskSpec;
using text::TokenId;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      if (!pass) detail << "; ";
      pass = false;
      detail << what;
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Example make_ex(std::vector<TokenId> a, std::vector<std::uint8_t> starts = {}) {
  Example ex;
  ex.segment_a = std::move(a);
  ex.word_starts = starts.empty() ? std::vector<std::uint8_t>(ex.segment_a.size(), 1) : starts;
  return ex;
}

EncoderConfig small_config(std::size_t vocab) {
  EncoderConfig c;
  c.vocab_size = vocab;
  c.hidden = 8;
  c.layers = 2;
  c.heads = 2;
  c.ff = 8;
  c.max_positions = 8;
  c.dropout = 0.0f;
  return c;
}

// ---- 1: gradients ---------------------------------------------------------------

BasicModel<double> random_double_model(std::uint64_t seed,
                                       std::vector<std::pair<HeadKind, int>> heads) {
  BasicModel<double> m(model::init_model(small_config(8), heads, seed));
  Rng rng(seed + 100);
  for (std::size_t i = 0; i < m.names().size(); ++i) {
    auto& p = m.all_parameters()[i];
    const bool gain = m.names()[i].find(".gain") != std::string::npos;
    for (double& v : p.mutable_data()) v = (gain ? 1.0 : 0.0) + 0.3 * rng.normal();
  }
  return m;
}

std::vector<Example> random_examples(Rng& rng, std::size_t n) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = 2 + rng.below(3);
    std::vector<TokenId> ids;
    std::vector<std::uint8_t> starts;
    for (std::size_t t = 0; t < len; ++t) {
      ids.push_back(static_cast<TokenId>(text::kNumSpecial + rng.below(8 - text::kNumSpecial)));
      starts.push_back(t == 0 || rng.bernoulli(0.6) ? 1 : 0);
    }
    out.push_back(make_ex(ids, starts));
  }
  return out;
}

LabeledExample random_labeled(Rng& rng, const Example& ex, TaskKind kind, int k) {
  LabeledExample le{ex, ClassLabel{static_cast<int>(rng.below(static_cast<std::uint64_t>(k)))}};
  if (kind == TaskKind::kPairClassification) {
    le.example.is_pair = true;
    le.example.segment_b = {static_cast<TokenId>(text::kNumSpecial + rng.below(3))};
  } else if (kind == TaskKind::kTokenTagging) {
    std::vector<int> tags;
    for (std::size_t w = 0; w < ex.num_words(); ++w) {
      tags.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(k))));
    }
    le.label = text::TagSequence{tags};
  } else if (kind == TaskKind::kMultiLabelClassification) {
    std::vector<int> on;
    for (int c = 0; c < k; ++c) {
      if (rng.bernoulli(0.5)) on.push_back(c);
    }
    le.label = text::LabelSet{on};
  }
  return le;
}

PseudoLabeledSet random_pseudo(Rng& rng, TaskKind kind, int k) {
  PseudoLabeledSet p;
  p.kind = kind;
  p.num_classes = k;
  p.examples = random_examples(rng, 3);
  for (const auto& ex : p.examples) {
    const std::size_t rows = kind == TaskKind::kTokenTagging ? ex.num_words() : 1;
    std::vector<float> d;
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<double> w(static_cast<std::size_t>(k));
      double total = 0.0;
      for (auto& x : w) total += (x = rng.uniform() + 0.05);
      for (const double x : w) {
        d.push_back(static_cast<float>(kind == TaskKind::kMultiLabelClassification ? x / 1.1
                                                                                   : x / total));
      }
    }
    p.distributions.push_back(d);
  }
  p.validate();
  return p;
}

Outcome criterion_1() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t checks = 0;
  const auto run = [&](const std::string& name, BasicModel<double>& m,
                       const std::function<BasicTensor<double>()>& loss) {
    auto params = m.all_parameters();
    const auto r = finite_difference_check<double>(loss, std::span(params), 1e-5, 1e-4);
    worst = std::max(worst, r.max_relative_error);
    ++checks;
    o.check(r.max_relative_error < 1e-4,
            name + " relative error " + std::to_string(r.max_relative_error));
  };
  for (std::uint64_t draw = 0; draw < 5; ++draw) {
    auto m = random_double_model(draw, {{HeadKind::kMlm, 0}});
    Rng rng(draw);
    const auto masked =
        objectives::apply_dynamic_mask(model::make_batch(random_examples(rng, 3)), 0.3, rng);
    run("mlm_loss", m, [&] { return objectives::mlm_loss(m, masked); });
  }
  const std::vector<std::pair<TaskKind, int>> tasks = {
      {TaskKind::kSingleSentenceClassification, 3},
      {TaskKind::kPairClassification, 2},
      {TaskKind::kTokenTagging, 3},
      {TaskKind::kMultiLabelClassification, 3}};
  for (const auto& [kind, k] : tasks) {
    const auto task = TaskSpec::make(kind, k);
    for (std::uint64_t draw = 0; draw < 5; ++draw) {
      auto m = random_double_model(draw + 20, {{model::head_for(kind), k}});
      Rng rng(draw + 7);
      std::vector<LabeledExample> data;
      for (const auto& ex : random_examples(rng, 3)) data.push_back(random_labeled(rng, ex, kind, k));
      std::vector<const LabeledExample*> ptrs;
      for (const auto& d : data) ptrs.push_back(&d);
      const std::string kname(text::to_string(kind));
      run("supervised_loss/" + kname, m, [&] {
        return objectives::supervised_loss(m, task, std::span<const LabeledExample* const>(ptrs));
      });
      auto st_model = random_double_model(draw + 50, {{model::head_for(kind), k}});
      const auto pseudo = random_pseudo(rng, kind, k);
      const std::vector<std::size_t> idx = {0, 1, 2};
      run("st_loss/" + kname, st_model, [&] {
        return objectives::st_loss(st_model, task, std::span<const LabeledExample* const>(ptrs),
                                   pseudo, std::span<const std::size_t>(idx));
      });
    }
  }
  const double elapsed = seconds_since(t0);
  o.check(elapsed < 60.0, "runtime " + std::to_string(elapsed) + " s");
  o.detail << (o.pass ? "" : "; ") << checks << " checks, max rel err " << worst << ", "
           << elapsed << " s";
  return o;
}

// ---- 2: MLM loss semantics ----------------------------------------------------------

Outcome criterion_2() {
  Outcome o;
  // Zero token embeddings and output bias make the tied head score every
  // token 0, i.e. a uniform predictor over V = 50.
  model::Model m(model::init_model(small_config(50), {{HeadKind::kMlm, 0}}, 1));
  for (float& v : m.param("embeddings.token").mutable_data()) v = 0.0f;
  for (float& v : m.param(model::head_param_prefix(HeadKind::kMlm) + ".bias").mutable_data()) {
    v = 0.0f;
  }
  Rng rng(4);
  const std::vector<Example> exs = {make_ex({5, 6, 7, 8, 9, 10}), make_ex({11, 12, 13})};
  const auto masked = objectives::apply_dynamic_mask(model::make_batch(exs), 0.5, rng);
  const double uniform = objectives::mlm_loss(m, masked).item();
  o.check(std::abs(uniform - std::log(50.0)) < 1e-3,
          "uniform loss " + std::to_string(uniform));

  const std::size_t n = masked.batch.positions(), v = 50;
  std::vector<float> values(n * v);
  for (float& x : values) x = static_cast<float>(rng.normal());
  const float base = objectives::mlm_loss_from_logits(Tensor::from({n, v}, values), masked).item();
  std::size_t perturbed = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (masked.indicator[i]) continue;
    for (std::size_t j = 0; j < v; ++j) values[i * v + j] += 4.0f * static_cast<float>(rng.normal());
    ++perturbed;
  }
  const float after = objectives::mlm_loss_from_logits(Tensor::from({n, v}, values), masked).item();
  o.check(perturbed > 0 && after - base == 0.0f,
          "unmasked perturbation changed loss by " + std::to_string(after - base));
  o.detail << (o.pass ? "" : "; ") << "uniform " << uniform << " vs ln 50 " << std::log(50.0)
           << ", change " << (after - base) << " over " << perturbed << " unmasked rows";
  return o;
}

// ---- 3: self-training loss semantics ------------------------------------------------

Outcome criterion_3() {
  Outcome o;
  const auto task = TaskSpec::make(TaskKind::kSingleSentenceClassification, 3);
  model::Model student(
      model::init_model(small_config(20), {{HeadKind::kSingleSentenceClassification, 3}}, 9));
  Rng rng(10);
  for (float& w :
       student.param(model::head_param_prefix(HeadKind::kSingleSentenceClassification) + ".weight")
           .mutable_data()) {
    w = static_cast<float>(rng.normal());
  }
  const std::vector<LabeledExample> labeled = {{make_ex({5, 6}), ClassLabel{0}},
                                               {make_ex({7, 8, 9}), ClassLabel{2}}};
  std::vector<const LabeledExample*> ptrs;
  for (const auto& l : labeled) ptrs.push_back(&l);
  const std::span<const LabeledExample* const> lspan(ptrs);
  PseudoLabeledSet pseudo;
  pseudo.kind = task.kind;
  pseudo.num_classes = 3;
  pseudo.examples = {make_ex({10, 11}), make_ex({12}), make_ex({13, 14, 15})};
  const auto probs = ops::softmax(student.head_forward(
      HeadKind::kSingleSentenceClassification, student.encode(model::make_batch(pseudo.examples))));
  for (std::size_t i = 0; i < 3; ++i) {
    pseudo.distributions.emplace_back(probs.data().begin() + static_cast<std::ptrdiff_t>(3 * i),
                                      probs.data().begin() + static_cast<std::ptrdiff_t>(3 * i + 3));
  }
  const std::vector<std::size_t> all = {0, 1, 2};

  // (a) empty pseudo batch
  const double st = objectives::st_loss(student, task, lspan, pseudo, {}).item();
  const double ce = objectives::supervised_loss(student, task, lspan).item();
  o.check(std::abs(st - ce) < 1e-7, "(a) |st - ce| = " + std::to_string(std::abs(st - ce)));

  // (b) teacher distributions are the student's own outputs
  const double kl_same = objectives::st_loss_terms(student, task, lspan, pseudo, all).kl.item();
  o.check(std::abs(kl_same) < 1e-9, "(b) KL = " + std::to_string(kl_same));

  // (c) one-hot teacher: KL equals CE on the teacher's argmax
  const std::vector<int> cls = {2, 0, 1};
  std::vector<LabeledExample> argmax;
  pseudo.distributions.clear();
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<float> one_hot(3, 0.0f);
    one_hot[static_cast<std::size_t>(cls[i])] = 1.0f;
    pseudo.distributions.push_back(one_hot);
    argmax.push_back({pseudo.examples[i], ClassLabel{cls[i]}});
  }
  std::vector<const LabeledExample*> aptrs;
  for (const auto& l : argmax) aptrs.push_back(&l);
  const double kl_hot = objectives::st_loss_terms(student, task, lspan, pseudo, all).kl.item();
  const double ce_hot =
      objectives::supervised_loss(student, task, std::span<const LabeledExample* const>(aptrs))
          .item();
  o.check(std::abs(kl_hot - ce_hot) < 1e-6,
          "(c) |KL - CE| = " + std::to_string(std::abs(kl_hot - ce_hot)));
  o.detail << (o.pass ? "" : "; ") << "(a) " << std::abs(st - ce) << " (b) " << kl_same
           << " (c) " << std::abs(kl_hot - ce_hot);
  return o;
}

// ---- 4: masking statistics ---------------------------------------------------------

Outcome criterion_4() {
  Outcome o;
  Rng rng(1);
  std::vector<Example> exs;
  for (int i = 0; i < 48; ++i) {
    std::vector<TokenId> ids;
    for (int t = 0; t < 230 + i % 11; ++t) ids.push_back(static_cast<TokenId>(text::kNumSpecial + t % 40));
    exs.push_back(make_ex(ids));
  }
  // A short example pads the batch, so PAD positions are present too.
  exs.push_back(make_ex({7, 8}));
  const auto batch = model::make_batch(exs);
  std::size_t eligible = 0, specials = 0;
  for (std::size_t i = 0; i < batch.positions(); ++i) {
    eligible += !batch.special[i];
    specials += batch.special[i];
  }
  o.check(eligible >= 10000, "only " + std::to_string(eligible) + " eligible positions");

  std::size_t masked = 0, special_masked = 0;
  std::set<std::vector<std::uint8_t>> patterns;
  const int epochs = 100;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const auto m = objectives::apply_dynamic_mask(batch, 0.15, rng);
    for (std::size_t i = 0; i < batch.positions(); ++i) {
      if (!m.indicator[i]) continue;
      if (batch.special[i]) {
        ++special_masked;
      } else {
        ++masked;
      }
    }
    patterns.insert(m.indicator);
  }
  const double rate = static_cast<double>(masked) / static_cast<double>(eligible * epochs);
  o.check(rate >= 0.14 && rate <= 0.16, "mask rate " + std::to_string(rate));
  o.check(special_masked == 0, std::to_string(special_masked) + " CLS/SEP/PAD positions masked");
  o.check(patterns.size() == static_cast<std::size_t>(epochs),
          std::to_string(patterns.size()) + " distinct masks over " + std::to_string(epochs) +
              " epochs");
  o.detail << (o.pass ? "" : "; ") << "rate " << rate << " over " << eligible << " positions x "
           << epochs << " epochs, specials masked " << special_masked << " of " << specials << " x "
           << epochs << ", " << patterns.size() << "/" << epochs << " distinct masks";
  return o;
}

// ---- shared small synthetic setup for 5, 6, 10 ------------------------------------

struct SmallTask {
  std::vector<LabeledExample> labeled, dev, test;
  std::vector<Example> unlabeled;
  std::optional<ModelCheckpoint> init;
  protocols::RegimeConfig config;

  protocols::RunData data() const { return {&labeled, &unlabeled, &dev, &test}; }
};

SmallTask small_task(double noise, std::uint64_t seed, std::size_t n, double ratio) {
  text::SyntheticSpec spec;
  spec.vocab_size = 40;
  spec.num_examples = n;
  spec.min_length = 4;
  spec.max_length = 6;
  spec.signal_words_per_class = 5;
  spec.signal_per_example = 2;
  spec.noise_rate = noise;
  spec.seed = seed;
  const auto corpus = text::generate_synthetic_corpus(spec);
  const auto vocab = text::synthetic_vocabulary(spec);
  const auto all = text::synthetic_examples(corpus, vocab);
  const std::size_t n_train = n * 3 / 4, n_dev = n / 8;
  const std::vector<LabeledExample> train(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  const auto split = text::sample_split(train, ratio, seed);
  SmallTask t;
  t.labeled = split.labeled;
  t.unlabeled = split.unlabeled;
  t.dev.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
               all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
  t.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), all.end());
  EncoderConfig c;
  c.vocab_size = vocab.size();
  c.hidden = 16;
  c.layers = 1;
  c.heads = 2;
  c.ff = 16;
  c.max_positions = 16;
  t.init = model::init_model(c, {}, seed);
  t.config.task = TaskSpec::make(TaskKind::kSingleSentenceClassification, 2);
  t.config.tapt_epochs = 2;
  t.config.finetune_epochs = 4;
  t.config.st_epochs_per_round = 1;
  t.config.max_rounds = 3;
  t.config.seed = seed + 1000;
  return t;
}

// ---- 5: TFS structure ----------------------------------------------------------------

Outcome criterion_5() {
  Outcome o;
  auto t = small_task(0.1, 1, 160, 0.2);
  t.config.round_patience = 3;  // all three rounds
  protocols::RegimeCache cache;
  cache.random_init = *t.init;
  const auto r = protocols::run_regime(Regime::kTFS, t.data(), t.config, cache);
  // Ancestors plus the checkpoint's own tag.
  auto lineage = r.provenance.lineage;
  lineage.push_back(r.provenance.tag);
  std::vector<std::string> expected = {"random_init", "tapt", "finetuned"};
  for (int i = 1; i <= r.selected_round; ++i) expected.push_back("student_round_" + std::to_string(i));
  o.check(r.selected_round >= 1, "no student selected");
  o.check(lineage == expected, "lineage mismatch");
  o.check(r.rounds.size() >= 1 && r.rounds.size() <= 3,
          std::to_string(r.rounds.size()) + " rounds");
  o.check(r.teacher_id == cache.tapt_ft_model->id(), "first teacher is not the finetuned TAPT model");
  o.check(!r.rounds.empty() && r.rounds[0].teacher_id == cache.tapt_ft_model->id(),
          "round 1 teacher id");
  o.check(r.student_init_id == cache.tapt->id(), "student not initialized from TAPT");

  // Rerun the loop directly to inspect students and pseudo labels.
  const ModelCheckpoint teacher = *cache.tapt_ft_model;
  const ModelCheckpoint teacher_before = teacher;
  const auto st = protocols::run_self_training(teacher, *cache.tapt, t.labeled, t.unlabeled,
                                               t.config.task, t.config, 77);
  o.check(teacher.same_parameters(teacher_before), "teacher mutated");
  for (std::size_t i = 0; i < st.rounds.size(); ++i) {
    const auto& round = st.rounds[i];
    const std::string tag = "round " + std::to_string(i + 1);
    o.check(round.teacher_id == round.teacher_id_after, tag + ": teacher changed during round");
    const ModelCheckpoint& round_teacher = i == 0 ? teacher : st.students[i - 1];
    o.check(round.teacher_id == round_teacher.id(), tag + ": teacher id");
    o.check(st.students[i].provenance().labeler_id == round_teacher.id(), tag + ": labeler id");
    if (i > 0) {
      // teacher(r+1) is student(r) bit for bit, and its labels are recomputed.
      o.check(round_teacher.same_parameters(st.students[i - 1]), tag + ": teacher != student");
      o.check(round.agreement.has_value(), tag + ": no pseudo-label comparison");
      const auto fresh = protocols::generate_pseudo_labels(round_teacher, t.unlabeled, t.config.task);
      const auto first = protocols::generate_pseudo_labels(teacher, t.unlabeled, t.config.task);
      o.check(fresh.labeler_id == round_teacher.id() && fresh.distributions != first.distributions,
              tag + ": pseudo labels not regenerated");
    }
  }
  o.check(st.rounds.size() == 3, "direct loop ran " + std::to_string(st.rounds.size()) + " rounds");
  o.detail << (o.pass ? "" : "; ");
  for (std::size_t i = 0; i < lineage.size(); ++i) o.detail << (i ? " -> " : "") << lineage[i];
  return o;
}

// ---- 6: determinism ------------------------------------------------------------------

Outcome criterion_6() {
  Outcome o;
  const auto t = small_task(0.1, 3, 160, 0.2);
  for (const Regime regime : protocols::kAllRegimes) {
    protocols::RegimeCache a, b;
    a.random_init = b.random_init = *t.init;
    const auto ra = protocols::run_regime(regime, t.data(), t.config, a);
    const auto rb = protocols::run_regime(regime, t.data(), t.config, b);
    const std::string name = protocols::to_string(regime);
    o.check(ra.checkpoint_id == rb.checkpoint_id && ra.checkpoint->same_parameters(*rb.checkpoint),
            name + ": checkpoints differ");
    o.check(std::memcmp(&ra.test_metric, &rb.test_metric, sizeof(double)) == 0 &&
                std::memcmp(&ra.dev_metric, &rb.dev_metric, sizeof(double)) == 0,
            name + ": metrics differ");
    for (std::size_t i = 0; i < std::min(ra.rounds.size(), rb.rounds.size()); ++i) {
      o.check(ra.rounds[i].train_losses == rb.rounds[i].train_losses, name + ": losses differ");
    }
  }
  // Whole-harness rerun into two directories gives byte-identical reports.
  const auto base = fs::temp_directory_path() / "tfs_acceptance_c6";
  fs::remove_all(base);
  nlohmann::json j = {
      {"name", "determinism"},
      {"synthetic",
       {{"vocab_size", 30}, {"num_examples", 200}, {"min_length", 3}, {"max_length", 5},
        {"signal_words_per_class", 4}, {"signal_per_example", 2}, {"noise_rate", 0.1}, {"seed", 2}}},
      {"max_length", 8},
      {"labeled_ratios", {0.1}},
      {"n_splits", 2},
      {"n_seeds_per_split", 2},
      {"model", {{"hidden", 8}, {"layers", 1}, {"heads", 2}, {"ff", 8}, {"max_positions", 8}}},
      {"training",
       {{"tapt_epochs", 1}, {"finetune_epochs", 2}, {"st_epochs_per_round", 1}, {"max_rounds", 2}}}};
  std::string text[2], tsv[2];
  for (int i = 0; i < 2; ++i) {
    j["output_dir"] = (base / std::to_string(i)).string();
    const auto records = harness::execute_experiment(harness::parse_config(j));
    const auto r = report::emit_report(records, base / std::to_string(i));
    text[i] = r.text;
    tsv[i] = r.tsv;
  }
  o.check(text[0] == text[1] && tsv[0] == tsv[1], "harness reports differ");
  fs::remove_all(base);
  o.detail << (o.pass ? "" : "; ") << "5 regimes rerun bit-exact; harness report identical";
  return o;
}

// ---- 7: desk-scale additivity ----------------------------------------------------

Outcome criterion_7() {
  Outcome o;
  const auto t0 = Clock::now();
  auto config = harness::load_config(std::string(TFS_SOURCE_DIR) + "/configs/additivity.json");
  const auto out = fs::temp_directory_path() / "tfs_acceptance_c7";
  fs::remove_all(out);
  config.output_dir = out.string();
  o.check(config.synthetic && config.synthetic->vocab_size == 200 &&
              config.synthetic->num_classes == 2 && config.synthetic->num_examples == 5000 &&
              config.synthetic->noise_rate == 0.1,
          "config is not the required synthetic task");
  o.check(config.labeled_ratios == std::vector<double>{0.01} && config.n_splits == 3 &&
              config.n_seeds_per_split == 3,
          "config is not 1% x 3 splits x 3 seeds");
  const auto records = harness::execute_experiment(config);
  const auto groups = report::summarize(records);
  const auto rendered = report::emit_report(groups, out);
  const auto& g = groups.at(0);
  const auto mean = [&](Regime r) { return g.find(r)->aggregate.mean; };
  const double ft = mean(Regime::kFT), tapt = mean(Regime::kTAPT), st = mean(Regime::kST),
               tfs = mean(Regime::kTFS);
  o.check(records.size() == 45, std::to_string(records.size()) + " runs");
  o.check(tfs >= tapt, "TFS < TAPT");
  o.check(tfs >= st, "TFS < ST");
  o.check(tfs >= ft, "TFS < FT");
  const double g_tapt = tapt - ft, g_st = st - ft, g_tfs = tfs - ft;
  const bool both_positive = g_tapt > 0 && g_st > 0;
  if (both_positive) {
    o.check(g_tfs >= 0.5 * (g_tapt + g_st), "TFS gain below half the summed gains");
  }
  const double elapsed = seconds_since(t0);
  std::printf("%s", rendered.text.c_str());
  o.detail << (o.pass ? "" : "; ") << "FT " << report::percent(ft) << ", TAPT "
           << report::percent(tapt) << ", ST " << report::percent(st) << ", TFS "
           << report::percent(tfs) << "; TFS gain " << report::signed_percent(g_tfs)
           << (both_positive ? " vs 0.5 x " + report::signed_percent(g_tapt + g_st)
                             : std::string(" (additivity rule not applicable)"))
           << "; " << static_cast<int>(elapsed) << " s";
  return o;
}

// ---- 8: report arithmetic against reference means -----------------------------

Outcome criterion_8() {
  Outcome o;
  const auto qnli = report::render({report::group_from_means(
      "QNLI", 0.01, "accuracy",
      {{Regime::kFT, 0.791}, {Regime::kTAPT, 0.820}, {Regime::kST, 0.802}})});
  for (const std::string want : {"79.1", "82.0  0.0  (+2.9)", "80.2  0.0  (+1.1)",
                                 "TAPT+ST reference: 83.1"}) {
    o.check(qnli.text.find(want) != std::string::npos, "QNLI table lacks \"" + want + "\"");
  }
  const auto sst = report::render({report::group_from_means(
      "SST-2", 0.001, "accuracy",
      {{Regime::kFT, 0.720},
       {Regime::kTAPT, 0.845},
       {Regime::kST, 0.741},
       {Regime::kSTTI, 0.754},
       {Regime::kTFS, 0.857}})});
  const auto block = sst.text.find("initialization and pseudo-labeler comparison");
  o.check(block != std::string::npos, "no initialization/pseudo-labeler block");
  if (block != std::string::npos) {
    const std::string tail = sst.text.substr(block);
    for (const std::string want :
         {"FT           TAPT   ST           STTI   TFS",
          "Init.         random_init  TAPT*  random_init  TAPT*  TAPT*",
          "Pseud.        -            -      FT           FT     TAPT",
          "Score (0.1%)  72.0         84.5   74.1         75.4   85.7"}) {
      o.check(tail.find(want) != std::string::npos, "block lacks \"" + want + "\"");
    }
  }
  const auto sst_gain = report::render(
      {report::group_from_means("SST-2", 0.01, "accuracy", {{Regime::kFT, 0.873}, {Regime::kTFS, 0.894}})});
  o.check(sst_gain.text.find("(+2.1)") != std::string::npos, "SST-2 gain is not (+2.1)");
  o.detail << (o.pass ? "" : "; ") << "QNLI (+2.9) (+1.1) ref 83.1; STTI block rows; SST-2 (+2.1)";
  return o;
}

// ---- 9: metric oracles ---------------------------------------------------------

constexpr int kB(int t) { return 2 * t + 1; }
constexpr int kI(int t) { return 2 * t + 2; }

// Every (type, start, end) whose tags form a well-formed entity; a stray I
// opens an entity like conlleval does.
std::vector<metrics::Span> brute_spans(const std::vector<int>& tags) {
  std::vector<metrics::Span> out;
  const std::size_t n = tags.size();
  for (int x = 0; x < 3; ++x) {
    for (std::size_t s = 0; s < n; ++s) {
      const bool opens =
          tags[s] == kB(x) ||
          (tags[s] == kI(x) && (s == 0 || (tags[s - 1] != kB(x) && tags[s - 1] != kI(x))));
      if (!opens) continue;
      for (std::size_t e = s; e < n; ++e) {
        bool inside = true;
        for (std::size_t k = s + 1; k <= e; ++k) inside = inside && tags[k] == kI(x);
        if (inside && (e + 1 == n || tags[e + 1] != kI(x))) out.emplace_back(x, s, e);
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

Outcome criterion_9() {
  Outcome o;
  Rng rng(2024);
  int span_bad = 0, micro_bad = 0;
  for (int instance = 0; instance < 200; ++instance) {
    std::vector<std::vector<int>> pred, gold;
    std::size_t tp = 0, fp = 0, fn = 0;
    const std::size_t sentences = 1 + rng.below(4);
    for (std::size_t s = 0; s < sentences; ++s) {
      const std::size_t n = 1 + rng.below(7);
      std::vector<int> p(n), g(n);
      for (auto& x : p) x = static_cast<int>(rng.below(7));
      for (auto& x : g) x = static_cast<int>(rng.below(7));
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
    span_bad += metrics::span_f1(pred, gold, 7) != brute_f1(tp, fp, fn);
  }
  for (int instance = 0; instance < 200; ++instance) {
    const int k = 2 + static_cast<int>(rng.below(4));
    const std::size_t n = 1 + rng.below(6);
    std::vector<std::vector<int>> pred(n), gold(n);
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < k; ++c) {
        const bool p = rng.bernoulli(0.4), g = rng.bernoulli(0.4);
        if (p) pred[i].push_back(c);
        if (g) gold[i].push_back(c);
        tp += p && g;
        fp += p && !g;
        fn += !p && g;
      }
    }
    micro_bad += metrics::micro_f1(pred, gold, k) != brute_f1(tp, fp, fn);
  }
  o.check(span_bad == 0, std::to_string(span_bad) + " span_f1 mismatches");
  o.check(micro_bad == 0, std::to_string(micro_bad) + " micro_f1 mismatches");
  // TP=1, FP=1, FN=0
  const double hand = metrics::binary_f1(std::vector<int>{1, 1, 0}, std::vector<int>{1, 0, 0});
  o.check(hand == 2.0 / 3.0, "binary_f1 hand case " + std::to_string(hand));
  const double perfect = metrics::binary_f1(std::vector<int>{1, 0, 1}, std::vector<int>{1, 0, 1});
  o.check(perfect == 1.0, "binary_f1 perfect case");
  o.detail << (o.pass ? "" : "; ") << "200+200 random instances exact; binary_f1 TP1/FP1/FN0 = "
           << hand;
  return o;
}

// ---- 10: fixed point of self-training ----------------------------------------

Outcome criterion_10() {
  Outcome o;
  double teacher_sum = 0.0, student_sum = 0.0;
  const int seeds = 3;
  for (int s = 0; s < seeds; ++s) {
    auto t = small_task(0.0, 40 + static_cast<std::uint64_t>(s), 800, 0.25);
    t.config.finetune_epochs = 30;
    t.config.finetune_optimizer.lr = 3e-3;
    t.config.st_epochs_per_round = 5;
    t.config.st_optimizer.lr = 3e-3;
    t.config.max_rounds = 1;
    const auto teacher =
        protocols::run_finetune(*t.init, t.labeled, t.config.task, t.config, 500 + s).checkpoint;
    const double teacher_acc = evaluate(teacher, t.config.task, t.test);
    o.check(teacher_acc == 1.0, "seed " + std::to_string(s) + ": teacher scores " +
                                    std::to_string(teacher_acc) + ", not 100%");
    const auto st = protocols::run_self_training(teacher, *t.init, t.labeled, t.unlabeled,
                                                 t.config.task, t.config, 600 + s);
    o.check(st.rounds.size() == 1, "more than one round");
    teacher_sum += teacher_acc;
    student_sum += evaluate(st.student, t.config.task, t.test);
  }
  const double teacher_mean = teacher_sum / seeds, student_mean = student_sum / seeds;
  o.check(teacher_mean - student_mean <= 0.02,
          "student " + report::percent(student_mean) + " trails teacher by more than 2 points");
  o.detail << (o.pass ? "" : "; ") << "teacher " << report::percent(teacher_mean) << ", student "
           << report::percent(student_mean) << " over " << seeds << " seeds";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", criterion_1},
      {"MLM loss semantics", criterion_2},
      {"self-training loss semantics", criterion_3},
      {"masking statistics", criterion_4},
      {"TFS round structure", criterion_5},
      {"determinism", criterion_6},
      {"desk-scale additivity", criterion_7},
      {"report arithmetic", criterion_8},
      {"metric oracles", criterion_9},
      {"self-training fixed point", criterion_10}};
  std::set<int> only;
  std::string report_path;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--report" && i + 1 < argc) {
      report_path = argv[++i];
    } else {
      only.insert(std::atoi(arg.c_str()));
    }
  }
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    failures += !o.pass;
    char head[160];
    std::snprintf(head, sizeof head, "%s criterion %d (%s): ", o.pass ? "PASS" : "FAIL", id,
                  criteria[i].first.c_str());
    char tail[32];
    std::snprintf(tail, sizeof tail, " [%.1f s]\n", seconds_since(t0));
    const std::string line = head + o.detail.str() + tail;
    std::fputs(line.c_str(), stdout);
    std::fflush(stdout);
    if (!report_path.empty()) {
      if (std::FILE* f = std::fopen(report_path.c_str(), "a")) {
        std::fputs(line.c_str(), f);
        std::fclose(f);
      }
    }
  }
  return failures == 0 ? 0 : 1;
}
