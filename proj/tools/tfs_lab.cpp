// tfs-lab: command-line driver for the TAPT / finetune / self-training
// protocols and the experiment harness.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tfs/config.hpp"
#include "tfs/error.hpp"
#include "tfs/evaluate.hpp"
#include "tfs/harness.hpp"
#include "tfs/model/checkpoint.hpp"
#include "tfs/protocols.hpp"
#include "tfs/report.hpp"
#include "tfs/text/dataset.hpp"
#include "tfs/text/synthetic.hpp"
#include "tfs/text/vocab.hpp"

namespace {

namespace fs = std::filesystem;
using namespace tfs;
using nlohmann::json;

void log_line(const std::string& s) { std::cerr << s << '\n'; }

harness::ExperimentConfig load_config_or_default(const std::string& path) {
  return path.empty() ? harness::parse_config(json::object()) : harness::load_config(path);
}

// Vocabulary precedence: vocab.txt next to a checkpoint, the config's
// vocab_path, the synthetic vocabulary, then one built from `texts_from`.
text::Vocabulary resolve_vocab(const harness::ExperimentConfig& c, const std::string& ckpt_dir,
                               const std::vector<std::string>& texts_from) {
  if (!ckpt_dir.empty() && fs::exists(fs::path(ckpt_dir) / "vocab.txt")) {
    return text::Vocabulary::load((fs::path(ckpt_dir) / "vocab.txt").string());
  }
  if (!c.vocab_path.empty()) return text::Vocabulary::load(c.vocab_path);
  if (!c.uses_files()) return text::synthetic_vocabulary(c.synthetic.value_or(text::SyntheticSpec{}));
  std::vector<std::string> corpus;
  for (const auto& p : texts_from) {
    auto t = text::load_texts(p, c.task);
    corpus.insert(corpus.end(), t.begin(), t.end());
  }
  return text::build_vocab(corpus, c.vocab_min_count, c.vocab_max_size);
}

void save_with_vocab(const model::ModelCheckpoint& ckpt, const text::Vocabulary& vocab,
                     const std::string& dir) {
  if (fs::exists(dir)) {
    if (!fs::exists(fs::path(dir) / "manifest.json") && !fs::is_empty(dir)) {
      throw ConfigError(dir + " exists and is not a checkpoint directory");
    }
    fs::remove_all(dir);
  }
  model::save_checkpoint(ckpt, dir);
  vocab.save((fs::path(dir) / "vocab.txt").string());
}

std::vector<text::Example> unlabeled_from(const std::vector<std::string>& paths,
                                          const harness::ExperimentConfig& c,
                                          const text::Vocabulary& vocab) {
  std::vector<text::Example> out;
  for (const auto& p : paths) {
    auto e = text::load_unlabeled(p, c.task, vocab, c.max_length, out.size());
    out.insert(out.end(), e.begin(), e.end());
  }
  return out;
}

int cmd_gen_synthetic(const std::string& spec_path, const std::string& out_dir,
                      double dev_fraction, double test_fraction) {
  const auto spec = config::parse_synthetic_spec(config::read_json_file(spec_path));
  const auto corpus = text::generate_synthetic_corpus(spec);
  const auto part =
      harness::partition_synthetic(corpus.records.size(), spec.seed, dev_fraction, test_fraction);
  const fs::path out = out_dir;
  fs::create_directories(out);
  for (const auto& [name, idx] : {std::pair{"train.jsonl", &part.train},
                                  std::pair{"dev.jsonl", &part.dev},
                                  std::pair{"test.jsonl", &part.test}}) {
    std::vector<text::SyntheticRecord> recs;
    for (const auto i : *idx) recs.push_back(corpus.records[i]);
    harness::write_text(out / name, text::to_jsonl(recs));
  }
  text::synthetic_vocabulary(spec).save((out / "vocab.txt").string());
  harness::write_text(out / "spec.json", config::to_json(spec).dump(2) + "\n");
  std::cout << "wrote " << part.train.size() << " train, " << part.dev.size() << " dev, "
            << part.test.size() << " test examples to " << out.string() << '\n';
  return 0;
}

int cmd_tapt(const std::string& config_path, const std::vector<std::string>& corpus_paths,
             const std::string& init, const std::string& out) {
  const auto c = load_config_or_default(config_path);
  const bool random = init == "random";
  const auto vocab = resolve_vocab(c, random ? "" : init, corpus_paths);
  model::ModelCheckpoint start =
      random ? [&] {
        auto enc = c.model;
        enc.vocab_size = vocab.tokens().size();
        return model::init_model(enc, {}, harness::init_seed(c.master_seed));
      }()
             : model::load_checkpoint(init);
  if (start.config().vocab_size != vocab.tokens().size()) {
    throw ConfigError("checkpoint vocabulary size does not match the vocabulary");
  }
  const auto corpus = unlabeled_from(corpus_paths, c, vocab);
  const auto r = protocols::run_tapt(start, corpus, c.regime_config(protocols::Regime::kTAPT),
                                     harness::tapt_seed(c.master_seed));
  save_with_vocab(r.checkpoint, vocab, out);
  for (std::size_t e = 0; e < r.epoch_losses.size(); ++e) {
    std::printf("epoch %zu  mlm loss %.4f\n", e + 1, r.epoch_losses[e]);
  }
  std::printf("checkpoint %s -> %s\n", r.checkpoint.id().c_str(), out.c_str());
  return 0;
}

int cmd_finetune(const std::string& config_path, const std::string& init,
                 const std::string& train, const std::string& dev, const std::string& out) {
  const auto c = load_config_or_default(config_path);
  const auto vocab = resolve_vocab(c, init, {train});
  const auto start = model::load_checkpoint(init);
  const auto labeled = text::load_dataset(train, c.task, vocab, c.max_length);
  std::vector<text::LabeledExample> dev_set;
  if (!dev.empty()) dev_set = text::load_dataset(dev, c.task, vocab, c.max_length, labeled.size());
  auto rc = c.regime_config(protocols::Regime::kFT);
  const auto r = protocols::run_finetune(start, labeled, c.task, rc,
                                         protocols::regime_seed(c.master_seed, protocols::Regime::kFT),
                                         dev_set.empty() ? nullptr : &dev_set);
  save_with_vocab(r.checkpoint, vocab, out);
  for (std::size_t e = 0; e < r.epoch_losses.size(); ++e) {
    std::printf("epoch %zu  loss %.4f", e + 1, r.epoch_losses[e]);
    if (e < r.dev_metrics.size()) std::printf("  dev %.4f", r.dev_metrics[e]);
    std::printf("\n");
  }
  if (!dev_set.empty()) {
    std::printf("dev %s %.4f\n", std::string(text::to_string(c.task.metric)).c_str(),
                evaluate(r.checkpoint, c.task, dev_set));
  }
  std::printf("checkpoint %s -> %s\n", r.checkpoint.id().c_str(), out.c_str());
  return 0;
}

int cmd_selftrain(const std::string& config_path, const std::string& teacher_dir,
                  const std::string& student_dir, const std::vector<std::string>& unlabeled_paths,
                  const std::string& labeled_path, int rounds, const std::string& dev,
                  const std::string& out) {
  const auto c = load_config_or_default(config_path);
  const auto vocab = resolve_vocab(c, teacher_dir, {labeled_path});
  const auto teacher = model::load_checkpoint(teacher_dir);
  const auto student = model::load_checkpoint(student_dir);
  const auto labeled = text::load_dataset(labeled_path, c.task, vocab, c.max_length);
  auto unlabeled = unlabeled_from(unlabeled_paths, c, vocab);
  std::vector<text::LabeledExample> dev_set;
  if (!dev.empty()) dev_set = text::load_dataset(dev, c.task, vocab, c.max_length);
  auto rc = c.regime_config(protocols::Regime::kTFS);
  if (rounds >= 0) rc.max_rounds = rounds;
  if (rc.max_rounds < 1) throw ConfigError("--rounds must be >= 1");
  const auto r = protocols::run_self_training(
      teacher, student, labeled, unlabeled, c.task, rc,
      protocols::regime_seed(c.master_seed, protocols::Regime::kTFS),
      dev_set.empty() ? nullptr : &dev_set);
  for (const auto& log : r.rounds) std::cout << protocols::round_json(log).dump() << '\n';
  save_with_vocab(r.student, vocab, out);
  std::printf("selected round %d, checkpoint %s -> %s\n", r.selected_round,
              r.student.id().c_str(), out.c_str());
  return 0;
}

int cmd_run(const std::string& config_path, const std::string& out, bool no_resume, bool quiet) {
  auto c = load_config_or_default(config_path);
  if (!out.empty()) c.output_dir = out;
  harness::ExecuteOptions opts;
  opts.resume = !no_resume;
  if (!quiet) opts.log = log_line;
  const auto records = harness::execute_experiment(c, opts);
  const auto rendered = report::emit_report(records, c.output_dir);
  std::cout << rendered.text;
  for (const auto& w : rendered.warnings) log_line("warning: " + w);
  return 0;
}

int cmd_report(const std::string& results, const std::string& out) {
  const auto records = harness::load_records(results);
  const auto rendered = report::emit_report(records, out.empty() ? results : out);
  std::cout << rendered.text;
  for (const auto& w : rendered.warnings) log_line("warning: " + w);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tfs-lab: task-adaptive pretraining, finetuning and self-training experiments"};
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  double dev_fraction = 0.1, test_fraction = 0.2;
  auto* gen = app.add_subcommand("gen-synthetic", "Write a synthetic classification corpus as JSONL");
  gen->add_option("--spec", spec_path, "Synthetic spec JSON file")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--dev-fraction", dev_fraction, "Fraction written to dev.jsonl");
  gen->add_option("--test-fraction", test_fraction, "Fraction written to test.jsonl");

  std::string config_path, init, out_ckpt;
  std::vector<std::string> corpus;
  auto* tapt = app.add_subcommand("tapt", "Continue MLM training on task text");
  tapt->add_option("--config", config_path, "Experiment config JSON")->check(CLI::ExistingFile);
  tapt->add_option("--corpus", corpus, "JSONL files whose text is used")->required()->check(CLI::ExistingFile);
  tapt->add_option("--init", init, "Checkpoint directory or 'random'")->required();
  tapt->add_option("--out", out_ckpt, "Output checkpoint directory")->required();

  std::string train, dev;
  auto* ft = app.add_subcommand("finetune", "Supervised finetuning on labeled data");
  ft->add_option("--config", config_path, "Experiment config JSON")->check(CLI::ExistingFile);
  ft->add_option("--init", init, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ft->add_option("--train", train, "Labeled JSONL")->required()->check(CLI::ExistingFile);
  ft->add_option("--dev", dev, "Dev JSONL (enables early stopping with finetune_patience)")->check(CLI::ExistingFile);
  ft->add_option("--out", out_ckpt, "Output checkpoint directory")->required();

  std::string teacher, student_init, labeled;
  std::vector<std::string> unlabeled;
  int rounds = -1;
  auto* st = app.add_subcommand("selftrain", "Teacher-student self-training rounds");
  st->add_option("--config", config_path, "Experiment config JSON")->check(CLI::ExistingFile);
  st->add_option("--teacher", teacher, "Finetuned teacher checkpoint")->required()->check(CLI::ExistingDirectory);
  st->add_option("--student-init", student_init, "Round-1 student checkpoint")->required()->check(CLI::ExistingDirectory);
  st->add_option("--unlabeled", unlabeled, "Unlabeled JSONL files")->required()->check(CLI::ExistingFile);
  st->add_option("--labeled", labeled, "Labeled JSONL")->required()->check(CLI::ExistingFile);
  st->add_option("--rounds", rounds, "Maximum rounds (default: config max_rounds)");
  st->add_option("--dev", dev, "Dev JSONL for the convergence rule")->check(CLI::ExistingFile);
  st->add_option("--out", out_ckpt, "Output checkpoint directory")->default_val("student");

  bool no_resume = false, quiet = false;
  std::string run_out;
  auto* run = app.add_subcommand("run", "Run the full experiment matrix and write a report");
  run->add_option("--config", config_path, "Experiment config JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--out", run_out, "Override output_dir");
  run->add_flag("--no-resume", no_resume, "Ignore run records already on disk");
  run->add_flag("--quiet", quiet, "No progress lines");

  std::string results, report_out;
  auto* rep = app.add_subcommand("report", "Aggregate run records into report tables");
  rep->add_option("--results", results, "Experiment output directory")->required()->check(CLI::ExistingDirectory);
  rep->add_option("--out", report_out, "Report directory (default: --results)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) return cmd_gen_synthetic(spec_path, out_dir, dev_fraction, test_fraction);
    if (*tapt) return cmd_tapt(config_path, corpus, init, out_ckpt);
    if (*ft) return cmd_finetune(config_path, init, train, dev, out_ckpt);
    if (*st) {
      return cmd_selftrain(config_path, teacher, student_init, unlabeled, labeled, rounds, dev,
                           out_ckpt);
    }
    if (*run) return cmd_run(config_path, run_out, no_resume, quiet);
    if (*rep) return cmd_report(results, report_out);
  } catch (const std::exception& e) {
    std::cerr << "tfs-lab: error: " << e.what() << '\n';
    return exit_code(e);
  }
  return 0;
}
