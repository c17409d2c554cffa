#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tfs/config.hpp"
#include "tfs/error.hpp"
#include "tfs/model/checkpoint.hpp"
#include "tfs/protocols.hpp"
#include "tfs/rng.hpp"
#include "tfs/text/dataset.hpp"
#include "tfs/text/split.hpp"
#include "tfs/text/synthetic.hpp"
#include "tfs/text/vocab.hpp"

namespace tfs::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using protocols::Regime;
using protocols::RegimeConfig;

struct ExperimentConfig {
  std::string name = "synthetic";
  text::TaskSpec task;
  // Data: a synthetic spec (default) or JSONL files.
  std::optional<text::SyntheticSpec> synthetic;
  double synthetic_dev_fraction = 0.1;   // of the generated corpus
  double synthetic_test_fraction = 0.2;  // of the generated corpus
  std::string train_path, dev_path, test_path, vocab_path;
  std::size_t max_length = text::kDefaultMaxLen;
  std::size_t vocab_min_count = 1;
  std::size_t vocab_max_size = 30000;

  std::vector<double> labeled_ratios = {0.01};
  int n_splits = 3;
  int n_seeds_per_split = 3;
  std::vector<Regime> regimes = {std::begin(protocols::kAllRegimes),
                                 std::end(protocols::kAllRegimes)};
  double dev_fraction = 0.1;  // of D_l, used when no dev set is supplied
  std::uint64_t master_seed = 0;
  model::EncoderConfig model;  // vocab_size comes from the data
  RegimeConfig training;
  std::map<Regime, json> regime_overrides;  // partial RegimeConfig objects
  std::string output_dir = "tfs-output";
  bool save_checkpoints = false;

  bool uses_files() const { return !train_path.empty(); }

  void validate() const {
    task.validate();
    if (uses_files()) {
      if (synthetic) throw ConfigError("config: give either 'synthetic' or 'train_path', not both");
      if (test_path.empty()) throw ConfigError("config: 'test_path' is required with 'train_path'");
    } else {
      const auto spec = synthetic.value_or(text::SyntheticSpec{});
      spec.validate();
      if (task.kind != text::TaskKind::kSingleSentenceClassification ||
          task.num_classes != spec.num_classes) {
        throw ConfigError("config: synthetic data needs a single_sentence_classification task with " +
                          std::to_string(spec.num_classes) + " classes");
      }
      if (!(synthetic_dev_fraction >= 0.0 && synthetic_test_fraction > 0.0 &&
            synthetic_dev_fraction + synthetic_test_fraction < 1.0)) {
        throw ConfigError(
            "config: synthetic_dev_fraction >= 0, synthetic_test_fraction > 0, sum < 1");
      }
    }
    if (labeled_ratios.empty()) throw ConfigError("config: labeled_ratios is empty");
    for (const double r : labeled_ratios) {
      if (!(r > 0.0 && r < 1.0)) {
        throw ConfigError("config: labeled_ratio " + std::to_string(r) + " outside (0,1)");
      }
    }
    if (n_splits < 1 || n_seeds_per_split < 1) {
      throw ConfigError("config: n_splits and n_seeds_per_split must be >= 1");
    }
    if (regimes.empty()) throw ConfigError("config: no regimes selected");
    if (!(dev_fraction > 0.0 && dev_fraction < 1.0)) {
      throw ConfigError("config: dev_fraction must be in (0,1)");
    }
    if (max_length < 4) throw ConfigError("config: max_length must be >= 4");
    auto m = model;
    m.vocab_size = text::kNumSpecial + 1;
    m.validate();
    if (m.max_positions < max_length) {
      throw ConfigError("config: model.max_positions must be >= max_length");
    }
    training.validate();
    for (const auto& [regime, override_json] : regime_overrides) {
      const auto c = regime_config(regime);
      c.validate();
      if (config::to_json(c).dump() != config::to_json(training).dump()) {
        for (const char* key : {"tapt_epochs", "tapt_batch_size", "tapt_optimizer", "mask_prob"}) {
          if (override_json.contains(key)) {
            throw ConfigError("config: regime_overrides." + protocols::to_string(regime) + "." +
                              key + ": the TAPT checkpoint is shared, so TAPT settings cannot be overridden per regime");
          }
        }
      }
    }
  }

  // Training settings of one regime: `training` with its override applied.
  RegimeConfig regime_config(Regime r) const {
    RegimeConfig c = training;
    c.task = task;
    c.regime = r;
    const auto it = regime_overrides.find(r);
    if (it != regime_overrides.end()) {
      std::vector<std::string> unknown;
      {
        config::StrictObject o(it->second, "regime_overrides." + protocols::to_string(r), unknown);
        config::read(o, c, unknown);
      }
      config::throw_if_unknown(unknown);
    }
    return c;
  }
};

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["task"] = config::to_json(c.task);
  if (c.uses_files()) {
    j["train_path"] = c.train_path;
    j["dev_path"] = c.dev_path;
    j["test_path"] = c.test_path;
    j["vocab_path"] = c.vocab_path;
    j["vocab_min_count"] = c.vocab_min_count;
    j["vocab_max_size"] = c.vocab_max_size;
  } else {
    j["synthetic"] = config::to_json(c.synthetic.value_or(text::SyntheticSpec{}));
    j["synthetic_dev_fraction"] = c.synthetic_dev_fraction;
    j["synthetic_test_fraction"] = c.synthetic_test_fraction;
  }
  j["max_length"] = c.max_length;
  j["labeled_ratios"] = c.labeled_ratios;
  j["n_splits"] = c.n_splits;
  j["n_seeds_per_split"] = c.n_seeds_per_split;
  j["regimes"] = json::array();
  for (const Regime r : c.regimes) j["regimes"].push_back(protocols::to_string(r));
  j["dev_fraction"] = c.dev_fraction;
  j["master_seed"] = c.master_seed;
  j["model"] = config::model_to_json(c.model);
  j["training"] = config::to_json(c.training);
  j["regime_overrides"] = json::object();
  for (const auto& [r, o] : c.regime_overrides) j["regime_overrides"][protocols::to_string(r)] = o;
  j["output_dir"] = c.output_dir;
  j["save_checkpoints"] = c.save_checkpoints;
  return j;
}

// Parses an experiment config object. Absent keys keep their defaults;
// unknown keys anywhere in the tree are reported together.
inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  std::vector<std::string> unknown;
  {
    config::StrictObject o(j, "", unknown);
    o.get("name", c.name);
    if (o.has("task")) {
      config::StrictObject t(o.raw("task"), "task", unknown);
      config::read(t, c.task);
    }
    if (o.has("synthetic")) {
      text::SyntheticSpec s;
      config::StrictObject so(o.raw("synthetic"), "synthetic", unknown);
      config::read(so, s);
      c.synthetic = s;
    }
    o.get("synthetic_dev_fraction", c.synthetic_dev_fraction);
    o.get("synthetic_test_fraction", c.synthetic_test_fraction);
    o.get("train_path", c.train_path);
    o.get("dev_path", c.dev_path);
    o.get("test_path", c.test_path);
    o.get("vocab_path", c.vocab_path);
    o.get("max_length", c.max_length);
    o.get("vocab_min_count", c.vocab_min_count);
    o.get("vocab_max_size", c.vocab_max_size);
    o.get("labeled_ratios", c.labeled_ratios);
    o.get("n_splits", c.n_splits);
    o.get("n_seeds_per_split", c.n_seeds_per_split);
    if (o.has("regimes")) {
      std::vector<std::string> names;
      o.get("regimes", names);
      c.regimes.clear();
      for (const auto& n : names) {
        const Regime r = protocols::regime_from_string(n);
        if (std::find(c.regimes.begin(), c.regimes.end(), r) != c.regimes.end()) {
          throw ConfigError("config: regime " + n + " listed twice");
        }
        c.regimes.push_back(r);
      }
    }
    o.get("dev_fraction", c.dev_fraction);
    o.get("master_seed", c.master_seed);
    if (o.has("model")) {
      config::StrictObject m(o.raw("model"), "model", unknown);
      config::read(m, c.model);
    }
    if (o.has("training")) {
      config::StrictObject t(o.raw("training"), "training", unknown);
      config::read(t, c.training, unknown);
    }
    if (o.has("regime_overrides")) {
      const json& ov = o.raw("regime_overrides");
      if (!ov.is_object()) throw ConfigError("regime_overrides: expected a JSON object");
      for (const auto& [name, value] : ov.items()) {
        if (!value.is_object()) {
          throw ConfigError("regime_overrides." + name + ": expected a JSON object");
        }
        c.regime_overrides[protocols::regime_from_string(name)] = value;
      }
    }
    o.get("output_dir", c.output_dir);
    o.get("save_checkpoints", c.save_checkpoints);
  }
  config::throw_if_unknown(unknown);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  return parse_config(config::read_json_file(path));
}

// Stable fingerprint of everything that affects results (not output_dir).
inline std::string config_fingerprint(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  j.erase("save_checkpoints");
  const std::string s = j.dump();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(
                    fnv1a({reinterpret_cast<const unsigned char*>(s.data()), s.size()})));
  return buf;
}

// ---- data ---------------------------------------------------------------------

struct ExperimentData {
  text::Vocabulary vocab;
  std::vector<text::LabeledExample> train;  // pool that labeled splits are drawn from
  std::vector<text::LabeledExample> dev;    // empty: carve from D_l per split
  std::vector<text::LabeledExample> test;
};

// Test, dev and train index sets of a synthetic corpus of n examples, from a
// seeded shuffle. Shared by the harness and the gen-synthetic command.
struct SyntheticPartition {
  std::vector<std::size_t> train, dev, test;
};

inline SyntheticPartition partition_synthetic(std::size_t n, std::uint64_t seed,
                                              double dev_fraction, double test_fraction) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed({seed, 0x686f6c64ULL}));
  rng.shuffle<std::size_t>(order);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  const auto n_dev = static_cast<std::size_t>(std::llround(dev_fraction * static_cast<double>(n)));
  if (n_test == 0 || n_test + n_dev >= n) {
    throw ConfigError("synthetic corpus too small for the requested dev/test fractions");
  }
  SyntheticPartition p;
  p.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  p.dev.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test),
               order.begin() + static_cast<std::ptrdiff_t>(n_test + n_dev));
  p.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test + n_dev), order.end());
  return p;
}

inline ExperimentData prepare_data(const ExperimentConfig& c) {
  ExperimentData d;
  if (!c.uses_files()) {
    const auto spec = c.synthetic.value_or(text::SyntheticSpec{});
    const auto corpus = text::generate_synthetic_corpus(spec);
    d.vocab = text::synthetic_vocabulary(spec);
    const auto all = text::synthetic_examples(corpus, d.vocab, c.max_length);
    const auto part = partition_synthetic(all.size(), spec.seed, c.synthetic_dev_fraction,
                                          c.synthetic_test_fraction);
    for (const auto i : part.train) d.train.push_back(all[i]);
    for (const auto i : part.dev) d.dev.push_back(all[i]);
    for (const auto i : part.test) d.test.push_back(all[i]);
    return d;
  }
  if (!c.vocab_path.empty()) {
    d.vocab = text::Vocabulary::load(c.vocab_path);
  } else {
    d.vocab = text::build_vocab(text::load_texts(c.train_path, c.task), c.vocab_min_count,
                                c.vocab_max_size);
  }
  d.train = text::load_dataset(c.train_path, c.task, d.vocab, c.max_length);
  std::uint64_t offset = d.train.size();
  if (!c.dev_path.empty()) {
    d.dev = text::load_dataset(c.dev_path, c.task, d.vocab, c.max_length, offset);
    offset += d.dev.size();
  }
  d.test = text::load_dataset(c.test_path, c.task, d.vocab, c.max_length, offset);
  if (d.train.size() < 2) throw DataError("training set needs at least 2 examples");
  if (d.test.empty()) throw DataError("test set is empty");
  return d;
}

// ---- seeds ------------------------------------------------------------------------

enum : std::uint64_t { kSeedInit = 0x696e6974, kSeedTapt = 0x74617074, kSeedSplit = 0x73706c74 };

inline std::uint64_t init_seed(std::uint64_t master) { return derive_seed({master, kSeedInit}); }
inline std::uint64_t tapt_seed(std::uint64_t master) { return derive_seed({master, kSeedTapt}); }
inline std::uint64_t split_seed(std::uint64_t master, int ratio, int split) {
  return derive_seed({master, kSeedSplit, static_cast<std::uint64_t>(ratio),
                      static_cast<std::uint64_t>(split)});
}
// Base seed of one (ratio, split, seed) cell; regimes derive their own from it.
inline std::uint64_t run_base_seed(std::uint64_t master, int ratio, int split, int seed) {
  return derive_seed({master, static_cast<std::uint64_t>(ratio), static_cast<std::uint64_t>(split),
                      static_cast<std::uint64_t>(seed)});
}

// ---- results ----------------------------------------------------------------------

struct RunRecord {
  std::string dataset;
  double labeled_ratio = 0.0;
  int ratio_index = 0, split_index = 0, seed_index = 0;
  std::string regime;
  std::string metric;
  std::uint64_t seed = 0;
  std::optional<double> dev_metric;
  double test_metric = 0.0;
  std::string checkpoint_id;
  model::Provenance provenance;
  std::string teacher_id, student_init_id, init_tag, pseudo_labeler;
  int rounds = 0, selected_round = 0;
  std::size_t labeled_size = 0, unlabeled_size = 0, dev_size = 0, test_size = 0;
  std::string config_fingerprint;

  std::string run_name() const {
    return "r" + std::to_string(ratio_index) + "-s" + std::to_string(split_index) + "-k" +
           std::to_string(seed_index) + "-" + regime;
  }
};

inline json to_json(const RunRecord& r) {
  json j = {{"dataset", r.dataset},
            {"labeled_ratio", r.labeled_ratio},
            {"ratio_index", r.ratio_index},
            {"split_index", r.split_index},
            {"seed_index", r.seed_index},
            {"regime", r.regime},
            {"metric", r.metric},
            {"seed", r.seed},
            {"test_metric", r.test_metric},
            {"checkpoint_id", r.checkpoint_id},
            {"provenance", r.provenance},
            {"teacher_id", r.teacher_id},
            {"student_init_id", r.student_init_id},
            {"init", r.init_tag},
            {"pseudo_labeler", r.pseudo_labeler},
            {"rounds", r.rounds},
            {"selected_round", r.selected_round},
            {"labeled_size", r.labeled_size},
            {"unlabeled_size", r.unlabeled_size},
            {"dev_size", r.dev_size},
            {"test_size", r.test_size},
            {"config_fingerprint", r.config_fingerprint}};
  j["dev_metric"] = r.dev_metric ? json(*r.dev_metric) : json(nullptr);
  return j;
}

inline RunRecord record_from_json(const json& j) {
  try {
    RunRecord r;
    j.at("dataset").get_to(r.dataset);
    j.at("labeled_ratio").get_to(r.labeled_ratio);
    j.at("ratio_index").get_to(r.ratio_index);
    j.at("split_index").get_to(r.split_index);
    j.at("seed_index").get_to(r.seed_index);
    j.at("regime").get_to(r.regime);
    j.at("metric").get_to(r.metric);
    j.at("seed").get_to(r.seed);
    if (!j.at("dev_metric").is_null()) r.dev_metric = j.at("dev_metric").get<double>();
    j.at("test_metric").get_to(r.test_metric);
    j.at("checkpoint_id").get_to(r.checkpoint_id);
    j.at("provenance").get_to(r.provenance);
    j.at("teacher_id").get_to(r.teacher_id);
    j.at("student_init_id").get_to(r.student_init_id);
    j.at("init").get_to(r.init_tag);
    j.at("pseudo_labeler").get_to(r.pseudo_labeler);
    j.at("rounds").get_to(r.rounds);
    j.at("selected_round").get_to(r.selected_round);
    j.at("labeled_size").get_to(r.labeled_size);
    j.at("unlabeled_size").get_to(r.unlabeled_size);
    j.at("dev_size").get_to(r.dev_size);
    j.at("test_size").get_to(r.test_size);
    j.at("config_fingerprint").get_to(r.config_fingerprint);
    protocols::regime_from_string(r.regime);
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed run record: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed run record: ") + e.what());
  }
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  // Write then rename, so an interrupted run never leaves a truncated file.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << text;
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

// Records from <dir>/runs/*.json sorted by (ratio, split, seed, regime order).
inline std::vector<RunRecord> load_records(const fs::path& dir) {
  const fs::path runs = dir / "runs";
  if (!fs::is_directory(runs)) throw DataError("no runs/ directory under " + dir.string());
  std::vector<RunRecord> out;
  for (const auto& entry : fs::directory_iterator(runs)) {
    if (entry.path().extension() != ".json") continue;
    out.push_back(record_from_json(read_json(entry.path())));
  }
  if (out.empty()) throw DataError("no run records under " + runs.string());
  std::sort(out.begin(), out.end(), [](const RunRecord& a, const RunRecord& b) {
    return std::tuple(a.dataset, a.ratio_index, a.split_index, a.seed_index,
                      static_cast<int>(protocols::regime_from_string(a.regime))) <
           std::tuple(b.dataset, b.ratio_index, b.split_index, b.seed_index,
                      static_cast<int>(protocols::regime_from_string(b.regime)));
  });
  return out;
}

// ---- execution -----------------------------------------------------------------

struct ExecuteOptions {
  bool resume = true;  // reuse run records already on disk
  std::function<void(const std::string&)> log = [](const std::string&) {};
};

namespace detail {

inline std::string fmt(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// TAPT is trained once per experiment on every training text (labels unused),
// so all ratios, splits and seeds share it. Reused from disk when present.
inline protocols::TaptResult shared_tapt(const ExperimentConfig& c, const ExperimentData& data,
                                         const model::ModelCheckpoint& init,
                                         const fs::path& out, const ExecuteOptions& opts) {
  const fs::path dir = out / "checkpoints" / "tapt";
  const fs::path log = out / "checkpoints" / "tapt.json";
  const auto fingerprint = config_fingerprint(c);
  if (opts.resume && fs::exists(log) && fs::exists(dir / "manifest.json")) {
    const json j = read_json(log);
    if (j.value("config_fingerprint", "") == fingerprint) {
      auto ckpt = model::load_checkpoint(dir.string());
      if (ckpt.provenance().parent_id == init.id()) {
        opts.log("tapt: reusing " + dir.string());
        return {std::move(ckpt), j.at("epoch_losses").get<std::vector<double>>()};
      }
    }
  }
  std::vector<text::Example> corpus;
  corpus.reserve(data.train.size());
  for (const auto& e : data.train) corpus.push_back(e.example);
  const auto start = std::chrono::steady_clock::now();
  auto r = protocols::run_tapt(init, corpus, c.regime_config(Regime::kTAPT), tapt_seed(c.master_seed));
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  opts.log("tapt: " + std::to_string(r.epoch_losses.size()) + " epochs, loss " +
           fmt(r.epoch_losses.empty() ? 0.0 : r.epoch_losses.front()) + " -> " +
           fmt(r.epoch_losses.empty() ? 0.0 : r.epoch_losses.back()) + " (" + fmt(secs, 1) + "s)");
  if (fs::exists(dir)) fs::remove_all(dir);
  model::save_checkpoint(r.checkpoint, dir.string());
  write_text(log, json{{"config_fingerprint", fingerprint},
                       {"checkpoint_id", r.checkpoint.id()},
                       {"epoch_losses", r.epoch_losses}}
                      .dump(2) +
                      "\n");
  return r;
}

}  // namespace detail

// Runs every ratio × split × seed × regime cell, writing one record per run
// under <output_dir>/runs/ plus a phase log, and returns all records in
// execution order. Completed runs found on disk are reused.
inline std::vector<RunRecord> execute_experiment(const ExperimentConfig& c,
                                                 const ExecuteOptions& opts = {}) {
  c.validate();
  const fs::path out = c.output_dir;
  fs::create_directories(out / "runs");
  write_text(out / "config.resolved.json", to_json(c).dump(2) + "\n");
  const auto fingerprint = config_fingerprint(c);

  const ExperimentData data = prepare_data(c);
  auto enc = c.model;
  enc.vocab_size = data.vocab.tokens().size();
  const auto random_init = model::init_model(enc, {}, init_seed(c.master_seed));
  opts.log("data: " + std::to_string(data.train.size()) + " train, " +
           std::to_string(data.dev.size()) + " dev, " + std::to_string(data.test.size()) +
           " test; vocabulary " + std::to_string(enc.vocab_size));

  std::optional<model::ModelCheckpoint> tapt;
  std::optional<protocols::TaptResult> tapt_result;
  const bool needs_tapt = std::any_of(c.regimes.begin(), c.regimes.end(),
                                      [](Regime r) { return r != Regime::kFT && r != Regime::kST; });

  std::vector<RunRecord> records;
  for (int ri = 0; ri < static_cast<int>(c.labeled_ratios.size()); ++ri) {
    const double ratio = c.labeled_ratios[static_cast<std::size_t>(ri)];
    for (int si = 0; si < c.n_splits; ++si) {
      std::optional<text::Split> split;
      std::vector<text::LabeledExample> labeled, dev;
      for (int ki = 0; ki < c.n_seeds_per_split; ++ki) {
        std::map<std::string, protocols::RegimeCache> caches;
        for (const Regime regime : c.regimes) {
          RunRecord rec;
          rec.dataset = c.name;
          rec.labeled_ratio = ratio;
          rec.ratio_index = ri;
          rec.split_index = si;
          rec.seed_index = ki;
          rec.regime = protocols::to_string(regime);
          const fs::path record_path = out / "runs" / (rec.run_name() + ".json");
          if (opts.resume && fs::exists(record_path)) {
            auto old = record_from_json(read_json(record_path));
            if (old.config_fingerprint != fingerprint) {
              throw ConfigError(out.string() + " holds results of a different config (" +
                                record_path.filename().string() +
                                "); use a fresh output_dir");
            }
            opts.log(rec.run_name() + ": done earlier, reusing");
            records.push_back(std::move(old));
            continue;
          }
          const std::string context = "run " + rec.run_name() + " (labeled_ratio " +
                                      std::to_string(ratio) + ", split " + std::to_string(si) +
                                      ", seed " + std::to_string(ki) + ", regime " + rec.regime +
                                      "): ";
          try {
            if (!split) {
              split = text::sample_split(data.train, ratio, split_seed(c.master_seed, ri, si));
              if (data.dev.empty()) {
                std::tie(labeled, dev) = text::hold_out(split->labeled, c.dev_fraction,
                                                        derive_seed({split_seed(c.master_seed, ri, si), 1}));
              } else {
                labeled = split->labeled;
                dev = data.dev;
              }
            }
            if (needs_tapt && !tapt) {
              tapt_result = detail::shared_tapt(c, data, random_init, out, opts);
              tapt = tapt_result->checkpoint;
            }
            auto rc = c.regime_config(regime);
            rc.seed = run_base_seed(c.master_seed, ri, si, ki);
            // Regimes with identical settings share finetuned teachers.
            auto& cache = caches[config::to_json(rc).dump()];
            if (!cache.random_init) {
              cache.random_init = random_init;
              cache.tapt = tapt;
              cache.tapt_log = tapt_result;
            }
            const protocols::RunData run_data{&labeled, &split->unlabeled, &dev, &data.test};
            const auto start = std::chrono::steady_clock::now();
            auto result = protocols::run_regime(regime, run_data, rc, cache);
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

            rec.metric = result.metric;
            rec.seed = result.seed;
            if (!std::isnan(result.dev_metric)) rec.dev_metric = result.dev_metric;
            rec.test_metric = result.test_metric;
            rec.checkpoint_id = result.checkpoint_id;
            rec.provenance = result.provenance;
            rec.teacher_id = result.teacher_id;
            rec.student_init_id = result.student_init_id;
            rec.init_tag = result.init_tag;
            rec.pseudo_labeler = result.pseudo_labeler;
            rec.rounds = static_cast<int>(result.rounds.size());
            rec.selected_round = result.selected_round;
            rec.labeled_size = labeled.size();
            rec.unlabeled_size = split->unlabeled.size();
            rec.dev_size = dev.size();
            rec.test_size = data.test.size();
            rec.config_fingerprint = fingerprint;

            std::string phase_log;
            for (const auto& p : result.phases) phase_log += p.dump() + "\n";
            phase_log += json{{"phase", "evaluate"},
                              {"checkpoint_id", rec.checkpoint_id},
                              {"dev_metric", to_json(rec).at("dev_metric")},
                              {"test_metric", rec.test_metric},
                              {"seconds", secs}}
                             .dump() +
                         "\n";
            write_text(out / "logs" / (rec.run_name() + ".jsonl"), phase_log);
            if (c.save_checkpoints) {
              const fs::path dir = out / "checkpoints" / "runs" / rec.run_name();
              if (fs::exists(dir)) fs::remove_all(dir);
              model::save_checkpoint(*result.checkpoint, dir.string());
            }
            // The record goes last: its presence marks the run complete.
            write_text(record_path, to_json(rec).dump(2) + "\n");
            opts.log(rec.run_name() + ": test " + rec.metric + " " + detail::fmt(rec.test_metric) +
                     (rec.rounds > 0 ? ", rounds " + std::to_string(rec.rounds) : std::string()) +
                     " (" + detail::fmt(secs, 1) + "s)");
          } catch (const std::exception&) {
            rethrow_with_context(context);
          }
          records.push_back(std::move(rec));
        }
      }
    }
  }
  std::string all;
  for (const auto& r : records) all += to_json(r).dump() + "\n";
  write_text(out / "results.jsonl", all);
  return records;
}

}  // namespace tfs::harness
