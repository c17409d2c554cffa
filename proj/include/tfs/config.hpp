#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tfs/error.hpp"
#include "tfs/model/checkpoint.hpp"
#include "tfs/optim.hpp"
#include "tfs/protocols.hpp"
#include "tfs/text/dataset.hpp"
#include "tfs/text/synthetic.hpp"

namespace tfs::config {

using nlohmann::json;

// Reads fields of one JSON object and remembers which keys were consumed, so
// leftovers can be reported as unknown. Paths are dotted ("training.mask_prob").
class StrictObject {
 public:
  StrictObject(const json& j, std::string path, std::vector<std::string>& unknown)
      : j_(j), path_(std::move(path)), unknown_(unknown) {
    if (!j_.is_object()) throw ConfigError(where() + "expected a JSON object");
  }
  StrictObject(const StrictObject&) = delete;
  StrictObject& operator=(const StrictObject&) = delete;
  ~StrictObject() {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) unknown_.push_back(qualified(key));
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  // Leaves `out` untouched (the default) when the key is absent or null.
  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(qualified(key) + ": wrong type (" + j_.at(key).dump() + ")");
    }
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string qualified(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : path_ + ": "; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
  std::vector<std::string>& unknown_;
};

inline void throw_if_unknown(const std::vector<std::string>& unknown) {
  if (unknown.empty()) return;
  std::string msg = "unknown config key(s):";
  for (const auto& k : unknown) msg += " " + k;
  throw ConfigError(msg);
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return json::object();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
}

// ---- AdamConfig -------------------------------------------------------------

inline json to_json(const AdamConfig& a) {
  return {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}};
}

inline void read(StrictObject& o, AdamConfig& a) {
  o.get("lr", a.lr);
  o.get("beta1", a.beta1);
  o.get("beta2", a.beta2);
  o.get("eps", a.eps);
}

// ---- RegimeConfig (training hyperparameters) -----------------------------

// Task, regime and seed are set by the harness, so they are not serialized.
inline json to_json(const protocols::RegimeConfig& c) {
  return {{"tapt_epochs", c.tapt_epochs},
          {"finetune_epochs", c.finetune_epochs},
          {"st_epochs_per_round", c.st_epochs_per_round},
          {"max_rounds", c.max_rounds},
          {"tapt_batch_size", c.tapt_batch_size},
          {"finetune_batch_size", c.finetune_batch_size},
          {"st_labeled_batch_size", c.st_labeled_batch_size},
          {"st_pseudo_batch_size", c.st_pseudo_batch_size},
          {"eval_batch_size", c.eval_batch_size},
          {"tapt_optimizer", to_json(c.tapt_optimizer)},
          {"finetune_optimizer", to_json(c.finetune_optimizer)},
          {"st_optimizer", to_json(c.st_optimizer)},
          {"clip_norm", c.clip_norm},
          {"mask_prob", c.mask_prob},
          {"st_lambda", c.st_lambda},
          {"finetune_patience", c.finetune_patience},
          {"round_patience", c.round_patience}};
}

inline void read(StrictObject& o, protocols::RegimeConfig& c, std::vector<std::string>& unknown) {
  o.get("tapt_epochs", c.tapt_epochs);
  o.get("finetune_epochs", c.finetune_epochs);
  o.get("st_epochs_per_round", c.st_epochs_per_round);
  o.get("max_rounds", c.max_rounds);
  o.get("tapt_batch_size", c.tapt_batch_size);
  o.get("finetune_batch_size", c.finetune_batch_size);
  o.get("st_labeled_batch_size", c.st_labeled_batch_size);
  o.get("st_pseudo_batch_size", c.st_pseudo_batch_size);
  o.get("eval_batch_size", c.eval_batch_size);
  for (auto [key, target] : {std::pair{"tapt_optimizer", &c.tapt_optimizer},
                             std::pair{"finetune_optimizer", &c.finetune_optimizer},
                             std::pair{"st_optimizer", &c.st_optimizer}}) {
    if (o.has(key)) {
      StrictObject sub(o.raw(key), o.qualified(key), unknown);
      read(sub, *target);
    }
  }
  o.get("clip_norm", c.clip_norm);
  o.get("mask_prob", c.mask_prob);
  o.get("st_lambda", c.st_lambda);
  o.get("finetune_patience", c.finetune_patience);
  o.get("round_patience", c.round_patience);
}

// ---- EncoderConfig without vocab_size (filled from the data) ---------------

inline json model_to_json(const model::EncoderConfig& c) {
  return {{"hidden", c.hidden},   {"layers", c.layers},
          {"heads", c.heads},     {"ff", c.ff},
          {"max_positions", c.max_positions}, {"dropout", c.dropout}};
}

inline void read(StrictObject& o, model::EncoderConfig& c) {
  o.get("hidden", c.hidden);
  o.get("layers", c.layers);
  o.get("heads", c.heads);
  o.get("ff", c.ff);
  o.get("max_positions", c.max_positions);
  o.get("dropout", c.dropout);
}

// ---- SyntheticSpec -----------------------------------------------------------

inline json to_json(const text::SyntheticSpec& s) {
  return {{"vocab_size", s.vocab_size},
          {"num_classes", s.num_classes},
          {"min_length", s.min_length},
          {"max_length", s.max_length},
          {"num_examples", s.num_examples},
          {"noise_rate", s.noise_rate},
          {"seed", s.seed},
          {"signal_words_per_class", s.signal_words_per_class},
          {"signal_per_example", s.signal_per_example}};
}

inline void read(StrictObject& o, text::SyntheticSpec& s) {
  o.get("vocab_size", s.vocab_size);
  o.get("num_classes", s.num_classes);
  o.get("min_length", s.min_length);
  o.get("max_length", s.max_length);
  o.get("num_examples", s.num_examples);
  o.get("noise_rate", s.noise_rate);
  o.get("seed", s.seed);
  o.get("signal_words_per_class", s.signal_words_per_class);
  o.get("signal_per_example", s.signal_per_example);
}

inline text::SyntheticSpec parse_synthetic_spec(const json& j) {
  std::vector<std::string> unknown;
  text::SyntheticSpec s;
  {
    StrictObject o(j, "", unknown);
    read(o, s);
  }
  throw_if_unknown(unknown);
  s.validate();
  return s;
}

// ---- TaskSpec ------------------------------------------------------------------

inline json to_json(const text::TaskSpec& t) {
  return {{"kind", std::string(text::to_string(t.kind))},
          {"num_classes", t.num_classes},
          {"metric", std::string(text::to_string(t.metric))}};
}

inline void read(StrictObject& o, text::TaskSpec& t) {
  std::string kind = std::string(text::to_string(t.kind));
  o.get("kind", kind);
  t.kind = text::task_kind_from_string(kind);
  o.get("num_classes", t.num_classes);
  if (o.has("metric")) {
    std::string metric;
    o.get("metric", metric);
    t.metric = text::metric_from_string(metric);
  } else {
    t.metric = text::default_metric(t.kind);
  }
}

}  // namespace tfs::config
