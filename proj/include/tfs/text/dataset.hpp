#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "tfs/error.hpp"
#include "tfs/text/tokenizer.hpp"
#include "tfs/text/vocab.hpp"

namespace tfs::text {

enum class TaskKind {
  kSingleSentenceClassification,
  kPairClassification,
  kTokenTagging,
  kMultiLabelClassification,
};

enum class Metric { kAccuracy, kBinaryF1, kSpanF1, kMicroF1 };

inline std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kSingleSentenceClassification: return "single_sentence_classification";
    case TaskKind::kPairClassification: return "pair_classification";
    case TaskKind::kTokenTagging: return "token_tagging";
    case TaskKind::kMultiLabelClassification: return "multi_label_classification";
  }
  return "?";
}

inline TaskKind task_kind_from_string(std::string_view s) {
  for (const auto k : {TaskKind::kSingleSentenceClassification, TaskKind::kPairClassification,
                       TaskKind::kTokenTagging, TaskKind::kMultiLabelClassification}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown task kind '" + std::string(s) + "'");
}

inline std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::kAccuracy: return "accuracy";
    case Metric::kBinaryF1: return "binary_f1";
    case Metric::kSpanF1: return "span_f1";
    case Metric::kMicroF1: return "micro_f1";
  }
  return "?";
}

inline Metric metric_from_string(std::string_view s) {
  for (const auto m : {Metric::kAccuracy, Metric::kBinaryF1, Metric::kSpanF1, Metric::kMicroF1}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown metric '" + std::string(s) + "'");
}

inline Metric default_metric(TaskKind k) {
  switch (k) {
    case TaskKind::kTokenTagging: return Metric::kSpanF1;
    case TaskKind::kMultiLabelClassification: return Metric::kMicroF1;
    default: return Metric::kAccuracy;
  }
}

struct TaskSpec {
  TaskKind kind = TaskKind::kSingleSentenceClassification;
  int num_classes = 2;
  Metric metric = Metric::kAccuracy;

  static TaskSpec make(TaskKind kind, int num_classes, std::optional<Metric> metric = {}) {
    TaskSpec t{kind, num_classes, metric.value_or(default_metric(kind))};
    t.validate();
    return t;
  }

  void validate() const {
    if (num_classes < 2) throw ConfigError("task: number of classes must be >= 2");
    const bool ok = [&] {
      switch (kind) {
        case TaskKind::kTokenTagging: return metric == Metric::kSpanF1 || metric == Metric::kAccuracy;
        case TaskKind::kMultiLabelClassification: return metric == Metric::kMicroF1;
        default:
          return metric == Metric::kAccuracy ||
                 (metric == Metric::kBinaryF1 && num_classes == 2);
      }
    }();
    if (!ok) {
      throw ConfigError("task: metric " + std::string(to_string(metric)) +
                        " does not apply to " + std::string(to_string(kind)));
    }
  }

  bool reads_cls() const {
    return kind != TaskKind::kTokenTagging;
  }
};

// One tokenized instance. Segment b is empty for single-sentence tasks.
// Word starts refer to segment a; tagging tasks label exactly those words.
struct Example {
  std::uint64_t id = 0;
  std::vector<TokenId> segment_a;
  std::vector<TokenId> segment_b;
  std::vector<std::uint8_t> word_starts;
  bool is_pair = false;

  // Length after adding [CLS] and one [SEP] per segment.
  std::size_t encoded_length() const {
    return 2 + segment_a.size() + (is_pair ? segment_b.size() + 1 : 0);
  }
  std::size_t num_words() const {
    std::size_t n = 0;
    for (const auto s : word_starts) n += s;
    return n;
  }
};

struct ClassLabel {
  int id = 0;
  bool operator==(const ClassLabel&) const = default;
};
// BIO tag per word: 0 = O, 2t+1 = B-type_t, 2t+2 = I-type_t.
struct TagSequence {
  std::vector<int> tags;
  bool operator==(const TagSequence&) const = default;
};
struct LabelSet {
  std::vector<int> ids;
  bool operator==(const LabelSet&) const = default;
};
using Label = std::variant<ClassLabel, TagSequence, LabelSet>;

struct LabeledExample {
  Example example;
  Label label;
};

inline constexpr std::size_t kDefaultMaxLen = 64;

// Builds an Example from tokenized segments, truncating so that the encoded
// length fits max_len: single segments from the right, pairs longest-first.
inline Example make_example(std::uint64_t id, TokenizedText a,
                            std::optional<TokenizedText> b, std::size_t max_len) {
  const std::size_t overhead = b ? 3 : 2;
  if (max_len <= overhead) throw ConfigError("max_len too small for special tokens");
  std::size_t budget = max_len - overhead;
  std::size_t len_a = a.ids.size();
  std::size_t len_b = b ? b->ids.size() : 0;
  while (len_a + len_b > budget) {
    if (len_a >= len_b) {
      --len_a;
    } else {
      --len_b;
    }
  }
  Example ex;
  ex.id = id;
  ex.segment_a.assign(a.ids.begin(), a.ids.begin() + static_cast<std::ptrdiff_t>(len_a));
  ex.word_starts.assign(a.word_starts.begin(),
                        a.word_starts.begin() + static_cast<std::ptrdiff_t>(len_a));
  ex.is_pair = b.has_value();
  if (b) ex.segment_b.assign(b->ids.begin(), b->ids.begin() + static_cast<std::ptrdiff_t>(len_b));
  return ex;
}

namespace detail {

inline const nlohmann::json& require_field(const nlohmann::json& rec, const char* key,
                                           std::size_t line) {
  if (!rec.contains(key)) {
    throw ParseError("line " + std::to_string(line) + ": missing field '" + key + "'", line);
  }
  return rec.at(key);
}

inline int checked_label(const nlohmann::json& v, int k, std::size_t line) {
  if (!v.is_number_integer()) {
    throw ParseError("line " + std::to_string(line) + ": label must be an integer", line);
  }
  const auto x = v.get<long long>();
  if (x < 0 || x >= k) {
    throw DataError("line " + std::to_string(line) + ": label " + std::to_string(x) +
                    " outside [0," + std::to_string(k) + ")");
  }
  return static_cast<int>(x);
}

inline std::string checked_string(const nlohmann::json& v, const char* key, std::size_t line) {
  if (!v.is_string()) {
    throw ParseError("line " + std::to_string(line) + ": field '" + key + "' must be a string",
                     line);
  }
  return v.get<std::string>();
}

// Parses one record. With `with_label` false, label fields are ignored.
inline LabeledExample parse_record(const nlohmann::json& rec, const TaskSpec& task,
                                   const Vocabulary& vocab, std::size_t max_len,
                                   std::uint64_t id, std::size_t line, bool with_label) {
  if (!rec.is_object()) {
    throw ParseError("line " + std::to_string(line) + ": record is not an object", line);
  }
  LabeledExample out;
  switch (task.kind) {
    case TaskKind::kSingleSentenceClassification: {
      const auto text = checked_string(require_field(rec, "text", line), "text", line);
      out.example = make_example(id, tokenize(text, vocab), std::nullopt, max_len);
      if (with_label) out.label = ClassLabel{checked_label(require_field(rec, "label", line), task.num_classes, line)};
      break;
    }
    case TaskKind::kPairClassification: {
      const auto a = checked_string(require_field(rec, "text_a", line), "text_a", line);
      const auto b = checked_string(require_field(rec, "text_b", line), "text_b", line);
      out.example = make_example(id, tokenize(a, vocab), tokenize(b, vocab), max_len);
      if (with_label) out.label = ClassLabel{checked_label(require_field(rec, "label", line), task.num_classes, line)};
      break;
    }
    case TaskKind::kTokenTagging: {
      const auto& toks = require_field(rec, "tokens", line);
      if (!toks.is_array()) {
        throw ParseError("line " + std::to_string(line) + ": 'tokens' must be an array", line);
      }
      std::vector<std::string> words;
      for (const auto& t : toks) words.push_back(checked_string(t, "tokens", line));
      out.example = make_example(id, tokenize_words(words, vocab), std::nullopt, max_len);
      if (with_label) {
        const auto& tags = require_field(rec, "tags", line);
        if (!tags.is_array() || tags.size() != words.size()) {
          throw DataError("line " + std::to_string(line) + ": |tokens| != |tags|");
        }
        TagSequence seq;
        for (const auto& t : tags) seq.tags.push_back(checked_label(t, task.num_classes, line));
        // Words dropped by truncation lose their tags.
        seq.tags.resize(out.example.num_words());
        out.label = std::move(seq);
      }
      break;
    }
    case TaskKind::kMultiLabelClassification: {
      const auto text = checked_string(require_field(rec, "text", line), "text", line);
      out.example = make_example(id, tokenize(text, vocab), std::nullopt, max_len);
      if (with_label) {
        const auto& labels = require_field(rec, "labels", line);
        if (!labels.is_array()) {
          throw ParseError("line " + std::to_string(line) + ": 'labels' must be an array", line);
        }
        LabelSet set;
        for (const auto& l : labels) set.ids.push_back(checked_label(l, task.num_classes, line));
        std::sort(set.ids.begin(), set.ids.end());
        set.ids.erase(std::unique(set.ids.begin(), set.ids.end()), set.ids.end());
        out.label = std::move(set);
      }
      break;
    }
  }
  if (out.example.segment_a.empty()) {
    throw DataError("line " + std::to_string(line) + ": record has no tokens");
  }
  return out;
}

template <typename Fn>
void for_each_jsonl(const std::string& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path);
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path + ": line " + std::to_string(line) + ": " + e.what(), line);
    }
    try {
      fn(rec, line);
    } catch (const ParseError& e) {
      throw ParseError(path + ": " + e.what(), e.line());
    } catch (const DataError& e) {
      throw DataError(path + ": " + e.what());
    }
  }
}

}  // namespace detail

// Reads a JSON Lines dataset in file order. Ids are assigned as 0-based
// record indices plus `id_offset`.
inline std::vector<LabeledExample> load_dataset(const std::string& path, const TaskSpec& task,
                                                const Vocabulary& vocab,
                                                std::size_t max_len = kDefaultMaxLen,
                                                std::uint64_t id_offset = 0) {
  std::vector<LabeledExample> out;
  detail::for_each_jsonl(path, [&](const nlohmann::json& rec, std::size_t line) {
    out.push_back(detail::parse_record(rec, task, vocab, max_len, id_offset + out.size(), line, true));
  });
  return out;
}

// Same schema; label fields are optional and ignored.
inline std::vector<Example> load_unlabeled(const std::string& path, const TaskSpec& task,
                                           const Vocabulary& vocab,
                                           std::size_t max_len = kDefaultMaxLen,
                                           std::uint64_t id_offset = 0) {
  std::vector<Example> out;
  detail::for_each_jsonl(path, [&](const nlohmann::json& rec, std::size_t line) {
    out.push_back(detail::parse_record(rec, task, vocab, max_len, id_offset + out.size(), line,
                                       false).example);
  });
  return out;
}

// Raw whitespace-joined text of every record (for vocabulary building).
inline std::vector<std::string> load_texts(const std::string& path, const TaskSpec& task) {
  std::vector<std::string> out;
  detail::for_each_jsonl(path, [&](const nlohmann::json& rec, std::size_t line) {
    switch (task.kind) {
      case TaskKind::kPairClassification:
        out.push_back(detail::checked_string(detail::require_field(rec, "text_a", line), "text_a", line));
        out.push_back(detail::checked_string(detail::require_field(rec, "text_b", line), "text_b", line));
        break;
      case TaskKind::kTokenTagging: {
        std::string joined;
        for (const auto& t : detail::require_field(rec, "tokens", line)) {
          if (!joined.empty()) joined += ' ';
          joined += detail::checked_string(t, "tokens", line);
        }
        out.push_back(std::move(joined));
        break;
      }
      default:
        out.push_back(detail::checked_string(detail::require_field(rec, "text", line), "text", line));
    }
  });
  return out;
}

inline bool label_valid(const Label& label, const TaskSpec& task, std::size_t num_words) {
  const auto in_range = [&](int v) { return v >= 0 && v < task.num_classes; };
  switch (task.kind) {
    case TaskKind::kTokenTagging: {
      const auto* seq = std::get_if<TagSequence>(&label);
      if (seq == nullptr || seq->tags.size() != num_words) return false;
      return std::all_of(seq->tags.begin(), seq->tags.end(), in_range);
    }
    case TaskKind::kMultiLabelClassification: {
      const auto* set = std::get_if<LabelSet>(&label);
      return set != nullptr && std::all_of(set->ids.begin(), set->ids.end(), in_range);
    }
    default: {
      const auto* c = std::get_if<ClassLabel>(&label);
      return c != nullptr && in_range(c->id);
    }
  }
}

}  // namespace tfs::text
