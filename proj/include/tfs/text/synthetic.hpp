#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tfs/error.hpp"
#include "tfs/rng.hpp"
#include "tfs/text/dataset.hpp"
#include "tfs/text/tokenizer.hpp"
#include "tfs/text/vocab.hpp"

namespace tfs::text {

// Single-sentence classification corpus with planted class signal. Each
// class owns a disjoint set of signal words; every example mixes
// `signal_per_example` words drawn from its class's set with background
// words. With probability noise_rate the label is then resampled uniformly
// over all classes (so it may stay correct).
struct SyntheticSpec {
  std::size_t vocab_size = 200;  // content words, excluding special tokens
  int num_classes = 2;
  std::size_t min_length = 8;
  std::size_t max_length = 16;
  std::size_t num_examples = 5000;
  double noise_rate = 0.1;
  std::uint64_t seed = 0;
  std::size_t signal_words_per_class = 20;
  std::size_t signal_per_example = 3;

  void validate() const {
    if (num_classes < 2) throw ConfigError("synthetic: classes must be >= 2");
    if (min_length == 0 || min_length > max_length) {
      throw ConfigError("synthetic: need 0 < min_length <= max_length");
    }
    if (num_examples == 0) throw ConfigError("synthetic: num_examples must be positive");
    if (noise_rate < 0.0 || noise_rate > 1.0) throw ConfigError("synthetic: noise_rate in [0,1]");
    if (signal_words_per_class == 0 || signal_per_example == 0) {
      throw ConfigError("synthetic: signal sizes must be positive");
    }
    if (signal_words_per_class * static_cast<std::size_t>(num_classes) >= vocab_size) {
      throw ConfigError("synthetic: vocabulary of " + std::to_string(vocab_size) +
                        " is too small for disjoint signal sets of " +
                        std::to_string(signal_words_per_class) + " words per class");
    }
  }
};

struct SyntheticRecord {
  std::string text;
  int label = 0;       // possibly noisy
  int true_label = 0;  // class that generated the text
};

struct SyntheticCorpus {
  std::vector<std::string> words;                 // word i is "w<i>"
  std::vector<std::vector<std::size_t>> signal;   // word indices per class
  std::vector<std::size_t> background;
  std::vector<SyntheticRecord> records;
};

inline std::string synthetic_word(std::size_t i) { return "w" + std::to_string(i); }

// Word layout (signal/background assignment) depends only on
// (vocab_size, classes, signal size, layout_seed), so train/dev/test corpora
// generated with different example seeds share it.
inline SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec,
                                                 std::uint64_t layout_seed) {
  spec.validate();
  SyntheticCorpus c;
  for (std::size_t i = 0; i < spec.vocab_size; ++i) c.words.push_back(synthetic_word(i));
  std::vector<std::size_t> perm(spec.vocab_size);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng layout(layout_seed);
  layout.shuffle<std::size_t>(perm);
  const auto k = static_cast<std::size_t>(spec.num_classes);
  c.signal.resize(k);
  std::size_t next = 0;
  for (std::size_t cls = 0; cls < k; ++cls) {
    for (std::size_t j = 0; j < spec.signal_words_per_class; ++j) c.signal[cls].push_back(perm[next++]);
  }
  c.background.assign(perm.begin() + static_cast<std::ptrdiff_t>(next), perm.end());

  Rng rng(spec.seed);
  c.records.reserve(spec.num_examples);
  for (std::size_t e = 0; e < spec.num_examples; ++e) {
    const int cls = static_cast<int>(rng.below(k));
    const std::size_t len =
        spec.min_length + static_cast<std::size_t>(rng.below(spec.max_length - spec.min_length + 1));
    const std::size_t n_signal = std::min(spec.signal_per_example, len);
    std::vector<std::size_t> tokens;
    tokens.reserve(len);
    const auto& own = c.signal[static_cast<std::size_t>(cls)];
    for (std::size_t i = 0; i < n_signal; ++i) tokens.push_back(own[rng.below(own.size())]);
    for (std::size_t i = n_signal; i < len; ++i) {
      tokens.push_back(c.background[rng.below(c.background.size())]);
    }
    rng.shuffle<std::size_t>(tokens);
    SyntheticRecord rec;
    rec.true_label = cls;
    rec.label = rng.bernoulli(spec.noise_rate) ? static_cast<int>(rng.below(k)) : cls;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i > 0) rec.text += ' ';
      rec.text += c.words[tokens[i]];
    }
    c.records.push_back(std::move(rec));
  }
  return c;
}

inline SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec) {
  return generate_synthetic_corpus(spec, spec.seed);
}

// Specials followed by every synthetic word, in index order.
inline Vocabulary synthetic_vocabulary(const SyntheticSpec& spec) {
  std::vector<std::string> tokens(kSpecialTokens.begin(), kSpecialTokens.end());
  for (std::size_t i = 0; i < spec.vocab_size; ++i) tokens.push_back(synthetic_word(i));
  return Vocabulary::from_tokens(tokens);
}

// Tokenized examples with ids 0..n-1, using the observed (possibly noisy)
// labels, or the generating labels when `true_labels` is set.
inline std::vector<LabeledExample> synthetic_examples(const SyntheticCorpus& corpus,
                                                      const Vocabulary& vocab,
                                                      std::size_t max_len = kDefaultMaxLen,
                                                      bool true_labels = false) {
  std::vector<LabeledExample> out;
  out.reserve(corpus.records.size());
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    const auto& r = corpus.records[i];
    out.push_back({make_example(i, tokenize(r.text, vocab), std::nullopt, max_len),
                   ClassLabel{true_labels ? r.true_label : r.label}});
  }
  return out;
}

inline std::string to_jsonl(const std::vector<SyntheticRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += nlohmann::json{{"text", r.text}, {"label", r.label}}.dump();
    out += '\n';
  }
  return out;
}

}  // namespace tfs::text
