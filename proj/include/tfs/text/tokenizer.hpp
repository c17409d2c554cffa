#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tfs/text/vocab.hpp"

namespace tfs::text {

struct TokenizedText {
  std::vector<TokenId> ids;
  // True at the first piece of every word.
  std::vector<std::uint8_t> word_starts;

  std::size_t num_words() const {
    std::size_t n = 0;
    for (const auto s : word_starts) n += s;
    return n;
  }
};

inline constexpr std::size_t kMaxCharsPerWord = 100;

// Greedy longest-match decomposition of one word. The first piece is bare,
// later pieces carry the "##" prefix. Returns {UNK} when no decomposition
// exists.
inline std::vector<TokenId> tokenize_word(const std::string& word, const Vocabulary& vocab) {
  if (word.size() > kMaxCharsPerWord) return {kUnkId};
  std::vector<TokenId> pieces;
  std::size_t start = 0;
  while (start < word.size()) {
    std::size_t end = word.size();
    TokenId found = -1;
    while (start < end) {
      std::string piece = word.substr(start, end - start);
      if (start > 0) piece.insert(0, kContinuationPrefix);
      found = vocab.lookup_piece(piece);
      if (found >= 0) break;
      --end;
    }
    if (found < 0) return {kUnkId};
    pieces.push_back(found);
    start = end;
  }
  return pieces;
}

inline TokenizedText tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenizedText out;
  for (const auto& word : split_whitespace(text)) {
    const auto pieces = tokenize_word(word, vocab);
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      out.ids.push_back(pieces[i]);
      out.word_starts.push_back(i == 0 ? 1 : 0);
    }
  }
  return out;
}

inline TokenizedText tokenize_words(const std::vector<std::string>& words,
                                    const Vocabulary& vocab) {
  TokenizedText out;
  for (const auto& word : words) {
    const auto pieces = tokenize_word(word, vocab);
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      out.ids.push_back(pieces[i]);
      out.word_starts.push_back(i == 0 ? 1 : 0);
    }
  }
  return out;
}

// Concatenates pieces back into words, stripping continuation prefixes.
inline std::vector<std::string> detokenize(const TokenizedText& t, const Vocabulary& vocab) {
  std::vector<std::string> words;
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    std::string piece = vocab.token(t.ids[i]);
    if (!t.word_starts[i] && piece.rfind(kContinuationPrefix, 0) == 0) {
      piece.erase(0, kContinuationPrefix.size());
    }
    if (t.word_starts[i] || words.empty()) {
      words.push_back(piece);
    } else {
      words.back() += piece;
    }
  }
  return words;
}

}  // namespace tfs::text
