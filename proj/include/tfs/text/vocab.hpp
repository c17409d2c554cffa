#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tfs/error.hpp"

namespace tfs::text {

using TokenId = std::int32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kClsId = 2;
inline constexpr TokenId kSepId = 3;
inline constexpr TokenId kMaskId = 4;
inline constexpr TokenId kNumSpecial = 5;

inline constexpr std::array<std::string_view, 5> kSpecialTokens = {
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

inline constexpr std::string_view kContinuationPrefix = "##";

inline bool is_special(TokenId id) { return id >= 0 && id < kNumSpecial; }

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (const char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

// Token <-> id bijection. Ids 0-4 are always the special tokens.
class Vocabulary {
 public:
  Vocabulary() {
    for (const auto s : kSpecialTokens) append(std::string(s));
  }

  // Tokens in id order; the first five must be the special tokens.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < kSpecialTokens.size()) {
      throw DataError("vocabulary: fewer than five entries");
    }
    for (std::size_t i = 0; i < kSpecialTokens.size(); ++i) {
      if (tokens[i] != kSpecialTokens[i]) {
        throw DataError("vocabulary: line " + std::to_string(i + 1) + " must be " +
                        std::string(kSpecialTokens[i]));
      }
    }
    Vocabulary v;
    for (std::size_t i = kSpecialTokens.size(); i < tokens.size(); ++i) {
      if (tokens[i].empty()) {
        throw DataError("vocabulary: empty token on line " + std::to_string(i + 1));
      }
      if (v.contains(tokens[i])) {
        throw DataError("vocabulary: duplicate token '" + tokens[i] + "' on line " +
                        std::to_string(i + 1));
      }
      v.append(tokens[i]);
    }
    return v;
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("vocabulary: cannot open " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return from_tokens(tokens);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("vocabulary: cannot write " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  // Id of a non-special token, or -1. Special tokens are not matchable from
  // text, so raw input can never produce [MASK] or the other specials.
  TokenId lookup_piece(const std::string& piece) const {
    const auto it = index_.find(piece);
    if (it == index_.end() || is_special(it->second)) return -1;
    return it->second;
  }

  TokenId id(const std::string& token) const {
    const auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

 private:
  void append(std::string token) {
    index_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(token));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Specials first, then tokens with count >= min_count by descending count,
// ties broken lexicographically, truncated to max_size entries in total.
// Tokens may be whole words or "##"-prefixed continuation pieces.
inline Vocabulary build_vocab(const std::vector<std::string>& corpus,
                              std::size_t min_count, std::size_t max_size) {
  if (corpus.empty()) throw DataError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus) {
    for (auto& w : split_whitespace(line)) ++counts[w];
  }
  for (const auto s : kSpecialTokens) counts.erase(std::string(s));
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [token, count] : counts) {
    if (count >= min_count) ranked.emplace_back(token, count);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens(kSpecialTokens.begin(), kSpecialTokens.end());
  for (auto& [token, count] : ranked) {
    if (tokens.size() >= max_size) break;
    tokens.push_back(token);
  }
  return Vocabulary::from_tokens(tokens);
}

}  // namespace tfs::text
