#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "tfs/error.hpp"
#include "tfs/text/dataset.hpp"

namespace tfs::model {

using text::TokenId;

// Padded, encoded mini-batch: [CLS] a [SEP] (b [SEP]) [PAD]...
// All per-position arrays have size * seq_len entries, row-major.
struct Batch {
  std::size_t size = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> segments;
  std::vector<std::uint8_t> attention;   // 1 = real token, 0 = PAD
  std::vector<std::uint8_t> word_starts; // first piece of a segment-a word
  std::vector<std::uint8_t> special;     // CLS, SEP or PAD

  std::size_t positions() const { return size * seq_len; }

  // Flat positions of word-start pieces for example b, in word order.
  std::vector<std::size_t> word_positions(std::size_t b) const {
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < seq_len; ++t) {
      if (word_starts[b * seq_len + t]) out.push_back(b * seq_len + t);
    }
    return out;
  }
};

inline Batch make_batch(std::span<const text::Example* const> examples) {
  if (examples.empty()) throw DataError("make_batch: empty batch");
  Batch batch;
  batch.size = examples.size();
  for (const auto* ex : examples) batch.seq_len = std::max(batch.seq_len, ex->encoded_length());
  const std::size_t n = batch.positions();
  batch.ids.assign(n, text::kPadId);
  batch.segments.assign(n, 0);
  batch.attention.assign(n, 0);
  batch.word_starts.assign(n, 0);
  batch.special.assign(n, 1);
  for (std::size_t b = 0; b < examples.size(); ++b) {
    const auto& ex = *examples[b];
    std::size_t t = b * batch.seq_len;
    auto put = [&](TokenId id, std::uint8_t segment, bool special, std::uint8_t word_start) {
      batch.ids[t] = id;
      batch.segments[t] = segment;
      batch.attention[t] = 1;
      batch.special[t] = special ? 1 : 0;
      batch.word_starts[t] = word_start;
      ++t;
    };
    put(text::kClsId, 0, true, 0);
    for (std::size_t i = 0; i < ex.segment_a.size(); ++i) {
      put(ex.segment_a[i], 0, false, i < ex.word_starts.size() ? ex.word_starts[i] : 0);
    }
    put(text::kSepId, 0, true, 0);
    if (ex.is_pair) {
      for (const TokenId id : ex.segment_b) put(id, 1, false, 0);
      put(text::kSepId, 1, true, 0);
    }
  }
  return batch;
}

inline Batch make_batch(std::span<const text::Example> examples) {
  std::vector<const text::Example*> ptrs;
  ptrs.reserve(examples.size());
  for (const auto& ex : examples) ptrs.push_back(&ex);
  return make_batch(std::span<const text::Example* const>(ptrs));
}

}  // namespace tfs::model
