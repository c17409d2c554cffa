#pragma once

#include <map>
#include <string>
#include <vector>

#include "tfs/error.hpp"
#include "tfs/model/batch.hpp"
#include "tfs/model/checkpoint.hpp"
#include "tfs/ops.hpp"
#include "tfs/rng.hpp"
#include "tfs/tensor.hpp"

namespace tfs::model {

// Hidden states of a batch: `states` is [size*seq_len × hidden], row
// b*seq_len + t holds position t of example b (position 0 is [CLS]).
template <typename T>
struct BasicHidden {
  BasicTensor<T> states;
  std::size_t size = 0;
  std::size_t seq_len = 0;

  Shape shape() const { return {size, seq_len, states.dim(1)}; }
};

// Trainable copy of a checkpoint: post-LN transformer encoder plus heads.
// Confined to one thread. The float instantiation (Model) is the production
// model; double exists for numerical checks.
template <typename T>
class BasicModel {
 public:
  explicit BasicModel(const ModelCheckpoint& ckpt)
      : config_(ckpt.config()), heads_(ckpt.heads()), head_order_(ckpt.head_order()),
        provenance_(ckpt.provenance()), seed_(ckpt.seed()), source_id_(ckpt.id()) {
    for (const auto& p : ckpt.params()) {
      std::vector<T> values(p.values.begin(), p.values.end());
      index_[p.name] = params_.size();
      names_.push_back(p.name);
      params_.push_back(BasicTensor<T>::from(p.shape, std::move(values), true));
    }
  }

  const EncoderConfig& config() const { return config_; }
  bool has_head(HeadKind k) const { return heads_.count(k) > 0; }
  int head_classes(HeadKind k) const {
    const auto it = heads_.find(k);
    if (it == heads_.end()) throw ModelError("model has no " + to_string(k) + " head");
    return it->second;
  }
  const Provenance& provenance() const { return provenance_; }
  const std::string& source_id() const { return source_id_; }

  BasicTensor<T>& param(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ModelError("model has no parameter '" + name + "'");
    return params_[it->second];
  }
  const BasicTensor<T>& param(const std::string& name) const {
    return const_cast<BasicModel*>(this)->param(name);
  }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<BasicTensor<T>>& all_parameters() { return params_; }

  // Encoder parameters plus the given heads; what an optimizer should update.
  std::vector<BasicTensor<T>> parameters(const std::vector<HeadKind>& heads) {
    std::vector<BasicTensor<T>> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const std::string& n = names_[i];
      bool keep = n.rfind("head.", 0) != 0;
      for (const HeadKind k : heads) keep = keep || n.rfind(head_param_prefix(k) + ".", 0) == 0;
      if (keep) out.push_back(params_[i]);
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p.clear_grad();
  }

  // Forward pass. Dropout is applied only when `dropout_rng` is given
  // (training mode). `attention_probs`, if given, receives one vector per
  // layer laid out [batch][head][query][key].
  BasicHidden<T> encode(const Batch& batch, Rng* dropout_rng = nullptr,
                        std::vector<std::vector<T>>* attention_probs = nullptr) const {
    const std::size_t n = batch.positions();
    if (n == 0 || batch.ids.size() != n) throw DataError("encode: malformed batch");
    if (batch.seq_len > config_.max_positions) {
      throw DataError("encode: sequence length " + std::to_string(batch.seq_len) +
                      " exceeds " + std::to_string(config_.max_positions) + " positions");
    }
    for (const TokenId id : batch.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw DataError("encode: token id " + std::to_string(id) +
                        " outside vocabulary of " + std::to_string(config_.vocab_size));
      }
    }
    std::vector<std::int32_t> positions(n), segments(n);
    for (std::size_t i = 0; i < n; ++i) {
      positions[i] = static_cast<std::int32_t>(i % batch.seq_len);
      segments[i] = batch.segments[i];
    }
    using namespace ops;
    BasicTensor<T> x = add(add(embedding(param("embeddings.token"), std::span(batch.ids)),
                               embedding(param("embeddings.position"), std::span(positions))),
                           embedding(param("embeddings.segment"), std::span(segments)));
    x = layer_norm(x, param("embeddings.norm.gain"), param("embeddings.norm.bias"));
    x = maybe_dropout(x, dropout_rng);
    if (attention_probs != nullptr) attention_probs->assign(config_.layers, {});
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      const auto qkv = linear(x, p + "attention.qkv");
      auto attended = attention(qkv, std::span(batch.attention), batch.size, batch.seq_len,
                                config_.heads,
                                attention_probs ? &(*attention_probs)[l] : nullptr);
      auto projected = maybe_dropout(linear(attended, p + "attention.output"), dropout_rng);
      x = layer_norm(add(x, projected), param(p + "attention.norm.gain"),
                     param(p + "attention.norm.bias"));
      auto ffn = linear(gelu(linear(x, p + "ffn.up")), p + "ffn.down");
      ffn = maybe_dropout(ffn, dropout_rng);
      x = layer_norm(add(x, ffn), param(p + "ffn.norm.gain"), param(p + "ffn.norm.bias"));
    }
    return {x, batch.size, batch.seq_len};
  }

  // Raw scores. Classification kinds read [CLS] and return [size × K];
  // tagging returns [size*seq_len × K]; mlm returns [size*seq_len × V].
  BasicTensor<T> head_forward(HeadKind kind, const BasicHidden<T>& hidden) const {
    if (kind == HeadKind::kMlm) return mlm_logits(hidden.states);
    require_head(kind);
    const std::string p = head_param_prefix(kind);
    BasicTensor<T> input = hidden.states;
    if (kind != HeadKind::kTokenTagging) {
      std::vector<std::size_t> cls(hidden.size);
      for (std::size_t b = 0; b < hidden.size; ++b) cls[b] = b * hidden.seq_len;
      input = ops::gather_rows(hidden.states, std::span<const std::size_t>(cls));
    }
    return ops::add_bias(ops::matmul(input, ops::transpose(param(p + ".weight"))),
                         param(p + ".bias"));
  }

  // MLM scores for selected rows of the hidden states: rows · Eᵀ + b, where E
  // is the token embedding table.
  BasicTensor<T> mlm_logits(const BasicTensor<T>& rows) const {
    require_head(HeadKind::kMlm);
    return ops::add_bias(ops::matmul(rows, ops::transpose(param("embeddings.token"))),
                         param(head_param_prefix(HeadKind::kMlm) + ".bias"));
  }

  // Immutable float copy of the current parameters.
  ModelCheckpoint snapshot(Provenance provenance) const {
    std::vector<NamedParam> params;
    params.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto d = params_[i].data();
      params.push_back({names_[i], params_[i].shape(), std::vector<float>(d.begin(), d.end())});
    }
    return ModelCheckpoint(config_, heads_, std::move(params), std::move(provenance), seed_);
  }

 private:
  void require_head(HeadKind k) const {
    if (!has_head(k)) throw ModelError("model has no " + to_string(k) + " head");
  }

  BasicTensor<T> linear(const BasicTensor<T>& x, const std::string& prefix) const {
    return ops::add_bias(ops::matmul(x, param(prefix + ".weight")), param(prefix + ".bias"));
  }

  BasicTensor<T> maybe_dropout(const BasicTensor<T>& x, Rng* rng) const {
    if (rng == nullptr || config_.dropout == 0.0f) return x;
    return ops::dropout(x, config_.dropout, *rng);
  }

  EncoderConfig config_;
  std::map<HeadKind, int> heads_;
  std::vector<HeadKind> head_order_;
  Provenance provenance_;
  std::uint64_t seed_ = 0;
  std::string source_id_;
  std::vector<std::string> names_;
  std::vector<BasicTensor<T>> params_;
  std::map<std::string, std::size_t> index_;
};

using Model = BasicModel<float>;
using Hidden = BasicHidden<float>;

}  // namespace tfs::model
