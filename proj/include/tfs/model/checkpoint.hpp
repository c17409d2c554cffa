#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tfs/error.hpp"
#include "tfs/rng.hpp"
#include "tfs/tensor.hpp"
#include "tfs/text/dataset.hpp"

namespace tfs::model {

using text::TaskKind;

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ff = 128;
  std::size_t max_positions = 64;
  float dropout = 0.1f;

  void validate() const {
    if (vocab_size <= static_cast<std::size_t>(text::kNumSpecial)) {
      throw ConfigError("encoder: vocab_size must exceed the special tokens");
    }
    if (hidden == 0 || layers == 0 || heads == 0 || ff == 0 || max_positions == 0) {
      throw ConfigError("encoder: all dimensions must be positive");
    }
    if (hidden % heads != 0) {
      throw ConfigError("encoder: hidden size " + std::to_string(hidden) +
                        " not divisible by " + std::to_string(heads) + " heads");
    }
    if (!(dropout >= 0.0f && dropout < 1.0f)) throw ConfigError("encoder: dropout in [0,1)");
  }

  bool operator==(const EncoderConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"hidden", c.hidden}, {"layers", c.layers},
       {"heads", c.heads}, {"ff", c.ff}, {"max_positions", c.max_positions},
       {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("hidden").get_to(c.hidden);
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  j.at("ff").get_to(c.ff);
  j.at("max_positions").get_to(c.max_positions);
  j.at("dropout").get_to(c.dropout);
}

enum class HeadKind {
  kSingleSentenceClassification,
  kPairClassification,
  kTokenTagging,
  kMultiLabelClassification,
  kMlm,
};

inline HeadKind head_for(TaskKind k) {
  switch (k) {
    case TaskKind::kSingleSentenceClassification: return HeadKind::kSingleSentenceClassification;
    case TaskKind::kPairClassification: return HeadKind::kPairClassification;
    case TaskKind::kTokenTagging: return HeadKind::kTokenTagging;
    case TaskKind::kMultiLabelClassification: return HeadKind::kMultiLabelClassification;
  }
  return HeadKind::kMlm;
}

inline std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::kSingleSentenceClassification:
    case HeadKind::kPairClassification:
    case HeadKind::kTokenTagging:
    case HeadKind::kMultiLabelClassification:
      return std::string(text::to_string(static_cast<TaskKind>(static_cast<int>(k))));
    case HeadKind::kMlm: return "mlm";
  }
  return "?";
}

inline HeadKind head_kind_from_string(std::string_view s) {
  if (s == "mlm") return HeadKind::kMlm;
  try {
    return head_for(text::task_kind_from_string(s));
  } catch (const ConfigError&) {
    throw CheckpointError("unknown head kind '" + std::string(s) + "'");
  }
}

// Tags: random_init, tapt, finetuned, student_round_<r>. Lineage lists the
// ancestor tags oldest first; a child's lineage is its parent's lineage plus
// the parent's tag.
struct Provenance {
  std::string tag = "random_init";
  std::vector<std::string> lineage;
  std::string parent_id;
  std::string labeler_id;   // checkpoint that produced the pseudo labels
  std::string labeler_tag;
  std::vector<std::string> fresh_heads;  // heads initialized (not inherited) here

  bool operator==(const Provenance&) const = default;
};

inline void to_json(nlohmann::json& j, const Provenance& p) {
  j = {{"tag", p.tag}, {"lineage", p.lineage}, {"parent_id", p.parent_id},
       {"labeler_id", p.labeler_id}, {"labeler_tag", p.labeler_tag},
       {"fresh_heads", p.fresh_heads}};
}

inline void from_json(const nlohmann::json& j, Provenance& p) {
  j.at("tag").get_to(p.tag);
  j.at("lineage").get_to(p.lineage);
  j.at("parent_id").get_to(p.parent_id);
  j.at("labeler_id").get_to(p.labeler_id);
  j.at("labeler_tag").get_to(p.labeler_tag);
  j.at("fresh_heads").get_to(p.fresh_heads);
}

struct NamedParam {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

inline constexpr int kCheckpointFormatVersion = 1;

inline std::string head_param_prefix(HeadKind k) { return "head." + to_string(k); }

// Immutable parameter set plus metadata. Parameter order is fixed:
// embeddings, layers in order, then heads in attachment order.
class ModelCheckpoint {
 public:
  ModelCheckpoint(EncoderConfig config, std::map<HeadKind, int> heads,
                  std::vector<NamedParam> params, Provenance provenance, std::uint64_t seed)
      : config_(config), heads_(std::move(heads)), params_(std::move(params)),
        provenance_(std::move(provenance)), seed_(seed) {
    validate();
    id_ = compute_id();
  }

  const EncoderConfig& config() const { return config_; }
  const std::map<HeadKind, int>& heads() const { return heads_; }
  bool has_head(HeadKind k) const { return heads_.count(k) > 0; }
  int head_classes(HeadKind k) const {
    const auto it = heads_.find(k);
    if (it == heads_.end()) throw ModelError("checkpoint has no " + to_string(k) + " head");
    return it->second;
  }
  const std::vector<NamedParam>& params() const { return params_; }
  const NamedParam& param(const std::string& name) const {
    for (const auto& p : params_) {
      if (p.name == name) return p;
    }
    throw ModelError("checkpoint has no parameter '" + name + "'");
  }
  const Provenance& provenance() const { return provenance_; }
  std::uint64_t seed() const { return seed_; }
  int format_version() const { return kCheckpointFormatVersion; }
  // Content hash over parameter names, shapes and bytes.
  const std::string& id() const { return id_; }

  // Same parameters (bit-exact), names and order.
  bool same_parameters(const ModelCheckpoint& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& a = params_[i];
      const auto& b = other.params_[i];
      if (a.name != b.name || a.shape != b.shape ||
          std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) != 0) {
        return false;
      }
    }
    return true;
  }

  bool same_encoder(const ModelCheckpoint& other) const {
    for (const auto& p : params_) {
      if (p.name.rfind("head.", 0) == 0) continue;
      const auto& q = other.param(p.name);
      if (q.shape != p.shape ||
          std::memcmp(p.values.data(), q.values.data(), p.values.size() * sizeof(float)) != 0) {
        return false;
      }
    }
    return true;
  }

  // Expected parameter shapes implied by the config and heads.
  static std::vector<std::pair<std::string, Shape>> layout(const EncoderConfig& c,
                                                           const std::map<HeadKind, int>& heads,
                                                           const std::vector<HeadKind>& order) {
    std::vector<std::pair<std::string, Shape>> out;
    const std::size_t i = c.hidden;
    out.push_back({"embeddings.token", {c.vocab_size, i}});
    out.push_back({"embeddings.position", {c.max_positions, i}});
    out.push_back({"embeddings.segment", {2, i}});
    out.push_back({"embeddings.norm.gain", {i}});
    out.push_back({"embeddings.norm.bias", {i}});
    for (std::size_t l = 0; l < c.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      out.push_back({p + "attention.qkv.weight", {i, 3 * i}});
      out.push_back({p + "attention.qkv.bias", {3 * i}});
      out.push_back({p + "attention.output.weight", {i, i}});
      out.push_back({p + "attention.output.bias", {i}});
      out.push_back({p + "attention.norm.gain", {i}});
      out.push_back({p + "attention.norm.bias", {i}});
      out.push_back({p + "ffn.up.weight", {i, c.ff}});
      out.push_back({p + "ffn.up.bias", {c.ff}});
      out.push_back({p + "ffn.down.weight", {c.ff, i}});
      out.push_back({p + "ffn.down.bias", {i}});
      out.push_back({p + "ffn.norm.gain", {i}});
      out.push_back({p + "ffn.norm.bias", {i}});
    }
    for (const HeadKind k : order) {
      const std::string p = head_param_prefix(k);
      if (k == HeadKind::kMlm) {
        out.push_back({p + ".bias", {c.vocab_size}});
      } else {
        const auto n = static_cast<std::size_t>(heads.at(k));
        out.push_back({p + ".weight", {n, i}});
        out.push_back({p + ".bias", {n}});
      }
    }
    return out;
  }

  // Head kinds in the order their parameters appear.
  std::vector<HeadKind> head_order() const {
    std::vector<HeadKind> order;
    for (const auto& p : params_) {
      if (p.name.rfind("head.", 0) != 0) continue;
      const auto dot = p.name.find('.', 5);
      const HeadKind k = head_kind_from_string(p.name.substr(5, dot - 5));
      if (std::find(order.begin(), order.end(), k) == order.end()) order.push_back(k);
    }
    return order;
  }

 private:
  void validate() const {
    config_.validate();
    for (const auto& [k, n] : heads_) {
      if (k == HeadKind::kMlm) {
        if (static_cast<std::size_t>(n) != config_.vocab_size) {
          throw CheckpointError("mlm head size must equal the vocabulary size");
        }
      } else if (n < 2) {
        throw CheckpointError("head " + to_string(k) + " needs at least 2 classes");
      }
    }
    const auto order = head_order();
    for (const HeadKind k : order) {
      if (!heads_.count(k)) throw CheckpointError("parameters for undeclared head " + to_string(k));
    }
    if (order.size() != heads_.size()) {
      throw CheckpointError("declared heads and head parameters disagree");
    }
    const auto expected = layout(config_, heads_, order);
    if (expected.size() != params_.size()) {
      throw CheckpointError("checkpoint has " + std::to_string(params_.size()) +
                            " parameters, configuration implies " +
                            std::to_string(expected.size()));
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto& p = params_[i];
      if (p.name != expected[i].first || p.shape != expected[i].second) {
        throw CheckpointError("parameter " + std::to_string(i) + " is " + p.name +
                              shape_str(p.shape) + ", expected " + expected[i].first +
                              shape_str(expected[i].second));
      }
      if (p.values.size() != shape_numel(p.shape)) {
        throw CheckpointError("parameter " + p.name + " has the wrong number of values");
      }
    }
  }

  std::string compute_id() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : params_) {
      h = fnv1a({reinterpret_cast<const unsigned char*>(p.name.data()), p.name.size()}, h);
      for (const std::size_t d : p.shape) {
        const std::uint64_t d64 = d;
        h = fnv1a({reinterpret_cast<const unsigned char*>(&d64), sizeof d64}, h);
      }
      h = fnv1a({reinterpret_cast<const unsigned char*>(p.values.data()),
                 p.values.size() * sizeof(float)},
                h);
    }
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << h;
    return os.str();
  }

  EncoderConfig config_;
  std::map<HeadKind, int> heads_;
  std::vector<NamedParam> params_;
  Provenance provenance_;
  std::uint64_t seed_ = 0;
  std::string id_;
};

namespace detail {

inline void init_param(NamedParam& p, Rng& rng) {
  const std::string& n = p.name;
  const auto ends_with = [&](std::string_view s) {
    return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0;
  };
  if (ends_with(".gain")) {
    std::fill(p.values.begin(), p.values.end(), 1.0f);
  } else if (ends_with(".bias")) {
    std::fill(p.values.begin(), p.values.end(), 0.0f);
  } else {
    for (float& v : p.values) v = static_cast<float>(rng.truncated_normal(0.02));
  }
}

inline std::uint64_t head_seed(std::uint64_t seed, HeadKind k) {
  const std::string name = to_string(k);
  return derive_seed(
      {seed, 0x68656164ULL,
       fnv1a({reinterpret_cast<const unsigned char*>(name.data()), name.size()})});
}

}  // namespace detail

// Fresh weights: truncated normal (sigma 0.02) matrices, zero biases, unit
// layer-norm gains. Encoder and each head draw from separate streams, so the
// encoder does not depend on which heads are requested.
inline ModelCheckpoint init_model(const EncoderConfig& config,
                                  const std::vector<std::pair<HeadKind, int>>& heads,
                                  std::uint64_t seed) {
  config.validate();
  std::map<HeadKind, int> head_map;
  std::vector<HeadKind> order;
  for (const auto& [k, n] : heads) {
    if (!head_map.emplace(k, k == HeadKind::kMlm ? static_cast<int>(config.vocab_size) : n)
             .second) {
      throw ConfigError("duplicate head " + to_string(k));
    }
    order.push_back(k);
  }
  std::vector<NamedParam> params;
  Rng encoder_rng(derive_seed({seed, 0x656e63ULL}));
  for (auto& [name, shape] : ModelCheckpoint::layout(config, head_map, order)) {
    NamedParam p{name, shape, std::vector<float>(shape_numel(shape))};
    if (name.rfind("head.", 0) != 0) detail::init_param(p, encoder_rng);
    params.push_back(std::move(p));
  }
  for (const HeadKind k : order) {
    Rng head_rng(detail::head_seed(seed, k));
    for (auto& p : params) {
      if (p.name.rfind(head_param_prefix(k) + ".", 0) == 0) detail::init_param(p, head_rng);
    }
  }
  Provenance prov;
  for (const HeadKind k : order) prov.fresh_heads.push_back(to_string(k));
  return ModelCheckpoint(config, std::move(head_map), std::move(params), std::move(prov), seed);
}

// Returns `ckpt` with a freshly initialized head appended (or `ckpt` itself
// if the head already exists with the same size).
inline ModelCheckpoint with_head(const ModelCheckpoint& ckpt, HeadKind kind, int classes,
                                 std::uint64_t seed) {
  if (kind == HeadKind::kMlm) classes = static_cast<int>(ckpt.config().vocab_size);
  if (ckpt.has_head(kind)) {
    if (ckpt.head_classes(kind) != classes) {
      throw ModelError("existing " + to_string(kind) + " head has " +
                       std::to_string(ckpt.head_classes(kind)) + " classes, requested " +
                       std::to_string(classes));
    }
    return ckpt;
  }
  auto heads = ckpt.heads();
  heads[kind] = classes;
  auto params = ckpt.params();
  Rng rng(detail::head_seed(seed, kind));
  for (auto& [name, shape] : ModelCheckpoint::layout(ckpt.config(), heads, {kind})) {
    if (name.rfind("head.", 0) != 0) continue;
    NamedParam p{name, shape, std::vector<float>(shape_numel(shape))};
    detail::init_param(p, rng);
    params.push_back(std::move(p));
  }
  Provenance prov = ckpt.provenance();
  prov.fresh_heads.push_back(to_string(kind));
  return ModelCheckpoint(ckpt.config(), std::move(heads), std::move(params), std::move(prov),
                         ckpt.seed());
}

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

}  // namespace detail

// Writes <dir>/manifest.json and <dir>/params.bin.
inline void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw CheckpointError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : ckpt.params()) params.push_back({{"name", p.name}, {"shape", p.shape}});
  nlohmann::json heads = nlohmann::json::object();
  for (const auto& [k, n] : ckpt.heads()) heads[to_string(k)] = n;
  const nlohmann::json manifest = {
      {"format_version", ckpt.format_version()},
      {"id", ckpt.id()},
      {"config", ckpt.config()},
      {"heads", heads},
      {"params", params},
      {"provenance", ckpt.provenance()},
      {"seed", ckpt.seed()},
  };
  {
    std::ofstream out(dir / "params.bin", std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + (dir / "params.bin").string());
    for (const auto& p : ckpt.params()) {
      for (const float v : p.values) {
        const std::uint32_t bits = detail::to_little_endian(std::bit_cast<std::uint32_t>(v));
        out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
      }
    }
    if (!out) throw CheckpointError("write failed for " + (dir / "params.bin").string());
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
  if (!out) throw CheckpointError("write failed for " + (dir / "manifest.json").string());
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw CheckpointError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  try {
    const int version = manifest.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw CheckpointError("checkpoint format version " + std::to_string(version) +
                            " is not supported (expected " +
                            std::to_string(kCheckpointFormatVersion) + ")");
    }
    const auto config = manifest.at("config").get<EncoderConfig>();
    std::map<HeadKind, int> heads;
    for (const auto& [name, n] : manifest.at("heads").items()) {
      heads[head_kind_from_string(name)] = n.get<int>();
    }
    std::vector<NamedParam> params;
    std::size_t total = 0;
    for (const auto& p : manifest.at("params")) {
      NamedParam np{p.at("name").get<std::string>(), p.at("shape").get<Shape>(), {}};
      if (np.shape.empty()) throw CheckpointError("parameter " + np.name + " has no shape");
      total += shape_numel(np.shape);
      params.push_back(std::move(np));
    }
    std::ifstream bin(dir / "params.bin", std::ios::binary | std::ios::ate);
    if (!bin) throw CheckpointError("cannot open " + (dir / "params.bin").string());
    const auto bytes = static_cast<std::size_t>(bin.tellg());
    if (bytes != total * sizeof(float)) {
      throw CheckpointError("params.bin holds " + std::to_string(bytes) +
                            " bytes, manifest implies " + std::to_string(total * sizeof(float)));
    }
    bin.seekg(0);
    for (auto& p : params) {
      p.values.resize(shape_numel(p.shape));
      for (float& v : p.values) {
        std::uint32_t bits = 0;
        bin.read(reinterpret_cast<char*>(&bits), sizeof bits);
        v = std::bit_cast<float>(detail::to_little_endian(bits));
      }
    }
    if (!bin) throw CheckpointError("short read from " + (dir / "params.bin").string());
    ModelCheckpoint ckpt(config, std::move(heads), std::move(params),
                         manifest.at("provenance").get<Provenance>(),
                         manifest.at("seed").get<std::uint64_t>());
    if (manifest.contains("id") && manifest.at("id").get<std::string>() != ckpt.id()) {
      throw CheckpointError("checkpoint content does not match its recorded id");
    }
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("invalid manifest in " + dir.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("invalid manifest config: ") + e.what());
  }
}

}  // namespace tfs::model
