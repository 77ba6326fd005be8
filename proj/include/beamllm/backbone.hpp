#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamllm/parameter.hpp"
#include "beamllm/tape.hpp"

namespace beamllm {

struct BackboneConfig {
  std::size_t vocab_size = 1000;
  std::size_t hidden = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t max_seq = 256;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

BackboneConfig backbone_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BackboneConfig& cfg);

/// FNV-1a, 64 bit.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;

/// Lowercases, splits on whitespace and ASCII punctuation, and hashes each
/// token to 1 + fnv1a64(token) mod (vocab_size - 1). Id 0 is padding.
std::vector<std::size_t> tokenize(std::string_view text, std::size_t vocab_size);

/// Per-layer keys and values of an already-processed run of positions. A
/// context extends its `base`, so a shared prompt head is encoded once and
/// per-window tails are stacked on top of it.
struct PrefixContext {
  std::shared_ptr<const PrefixContext> base;
  std::size_t length = 0;        // rows held by this segment
  std::size_t total_length = 0;  // rows including every base segment
  std::vector<Tensor> keys;      // per layer, length x D
  std::vector<Tensor> values;

  std::size_t bytes() const noexcept;
};

using ContextPtr = std::shared_ptr<const PrefixContext>;

/// Frozen pre-norm decoder-only transformer. Every parameter is registered
/// with trainable = false under the "backbone." prefix.
class Backbone {
 public:
  explicit Backbone(const BackboneConfig& cfg);
  Backbone(const Backbone&) = delete;
  Backbone& operator=(const Backbone&) = delete;

  const BackboneConfig& config() const noexcept { return cfg_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  Parameter& embedding() noexcept { return *wte_; }
  const Tensor& embedding_table() const noexcept { return wte_->value; }

  Tensor embed_tokens(std::span<const std::size_t> ids) const;

  /// Runs `rows` (L x D embeddings) after `base` and keeps their keys/values.
  ContextPtr encode_prefix(const Tensor& rows, ContextPtr base = nullptr) const;

  /// Body rows form consecutive groups of `group_len`; group g continues
  /// contexts[g] (or starts at position 0 when `contexts` is empty or the
  /// entry is null). Returns the final-layer-normed outputs, same shape as x.
  Var forward(Tape& tape, Var x, std::size_t group_len, std::span<const ContextPtr> contexts);

  /// Convenience: plain forward of a single sequence.
  Tensor forward(const Tensor& x);
  /// Runs [prefix; body] and returns only the body rows.
  Tensor forward_with_prefix(const Tensor& prefix, const Tensor& body);

  void save(const std::filesystem::path& path) const;
  /// Loads weights written by save(); config in the file must match.
  void load(const std::filesystem::path& path);

 private:
  struct Layer {
    Parameter *ln1_g, *ln1_b, *attn_w, *attn_b, *proj_w, *proj_b;
    Parameter *ln2_g, *ln2_b, *fc_w, *fc_b, *fc2_w, *fc2_b;
  };

  BackboneConfig cfg_;
  ParameterSet params_;
  Parameter* wte_ = nullptr;
  Parameter* wpe_ = nullptr;
  Parameter* lnf_g_ = nullptr;
  Parameter* lnf_b_ = nullptr;
  std::vector<Layer> layers_;
};

}  // namespace beamllm
