#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamllm/backbone.hpp"
#include "beamllm/predictor.hpp"

namespace beamllm {

struct RevinStats {
  double mean = 0.0;
  double stdev = 1.0;
};

inline constexpr double kRevinEps = 1e-5;

/// (x - mean) / sqrt(var + eps) with the population variance.
std::vector<double> revin_normalize(std::span<const double> row, RevinStats& stats, double eps = kRevinEps);
std::vector<double> revin_invert(std::span<const double> normalized, const RevinStats& stats);

struct PatchConfig {
  std::size_t t_hist = 8;
  std::size_t patch_len = 4;
  std::size_t stride = 2;

  void validate() const;
  /// floor((T_hist - L_p) / S) + 2
  std::size_t n_patches() const;
};

/// Pads the row with `stride` copies of its last value and cuts windows of
/// patch_len at the stride. Returns n_patches x patch_len.
Tensor patchify(std::span<const double> row, const PatchConfig& cfg);

struct PromptText {
  std::string dataset_desc;
  std::string task_desc;
  std::string stats_desc;
  /// stats_desc split into its fixed label and the per-window values.
  std::string stats_label;
  std::string stats_values;

  std::string full() const;
};

inline constexpr const char* kChannelNames[4] = {"x_c", "y_c", "w", "h"};

/// Fixed template. The first two parts depend only on the channel and the
/// window sizes; stats_desc carries min, max, median, trend and the three
/// lags with the largest absolute autocorrelation of that channel.
/// Everything up to stats_values is shared by all windows of a channel.
PromptText build_prompt(const Tensor& history, std::size_t channel, std::size_t t_pred);

/// Renders with 4 significant digits.
std::string format_4g(double v);

struct BeamLlmConfig {
  std::size_t t_hist = 8;
  std::size_t t_pred = 5;
  std::size_t patch_len = 4;
  std::size_t stride = 2;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t n_prototypes = 64;
  std::size_t n_beams = 32;
  std::size_t fuse_hidden1 = 16;
  std::size_t fuse_hidden2 = 32;
  bool pap = true;
  std::uint64_t seed = 0;
  BackboneConfig backbone;
  /// Upper bound on memory held by cached prompt contexts.
  std::size_t cache_budget_bytes = std::size_t{512} << 20;

  void validate() const;
  PatchConfig patch() const { return {t_hist, patch_len, stride}; }
};

BeamLlmConfig beamllm_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BeamLlmConfig& cfg);

/// RevIN -> patching -> patch embedding -> cross-attention reprogramming
/// against text prototypes -> [prompt prefix] -> frozen backbone -> flatten
/// projection per channel -> per-step fusion MLP over the 4 channels.
class BeamLlmModel final : public Predictor {
 public:
  explicit BeamLlmModel(const BeamLlmConfig& cfg);

  std::string kind() const override { return "beamllm"; }
  std::size_t t_hist() const override { return cfg_.t_hist; }
  std::size_t t_pred() const override { return cfg_.t_pred; }
  std::size_t n_beams() const override { return cfg_.n_beams; }
  ParameterSet& trainable() override { return params_; }
  std::size_t total_params() const override;
  Var forward_batch(Tape& tape, std::span<const Tensor* const> histories) override;
  nlohmann::json describe() const override;
  void save(const std::filesystem::path& path) const override;
  void load(const std::filesystem::path& path) override;

  const BeamLlmConfig& config() const noexcept { return cfg_; }
  Backbone& backbone() noexcept { return *backbone_; }
  void set_pap(bool on) noexcept { cfg_.pap = on; }
  void set_cache_enabled(bool on) noexcept { cache_enabled_ = on; }
  void clear_cache();
  std::size_t cache_bytes() const noexcept { return cache_bytes_; }

  /// Text prototypes E' = W_proto^T E (V' x D).
  Var prototypes(Tape& tape);
  /// Reprogrammed patch rows (n x D) for embedded patches (n x d_model).
  Var reprogram(Tape& tape, Var embedded, Var protos);
  /// Attention weights of head k for the given embedded patches (n x V').
  Tensor attention_weights(const Tensor& embedded, std::size_t head);

 private:
  ContextPtr head_context(std::size_t channel);
  ContextPtr prompt_context(const Tensor& history, std::size_t channel);

  BeamLlmConfig cfg_;
  std::unique_ptr<Backbone> backbone_;
  ParameterSet params_;
  Parameter *patch_w_, *patch_b_, *proto_w_, *out_w_, *out_b_, *flat_w_, *flat_b_;
  std::vector<Parameter*> wq_, wk_, wv_;
  std::vector<Parameter*> fuse_w_, fuse_b_;

  bool cache_enabled_ = true;
  std::vector<ContextPtr> head_cache_;
  std::map<std::vector<std::size_t>, ContextPtr> tail_cache_;
  std::size_t cache_bytes_ = 0;
};

}  // namespace beamllm
