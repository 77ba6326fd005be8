#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamllm/parameter.hpp"
#include "beamllm/tape.hpp"

namespace beamllm {

/// Per-step beam scores: logits as an M x T_pred matrix.
struct BeamPrediction {
  Tensor scores;

  std::size_t n_beams() const { return scores.dim(0); }
  std::size_t horizon() const { return scores.dim(1); }
  /// Softmax over beams, column by column.
  Tensor probabilities() const;
};

/// Argmax over beams at every step; the lowest index wins ties.
std::vector<std::size_t> predict_beams(const BeamPrediction& pred);

/// Common interface of the BeamLLM model and the recurrent baselines.
class Predictor {
 public:
  virtual ~Predictor() = default;

  virtual std::string kind() const = 0;
  virtual std::size_t t_hist() const = 0;
  virtual std::size_t t_pred() const = 0;
  virtual std::size_t n_beams() const = 0;

  /// Parameters updated by the optimizer.
  virtual ParameterSet& trainable() = 0;
  virtual std::size_t total_params() const = 0;
  std::size_t trainable_params() { return trainable().trainable_count(); }

  /// Logits for a batch of 4 x T_hist histories, one row per (sample, step):
  /// row b * T_pred + j holds sample b at future step j. Shape (B*T_pred) x M.
  virtual Var forward_batch(Tape& tape, std::span<const Tensor* const> histories) = 0;

  /// Architecture description stored in checkpoints.
  virtual nlohmann::json describe() const = 0;
  virtual void save(const std::filesystem::path& path) const = 0;
  virtual void load(const std::filesystem::path& path) = 0;

  /// Value-only prediction of one window.
  BeamPrediction predict(const Tensor& history);
  /// Value-only predictions in chunks, for evaluation.
  std::vector<BeamPrediction> predict_all(std::span<const Tensor* const> histories, std::size_t chunk = 64);
};

}  // namespace beamllm
