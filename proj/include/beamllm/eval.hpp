#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "beamllm/predictor.hpp"
#include "beamllm/scenario.hpp"
#include "beamllm/training.hpp"

namespace beamllm {

/// True when `label` is among the K highest scores of column `step`; on ties
/// the lower index ranks first.
bool in_top_k(const Tensor& scores, std::size_t step, std::size_t label, std::size_t k);

/// Fraction of samples whose label at `step` is in the top K of that column.
/// K outside [1, M] is a domain error.
double top_k_accuracy(std::span<const BeamPrediction> preds, std::span<const std::vector<std::size_t>> labels,
                      std::size_t k, std::size_t step);

struct TopKReport {
  std::string model;
  std::string mode;
  std::string pap;  // "on", "off" or "n/a"
  std::size_t n_test = 0;
  std::vector<std::size_t> ks;
  std::vector<std::vector<double>> per_step;  // [k index][step]

  double mean(std::size_t k_index) const;
  /// acc(step 1) - acc(step T_pred)
  double degradation(std::size_t k_index) const;
  /// Horizon-averaged accuracy for K, or a domain error if K was not evaluated.
  double mean_for(std::size_t k) const;
};

/// Top-1/3/5 (those not above M) on every window. The model horizon must match
/// `mode`.
TopKReport evaluate(Predictor& model, std::span<const WindowSample> windows, Mode mode);

/// Same report from ready-made predictions.
TopKReport report_from(std::span<const BeamPrediction> preds, std::span<const WindowSample> windows,
                       std::size_t n_beams, const std::string& model, const std::string& mode, const std::string& pap);

/// Ranks beams by their frequency in the training labels (lower index on
/// ties) and predicts that ranking at every step.
TopKReport evaluate_majority(std::span<const WindowSample> train, std::span<const WindowSample> windows,
                             std::size_t n_beams, Mode mode);

/// model,mode,pap,K,step,accuracy,n_test with steps 1..T, then "mean" and
/// "degradation" rows per K.
std::string format_metrics_csv(std::span<const TopKReport> reports);

struct ComplexityRow {
  std::string model;
  std::size_t total_params = 0;
  std::size_t trainable_params = 0;
  double mean_inference_sec = 0.0;
  std::size_t runs = 0;
};

/// Parameter counts and mean single-window inference time over `runs` warm
/// calls. Prompt caching is switched off while timing.
ComplexityRow complexity_report(Predictor& model, const Tensor& history, std::size_t runs = 1000,
                                std::size_t warmup = 10);

std::string format_complexity_csv(std::span<const ComplexityRow> rows);

}  // namespace beamllm
