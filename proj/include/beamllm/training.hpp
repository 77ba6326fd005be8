#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamllm/optim.hpp"
#include "beamllm/predictor.hpp"
#include "beamllm/scenario.hpp"

namespace beamllm {

enum class Mode { standard, fewshot };

std::string mode_name(Mode mode);
Mode parse_mode(const std::string& name);

struct Horizon {
  std::size_t t_hist;
  std::size_t t_pred;
};
/// (8, 5) standard, (3, 10) few-shot.
Horizon horizon_of(Mode mode);
/// Mode whose horizon matches the model; config error otherwise.
Mode mode_of(const Predictor& model);

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 200;
  LrSchedule schedule;
  std::uint64_t seed = 0;
  Mode mode = Mode::standard;
  bool pap = true;

  void validate() const;
};

TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& cfg);

/// Model kinds: "beamllm", "rnn", "gru", "lstm". The horizon follows the mode;
/// BeamLLM uses L_p=4, S=2 standard and L_p=2, S=1 few-shot.
std::unique_ptr<Predictor> make_predictor(const std::string& kind, Mode mode, std::uint64_t seed, bool pap = true);
/// Rebuilds the architecture recorded in the checkpoint and loads it.
std::unique_ptr<Predictor> load_predictor(const std::filesystem::path& path);

/// Cross-entropy summed over the horizon, averaged over the batch. Labels
/// outside [0, M) are a validation error.
Var loss_batch(Tape& tape, Predictor& model, std::span<const WindowSample* const> batch);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_top1 = 0.0;
  double val_top1 = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_top1 = 0.0;
};

/// Loss and horizon-averaged top-1 of a set of windows, value-only.
struct BatchStats {
  double loss = 0.0;
  double top1 = 0.0;
};
BatchStats evaluate_loss(Predictor& model, std::span<const WindowSample> windows, std::size_t chunk = 64);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam with the step schedule, a seeded shuffle per epoch, and the
/// parameters of the best validation top-1 epoch restored at the end (earliest
/// epoch on ties). Without validation windows the last epoch is kept.
TrainResult train(Predictor& model, const DatasetSplit& split, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// epoch,lr,train_loss,val_loss,train_top1
std::string format_history_csv(const std::vector<EpochRecord>& history);

}  // namespace beamllm
