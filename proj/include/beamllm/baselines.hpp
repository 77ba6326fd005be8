#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamllm/predictor.hpp"

namespace beamllm {

enum class CellKind { rnn, gru, lstm };

std::string cell_name(CellKind kind);
/// "rnn", "gru" or "lstm"; anything else is a config error.
CellKind parse_cell(const std::string& name);
/// Gate blocks per cell: 1, 3, 4.
std::size_t gate_count(CellKind kind);

struct RecurrentConfig {
  CellKind kind = CellKind::lstm;
  std::size_t t_hist = 8;
  std::size_t t_pred = 5;
  std::size_t n_inputs = 4;
  std::size_t hidden = 32;
  std::size_t n_layers = 4;
  std::size_t n_beams = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

RecurrentConfig recurrent_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RecurrentConfig& cfg);

/// Parameters of one recurrent layer, two bias vectors per gate block.
std::size_t recurrent_layer_params(CellKind kind, std::size_t in, std::size_t hidden);

/// Linear input map -> stacked recurrent layers -> linear readout per future
/// step. The history is encoded column by column; each future step feeds the
/// last observed column again and reads out the top hidden state.
class RecurrentModel final : public Predictor {
 public:
  explicit RecurrentModel(const RecurrentConfig& cfg);

  std::string kind() const override { return cell_name(cfg_.kind); }
  std::size_t t_hist() const override { return cfg_.t_hist; }
  std::size_t t_pred() const override { return cfg_.t_pred; }
  std::size_t n_beams() const override { return cfg_.n_beams; }
  ParameterSet& trainable() override { return params_; }
  std::size_t total_params() const override { return params_.total_count(); }
  Var forward_batch(Tape& tape, std::span<const Tensor* const> histories) override;
  nlohmann::json describe() const override;
  void save(const std::filesystem::path& path) const override;
  void load(const std::filesystem::path& path) override;

  const RecurrentConfig& config() const noexcept { return cfg_; }

 private:
  struct Layer {
    Parameter *w_ih, *w_hh, *b_ih, *b_hh;
  };
  struct State {
    Var h;
    Var c;
  };
  Var step(Tape& tape, const Layer& layer, Var x, State& s);

  RecurrentConfig cfg_;
  ParameterSet params_;
  Parameter *in_w_, *in_b_, *out_w_, *out_b_;
  std::vector<Layer> layers_;
};

}  // namespace beamllm
