#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamllm/gradcheck.hpp"
#include "beamllm/scenario.hpp"
#include "beamllm/training.hpp"

namespace beamllm {

/// Everything a command may need, read from one JSON file. Flags override.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string model = "beamllm";
  ScenarioConfig scenario;
  TrainConfig train;
};

/// Unknown keys anywhere are a config error. `default_seed` applies when the
/// file has no "seed".
RunConfig run_config_from_json(const nlohmann::json& j, std::uint64_t default_seed = 0);
nlohmann::json to_json(const RunConfig& cfg);

/// BEAMLLM_SEED when set and numeric, else 0. A non-numeric value is a config error.
std::uint64_t env_default_seed();

struct GradSuiteRow {
  std::string name;
  GradcheckResult result;
};

/// Finite-difference check of every trainable parameter: tiny BeamLLM with and
/// without the prompt prefix, and width-4 RNN, GRU and LSTM.
std::vector<GradSuiteRow> gradient_suite(std::uint64_t seed);

/// Runs one subcommand (gen, train, eval, ablate, gradcheck, bench). Returns
/// the process exit code; failures print a single "error: <kind>: <message>"
/// line on `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace beamllm
