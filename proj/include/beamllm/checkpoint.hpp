#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamllm/parameter.hpp"

namespace beamllm {

inline constexpr const char* kCheckpointMagic = "BRCKPT1";

struct CheckpointEntry {
  std::string name;
  Shape shape;
  bool trainable = true;
  std::uint64_t offset = 0;  // bytes from the start of the blob section
};

struct Checkpoint {
  nlohmann::json meta;
  std::vector<CheckpointEntry> entries;
  std::vector<Tensor> tensors;
};

// Layout:
//   BRCKPT1\n
//   {"blob_bytes":..,"meta":{..},"params":[{"name","offset","shape","trainable"},..]}\n
//   little-endian float64 values of every parameter, in manifest order
std::string encode_checkpoint(const ParameterSet& params, const nlohmann::json& meta);
/// Several sets written back to back, in order.
std::string encode_checkpoint(const std::vector<const ParameterSet*>& sets, const nlohmann::json& meta);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     const nlohmann::json& meta);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies tensors into `params`; names, shapes and trainable flags must match
/// one-to-one (ErrorKind::load otherwise).
void load_parameters(const Checkpoint& ckpt, ParameterSet& params);
void load_parameters(const Checkpoint& ckpt, const std::vector<ParameterSet*>& sets);

void write_bytes(const std::filesystem::path& path, const std::string& bytes);

}  // namespace beamllm
