#include "beamllm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "beamllm/error.hpp"

namespace beamllm {

namespace {

void put_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::string encode_checkpoint(const ParameterSet& params, const nlohmann::json& meta) {
  return encode_checkpoint(std::vector<const ParameterSet*>{&params}, meta);
}

std::string encode_checkpoint(const std::vector<const ParameterSet*>& sets, const nlohmann::json& meta) {
  nlohmann::json header;
  header["meta"] = meta;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const ParameterSet* set : sets) {
    for (const Parameter& p : *set) {
      entries.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"trainable", p.trainable}, {"offset", offset}});
      offset += 8 * p.value.size();
    }
  }
  header["params"] = std::move(entries);
  header["blob_bytes"] = offset;

  std::string out = std::string(kCheckpointMagic) + "\n" + header.dump() + "\n";
  out.reserve(out.size() + offset);
  for (const ParameterSet* set : sets) {
    for (const Parameter& p : *set) {
      for (double v : p.value.data()) put_le(out, v);
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  const std::size_t magic_end = bytes.find('\n');
  if (magic_end == std::string::npos || bytes.compare(0, magic_end, kCheckpointMagic) != 0) {
    throw Error(ErrorKind::load, "not a checkpoint: missing BRCKPT1 magic");
  }
  const std::size_t header_end = bytes.find('\n', magic_end + 1);
  if (header_end == std::string::npos) throw Error(ErrorKind::load, "checkpoint header is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(magic_end + 1, header_end - magic_end - 1));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::load, std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  Checkpoint ckpt;
  try {
    ckpt.meta = header.at("meta");
    const std::uint64_t blob_bytes = header.at("blob_bytes").get<std::uint64_t>();
    const std::size_t blob_start = header_end + 1;
    if (bytes.size() - blob_start != blob_bytes) throw Error(ErrorKind::load, "checkpoint blob size mismatch");
    const auto* blob = reinterpret_cast<const unsigned char*>(bytes.data() + blob_start);
    for (const auto& e : header.at("params")) {
      CheckpointEntry entry;
      entry.name = e.at("name").get<std::string>();
      entry.shape = e.at("shape").get<Shape>();
      entry.trainable = e.at("trainable").get<bool>();
      entry.offset = e.at("offset").get<std::uint64_t>();
      const std::size_t n = shape_size(entry.shape);
      if (entry.offset + 8 * n > blob_bytes) throw Error(ErrorKind::load, "entry " + entry.name + " overruns blob");
      std::vector<double> values(n);
      for (std::size_t i = 0; i < n; ++i) values[i] = get_le(blob + entry.offset + 8 * i);
      ckpt.tensors.emplace_back(entry.shape, std::move(values));
      ckpt.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::load, std::string("malformed checkpoint manifest: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params, const nlohmann::json& meta) {
  write_bytes(path, encode_checkpoint(params, meta));
}

void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

void load_parameters(const Checkpoint& ckpt, ParameterSet& params) {
  load_parameters(ckpt, std::vector<ParameterSet*>{&params});
}

void load_parameters(const Checkpoint& ckpt, const std::vector<ParameterSet*>& sets) {
  std::size_t total = 0;
  for (const ParameterSet* set : sets) total += set->size();
  if (ckpt.entries.size() != total) {
    throw Error(ErrorKind::load, "checkpoint has " + std::to_string(ckpt.entries.size()) + " parameters, model has " +
                                     std::to_string(total));
  }
  std::vector<Parameter*> targets;
  for (const CheckpointEntry& e : ckpt.entries) {
    Parameter* p = nullptr;
    for (ParameterSet* set : sets) {
      if (set->contains(e.name)) p = &set->get(e.name);
    }
    if (p == nullptr) throw Error(ErrorKind::load, "unknown parameter " + e.name);
    if (p->value.shape() != e.shape) {
      throw Error(ErrorKind::load, "shape mismatch for " + e.name + ": checkpoint " + shape_str(e.shape) + ", model " +
                                       shape_str(p->value.shape()));
    }
    if (p->trainable != e.trainable) throw Error(ErrorKind::load, "trainable flag mismatch for " + e.name);
    targets.push_back(p);
  }
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i]->value = ckpt.tensors[i];
}

}  // namespace beamllm
