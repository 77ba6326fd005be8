#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamllm/random.hpp"
#include "beamllm/tensor.hpp"

namespace beamllm {

/// Normalized [x_c, y_c, w, h]. The all-zero box means "no detection".
struct BoundingBox {
  double x_c = 0.0;
  double y_c = 0.0;
  double w = 0.0;
  double h = 0.0;

  bool is_sentinel() const noexcept { return x_c == 0.0 && y_c == 0.0 && w == 0.0 && h == 0.0; }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct PixelBox {
  double x_c = 0.0;
  double y_c = 0.0;
  double w = 0.0;
  double h = 0.0;
};

struct FrameMeta {
  int width = 0;
  int height = 0;
  int channels = 3;
};

struct Frame {
  long t = 0;
  BoundingBox bbox;
  std::optional<std::vector<double>> beam_powers;
  std::size_t optimal_beam = 0;
  friend bool operator==(const Frame&, const Frame&) = default;
};

struct SequenceRecord {
  long seq_id = 0;
  std::vector<Frame> frames;
  friend bool operator==(const SequenceRecord&, const SequenceRecord&) = default;
};

struct WindowSample {
  long seq_id = 0;
  std::size_t start = 0;  // index of the first history frame
  Tensor history;         // 4 x T_hist, rows x_c, y_c, w, h
  std::vector<std::size_t> future_beams;
};

struct DatasetSplit {
  std::vector<WindowSample> train, val, test;
  std::vector<long> train_ids, val_ids, test_ids;
  std::uint64_t seed = 0;
};

enum class Direction { left_to_right, right_to_left, alternate };

/// Roadside geometry. The BS (camera and array) sits at the origin at
/// camera_height; the road runs along +x at y = road_offset; the camera looks
/// along +y and the array axis is +x.
struct ScenarioConfig {
  int n_passes = 60;
  double frame_rate = 7.79;
  double speed_min = 8.0;
  double speed_max = 14.0;
  double road_offset = 20.0;
  double fov_deg = 90.0;
  double vfov_deg = 60.0;
  double camera_height = 4.0;
  double ue_height = 1.5;
  double vehicle_length = 4.5;
  double vehicle_width = 1.8;
  double vehicle_height = 1.5;
  double box_noise = 0.01;
  std::size_t n_antennas = 16;
  std::size_t n_beams = 32;
  double ref_gain = 1.0;
  Direction direction = Direction::left_to_right;
  std::optional<double> start_x;  // overrides the FOV-edge start
  int max_frames = 0;             // 0 = until the vehicle leaves the FOV
  bool emit_beam_powers = false;

  void validate() const;
};

ScenarioConfig scenario_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ScenarioConfig& cfg);

std::vector<SequenceRecord> generate_scenario(const ScenarioConfig& cfg, std::uint64_t seed);

BoundingBox normalize_bbox(const PixelBox& box, const FrameMeta& meta);

std::vector<WindowSample> sliding_windows(const SequenceRecord& rec, std::size_t t_hist, std::size_t t_pred);

DatasetSplit split_dataset(const std::vector<SequenceRecord>& records, std::uint64_t seed, std::size_t t_hist,
                           std::size_t t_pred);

std::vector<SequenceRecord> load_jsonl(const std::string& path);
void save_jsonl(const std::vector<SequenceRecord>& records, const std::string& path);
std::vector<SequenceRecord> parse_jsonl(const std::string& text);
std::string format_jsonl(const std::vector<SequenceRecord>& records);

std::size_t argmax_lowest(const std::vector<double>& values);

}  // namespace beamllm
