#include "beamllm/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "beamllm/channel.hpp"
#include "beamllm/error.hpp"
#include "beamllm/json_fields.hpp"

namespace beamllm {

namespace {

constexpr double kMinExtent = 1e-4;
constexpr int kMaxFramesSearched = 1'000'000;

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

std::string direction_name(Direction d) {
  switch (d) {
    case Direction::left_to_right: return "left_to_right";
    case Direction::right_to_left: return "right_to_left";
    case Direction::alternate: return "alternate";
  }
  return "left_to_right";
}

Direction parse_direction(const std::string& s) {
  if (s == "left_to_right") return Direction::left_to_right;
  if (s == "right_to_left") return Direction::right_to_left;
  if (s == "alternate") return Direction::alternate;
  throw Error(ErrorKind::config, "scenario.direction: expected left_to_right, right_to_left or alternate, got \"" + s + "\"");
}

BoundingBox project(const ScenarioConfig& cfg, double x) {
  const double fov = deg2rad(cfg.fov_deg);
  const double vfov = deg2rad(cfg.vfov_deg);
  const double rho = std::hypot(x, cfg.road_offset);
  const double dz = cfg.camera_height - cfg.ue_height;
  const double d = std::hypot(rho, dz);
  const double phi = std::atan2(x, cfg.road_offset);
  const double psi = std::atan2(dz, rho);
  // the side of the car faces the camera, so its apparent length shrinks off-axis
  const double extent = cfg.vehicle_length * std::abs(std::cos(phi)) + cfg.vehicle_width * std::abs(std::sin(phi));
  BoundingBox b;
  b.x_c = 0.5 + phi / fov;
  b.y_c = 0.5 + psi / vfov;
  b.w = 2.0 * std::atan(extent / (2.0 * d)) / fov;
  b.h = 2.0 * std::atan(cfg.vehicle_height / (2.0 * d)) / vfov;
  return b;
}

void clamp_box(BoundingBox& b) {
  b.x_c = std::clamp(b.x_c, 0.0, 1.0);
  b.y_c = std::clamp(b.y_c, 0.0, 1.0);
  b.w = std::clamp(b.w, kMinExtent, 1.0);
  b.h = std::clamp(b.h, kMinExtent, 1.0);
}

SequenceRecord generate_pass(const ScenarioConfig& cfg, const BeamCodebook& cb, int pass, std::uint64_t seed) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(pass)));
  const double speed = cfg.speed_min + (cfg.speed_max - cfg.speed_min) * rng.uniform();
  const double phase = rng.uniform();
  double sign = 1.0;
  if (cfg.direction == Direction::right_to_left || (cfg.direction == Direction::alternate && pass % 2 == 1)) {
    sign = -1.0;
  }
  const double half_fov = deg2rad(cfg.fov_deg) / 2.0;
  const double step = speed / cfg.frame_rate;
  const double x_start = cfg.start_x ? *cfg.start_x : -sign * (cfg.road_offset * std::tan(half_fov) + phase * step);

  const Vec3 bs{0.0, 0.0, cfg.camera_height};
  const Vec3 axis{1.0, 0.0, 0.0};
  SequenceRecord rec;
  rec.seq_id = pass;
  for (int k = 0; k < kMaxFramesSearched; ++k) {
    const double x = x_start + sign * step * k;
    const bool visible = std::abs(std::atan2(x, cfg.road_offset)) <= half_fov;
    if (!visible) {
      if (!rec.frames.empty()) break;
      if (speed == 0.0 || sign * x > 0.0) break;  // never enters the view
      continue;
    }
    Frame f;
    f.t = static_cast<long>(rec.frames.size());
    f.bbox = project(cfg, x);
    if (cfg.box_noise > 0.0) {
      f.bbox.x_c += rng.normal(0.0, cfg.box_noise);
      f.bbox.y_c += rng.normal(0.0, cfg.box_noise);
      f.bbox.w += rng.normal(0.0, cfg.box_noise);
      f.bbox.h += rng.normal(0.0, cfg.box_noise);
    }
    clamp_box(f.bbox);
    const ChannelSnapshot snap = los_channel(cfg.n_antennas, bs, {x, cfg.road_offset, cfg.ue_height}, axis, cfg.ref_gain, f.t);
    std::vector<double> gains = beam_gains(snap.h, cb);
    f.optimal_beam = argmax_lowest(gains);
    if (cfg.emit_beam_powers) f.beam_powers = std::move(gains);
    rec.frames.push_back(std::move(f));
    if (cfg.max_frames > 0 && static_cast<int>(rec.frames.size()) >= cfg.max_frames) break;
  }
  if (rec.frames.empty()) {
    throw Error(ErrorKind::config, "pass " + std::to_string(pass) + " never enters the camera field of view");
  }
  return rec;
}

Frame parse_frame(const nlohmann::json& j) {
  Frame f;
  f.t = j.at("t").get<long>();
  const auto& box = j.at("bbox");
  if (!box.is_array() || box.size() != 4) throw Error(ErrorKind::parse, "bbox must be an array of 4 numbers");
  f.bbox = {box[0].get<double>(), box[1].get<double>(), box[2].get<double>(), box[3].get<double>()};
  for (double v : {f.bbox.x_c, f.bbox.y_c, f.bbox.w, f.bbox.h}) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorKind::validation, "bbox component outside [0, 1]");
  }
  const auto powers = j.find("beam_powers");
  const auto label = j.find("optimal_beam");
  if (powers != j.end()) {
    f.beam_powers = powers->get<std::vector<double>>();
    if (f.beam_powers->empty()) throw Error(ErrorKind::parse, "beam_powers is empty");
    for (double v : *f.beam_powers) {
      if (!std::isfinite(v)) throw Error(ErrorKind::validation, "beam_powers has a non-finite value");
    }
    const std::size_t best = argmax_lowest(*f.beam_powers);
    if (label != j.end()) {
      const long given = label->get<long>();
      if (given < 0 || static_cast<std::size_t>(given) != best) {
        throw Error(ErrorKind::validation, "optimal_beam " + std::to_string(given) + " disagrees with argmax(beam_powers) = " +
                                               std::to_string(best));
      }
    }
    f.optimal_beam = best;
  } else {
    if (label == j.end()) throw Error(ErrorKind::parse, "frame has neither optimal_beam nor beam_powers");
    const long given = label->get<long>();
    if (given < 0) throw Error(ErrorKind::validation, "optimal_beam is negative");
    f.optimal_beam = static_cast<std::size_t>(given);
  }
  return f;
}

SequenceRecord parse_record(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorKind::parse, "expected a JSON object");
  SequenceRecord rec;
  rec.seq_id = j.at("seq_id").get<long>();
  const auto& frames = j.at("frames");
  if (!frames.is_array()) throw Error(ErrorKind::parse, "frames must be an array");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    Frame f = parse_frame(frames[i]);
    if (!rec.frames.empty() && f.t <= rec.frames.back().t) {
      throw Error(ErrorKind::validation, "frame times are not strictly increasing at frame " + std::to_string(i));
    }
    rec.frames.push_back(std::move(f));
  }
  return rec;
}

}  // namespace

std::size_t argmax_lowest(const std::vector<double>& values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

void ScenarioConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::config, "scenario." + msg); };
  if (n_passes < 1) fail("n_passes must be >= 1");
  if (!(frame_rate > 0.0)) fail("frame_rate must be positive");
  if (!(speed_min >= 0.0 && speed_max >= speed_min)) fail("speeds need 0 <= speed_min <= speed_max");
  if (!(road_offset > 0.0)) fail("road_offset must be positive");
  if (!(fov_deg > 0.0 && fov_deg < 180.0)) fail("fov_deg must be in (0, 180)");
  if (!(vfov_deg > 0.0 && vfov_deg < 180.0)) fail("vfov_deg must be in (0, 180)");
  if (!(vehicle_length > 0.0 && vehicle_width > 0.0 && vehicle_height > 0.0)) fail("vehicle dimensions must be positive");
  if (!(box_noise >= 0.0)) fail("box_noise must be >= 0");
  if (!(ref_gain > 0.0)) fail("ref_gain must be positive");
  if (n_antennas < 1 || n_beams < n_antennas) fail("need 1 <= n_antennas <= n_beams");
  if (max_frames < 0) fail("max_frames must be >= 0");
  if (speed_max == 0.0 && max_frames == 0) fail("a stationary vehicle needs max_frames > 0");
  if (start_x && !std::isfinite(*start_x)) fail("start_x must be finite");
}

ScenarioConfig scenario_config_from_json(const nlohmann::json& j) {
  ScenarioConfig cfg;
  FieldReader r(j, "scenario");
  r.read("n_passes", cfg.n_passes);
  r.read("frame_rate", cfg.frame_rate);
  r.read("speed_min", cfg.speed_min);
  r.read("speed_max", cfg.speed_max);
  r.read("road_offset", cfg.road_offset);
  r.read("fov_deg", cfg.fov_deg);
  r.read("vfov_deg", cfg.vfov_deg);
  r.read("camera_height", cfg.camera_height);
  r.read("ue_height", cfg.ue_height);
  r.read("vehicle_length", cfg.vehicle_length);
  r.read("vehicle_width", cfg.vehicle_width);
  r.read("vehicle_height", cfg.vehicle_height);
  r.read("box_noise", cfg.box_noise);
  r.read("n_antennas", cfg.n_antennas);
  r.read("n_beams", cfg.n_beams);
  r.read("ref_gain", cfg.ref_gain);
  std::string dir;
  if (r.read("direction", dir)) cfg.direction = parse_direction(dir);
  if (const auto* sx = r.child("start_x"); sx && !sx->is_null()) {
    if (!sx->is_number()) throw Error(ErrorKind::config, "scenario.start_x: expected a number or null");
    cfg.start_x = sx->get<double>();
  }
  r.read("max_frames", cfg.max_frames);
  r.read("emit_beam_powers", cfg.emit_beam_powers);
  r.finish();
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const ScenarioConfig& cfg) {
  return {{"n_passes", cfg.n_passes},
          {"frame_rate", cfg.frame_rate},
          {"speed_min", cfg.speed_min},
          {"speed_max", cfg.speed_max},
          {"road_offset", cfg.road_offset},
          {"fov_deg", cfg.fov_deg},
          {"vfov_deg", cfg.vfov_deg},
          {"camera_height", cfg.camera_height},
          {"ue_height", cfg.ue_height},
          {"vehicle_length", cfg.vehicle_length},
          {"vehicle_width", cfg.vehicle_width},
          {"vehicle_height", cfg.vehicle_height},
          {"box_noise", cfg.box_noise},
          {"n_antennas", cfg.n_antennas},
          {"n_beams", cfg.n_beams},
          {"ref_gain", cfg.ref_gain},
          {"direction", direction_name(cfg.direction)},
          {"start_x", cfg.start_x ? nlohmann::json(*cfg.start_x) : nlohmann::json(nullptr)},
          {"max_frames", cfg.max_frames},
          {"emit_beam_powers", cfg.emit_beam_powers}};
}

std::vector<SequenceRecord> generate_scenario(const ScenarioConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const BeamCodebook cb = dft_codebook(cfg.n_antennas, cfg.n_beams);
  std::vector<SequenceRecord> out;
  out.reserve(static_cast<std::size_t>(cfg.n_passes));
  for (int p = 0; p < cfg.n_passes; ++p) out.push_back(generate_pass(cfg, cb, p, seed));
  return out;
}

BoundingBox normalize_bbox(const PixelBox& box, const FrameMeta& meta) {
  if (meta.width <= 0 || meta.height <= 0 || meta.channels <= 0) {
    throw Error(ErrorKind::validation, "frame metadata needs positive width, height and channels");
  }
  const double W = meta.width;
  const double H = meta.height;
  constexpr double tol = 1e-9;
  const bool inside = box.w >= 0.0 && box.h >= 0.0 && box.x_c - box.w / 2.0 >= -tol && box.x_c + box.w / 2.0 <= W + tol &&
                      box.y_c - box.h / 2.0 >= -tol && box.y_c + box.h / 2.0 <= H + tol;
  if (!inside) throw Error(ErrorKind::validation, "pixel box falls outside the image");
  BoundingBox b{box.x_c / W, box.y_c / H, box.w / W, box.h / H};
  b.x_c = std::clamp(b.x_c, 0.0, 1.0);
  b.y_c = std::clamp(b.y_c, 0.0, 1.0);
  b.w = std::clamp(b.w, 0.0, 1.0);
  b.h = std::clamp(b.h, 0.0, 1.0);
  return b;
}

std::vector<WindowSample> sliding_windows(const SequenceRecord& rec, std::size_t t_hist, std::size_t t_pred) {
  if (t_hist == 0 || t_pred == 0) throw Error(ErrorKind::config, "window needs T_hist >= 1 and T_pred >= 1");
  const std::size_t total = t_hist + t_pred;
  std::vector<WindowSample> out;
  if (rec.frames.size() < total) return out;
  for (std::size_t i = 1; i < rec.frames.size(); ++i) {
    if (rec.frames[i].t != rec.frames[i - 1].t + 1) {
      throw Error(ErrorKind::validation, "sequence " + std::to_string(rec.seq_id) + " is not contiguous at t=" +
                                             std::to_string(rec.frames[i].t));
    }
  }
  out.reserve(rec.frames.size() - total + 1);
  for (std::size_t s = 0; s + total <= rec.frames.size(); ++s) {
    WindowSample w;
    w.seq_id = rec.seq_id;
    w.start = s;
    w.history = Tensor({4, t_hist});
    for (std::size_t k = 0; k < t_hist; ++k) {
      const BoundingBox& b = rec.frames[s + k].bbox;
      w.history(0, k) = b.x_c;
      w.history(1, k) = b.y_c;
      w.history(2, k) = b.w;
      w.history(3, k) = b.h;
    }
    for (std::size_t k = 0; k < t_pred; ++k) w.future_beams.push_back(rec.frames[s + t_hist + k].optimal_beam);
    out.push_back(std::move(w));
  }
  return out;
}

DatasetSplit split_dataset(const std::vector<SequenceRecord>& records, std::uint64_t seed, std::size_t t_hist,
                           std::size_t t_pred) {
  if (records.size() < 10) {
    throw Error(ErrorKind::config, "split needs at least 10 sequences, got " + std::to_string(records.size()));
  }
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n = records.size();
  const std::size_t n_train = n * 7 / 10;
  const std::size_t n_val = n / 10;

  DatasetSplit split;
  split.seed = seed;
  for (std::size_t k = 0; k < n; ++k) {
    const SequenceRecord& rec = records[order[k]];
    auto& windows = k < n_train ? split.train : (k < n_train + n_val ? split.val : split.test);
    auto& ids = k < n_train ? split.train_ids : (k < n_train + n_val ? split.val_ids : split.test_ids);
    ids.push_back(rec.seq_id);
    for (auto& w : sliding_windows(rec, t_hist, t_pred)) windows.push_back(std::move(w));
  }
  return split;
}

std::vector<SequenceRecord> parse_jsonl(const std::string& text) {
  std::vector<SequenceRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_record(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::parse, "line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.kind(), "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::string format_jsonl(const std::vector<SequenceRecord>& records) {
  std::string out;
  for (const auto& rec : records) {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : rec.frames) {
      nlohmann::json jf = {{"t", f.t}, {"bbox", {f.bbox.x_c, f.bbox.y_c, f.bbox.w, f.bbox.h}}};
      if (f.beam_powers) jf["beam_powers"] = *f.beam_powers;
      jf["optimal_beam"] = f.optimal_beam;
      frames.push_back(std::move(jf));
    }
    out += nlohmann::json{{"seq_id", rec.seq_id}, {"frames", std::move(frames)}}.dump();
    out += '\n';
  }
  return out;
}

std::vector<SequenceRecord> load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open dataset " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_jsonl(ss.str());
}

void save_jsonl(const std::vector<SequenceRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write dataset " + path);
  out << format_jsonl(records);
  if (!out) throw Error(ErrorKind::io, "write failed for " + path);
}

}  // namespace beamllm
