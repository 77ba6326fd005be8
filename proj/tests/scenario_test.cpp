#include <algorithm>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "beamllm/error.hpp"
#include "beamllm/scenario.hpp"

using namespace beamllm;

namespace {

ScenarioConfig noiseless() {
  ScenarioConfig cfg;
  cfg.box_noise = 0.0;
  return cfg;
}

SequenceRecord ramp_record(long id, std::size_t n) {
  SequenceRecord rec;
  rec.seq_id = id;
  for (std::size_t i = 0; i < n; ++i) {
    Frame f;
    f.t = static_cast<long>(i);
    f.bbox = {0.01 * static_cast<double>(i), 0.5, 0.1, 0.2};
    f.optimal_beam = i % 32;
    rec.frames.push_back(f);
  }
  return rec;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("beamllm_" + name)).string();
}

}  // namespace

TEST(Generate, LeftToRightBeamsNeverDecrease) {
  const auto records = generate_scenario(noiseless(), 7);
  ASSERT_EQ(records.size(), 60u);
  for (const auto& rec : records) {
    ASSERT_GE(rec.frames.size(), 13u);
    for (std::size_t i = 1; i < rec.frames.size(); ++i) {
      EXPECT_GE(rec.frames[i].optimal_beam, rec.frames[i - 1].optimal_beam);
      EXPECT_GT(rec.frames[i].bbox.x_c, rec.frames[i - 1].bbox.x_c);
    }
  }
}

TEST(Generate, RightToLeftBeamsNeverIncrease) {
  ScenarioConfig cfg = noiseless();
  cfg.direction = Direction::right_to_left;
  cfg.n_passes = 10;
  for (const auto& rec : generate_scenario(cfg, 3)) {
    for (std::size_t i = 1; i < rec.frames.size(); ++i) {
      EXPECT_LE(rec.frames[i].optimal_beam, rec.frames[i - 1].optimal_beam);
    }
  }
}

TEST(Generate, StationaryVehicleIsConstant) {
  ScenarioConfig cfg = noiseless();
  cfg.speed_min = cfg.speed_max = 0.0;
  cfg.start_x = 3.0;
  cfg.max_frames = 20;
  cfg.n_passes = 2;
  for (const auto& rec : generate_scenario(cfg, 1)) {
    ASSERT_EQ(rec.frames.size(), 20u);
    for (const auto& f : rec.frames) {
      EXPECT_EQ(f.bbox, rec.frames[0].bbox);
      EXPECT_EQ(f.optimal_beam, rec.frames[0].optimal_beam);
    }
  }
}

TEST(Generate, DeterministicAndBoxesInRange) {
  EXPECT_EQ(generate_scenario(noiseless(), 5), generate_scenario(noiseless(), 5));
  ScenarioConfig noisy;
  noisy.box_noise = 0.2;
  noisy.emit_beam_powers = true;
  const auto recs = generate_scenario(noisy, 9);
  EXPECT_EQ(recs, generate_scenario(noisy, 9));
  for (const auto& rec : recs) {
    for (const auto& f : rec.frames) {
      for (double v : {f.bbox.x_c, f.bbox.y_c, f.bbox.w, f.bbox.h}) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
      EXPECT_GT(f.bbox.w, 0.0);
      ASSERT_TRUE(f.beam_powers.has_value());
      EXPECT_EQ(f.optimal_beam, argmax_lowest(*f.beam_powers));
    }
  }
}

TEST(Generate, InvalidConfig) {
  ScenarioConfig cfg;
  cfg.fov_deg = 0.0;
  EXPECT_THROW(generate_scenario(cfg, 0), Error);
  ScenarioConfig away;
  away.start_x = 1000.0;
  try {
    generate_scenario(away, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}

TEST(Config, UnknownKeysRejectedAndRoundTrip) {
  ScenarioConfig cfg;
  cfg.road_offset = 12.5;
  cfg.direction = Direction::alternate;
  cfg.start_x = -4.0;
  const ScenarioConfig back = scenario_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  try {
    scenario_config_from_json({{"n_pases", 3}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
  EXPECT_THROW(scenario_config_from_json({{"n_passes", "many"}}), Error);
  EXPECT_THROW(scenario_config_from_json({{"direction", "sideways"}}), Error);
}

TEST(NormalizeBbox, Examples) {
  const FrameMeta meta{960, 540, 3};
  const BoundingBox c = normalize_bbox({480, 270, 10, 10}, meta);
  EXPECT_DOUBLE_EQ(c.x_c, 0.5);
  EXPECT_DOUBLE_EQ(c.y_c, 0.5);
  EXPECT_EQ(normalize_bbox({480, 270, 960, 540}, meta), (BoundingBox{0.5, 0.5, 1.0, 1.0}));
  const BoundingBox d = normalize_bbox({480, 135, 96, 54}, meta);
  EXPECT_DOUBLE_EQ(d.x_c, 0.5);
  EXPECT_DOUBLE_EQ(d.y_c, 0.25);
  EXPECT_DOUBLE_EQ(d.w, 0.1);
  EXPECT_DOUBLE_EQ(d.h, 0.1);
  try {
    normalize_bbox({950, 270, 40, 10}, meta);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::validation);
  }
}

TEST(SlidingWindows, Counts) {
  EXPECT_EQ(sliding_windows(ramp_record(0, 13), 8, 5).size(), 1u);
  EXPECT_EQ(sliding_windows(ramp_record(0, 20), 8, 5).size(), 8u);
  EXPECT_TRUE(sliding_windows(ramp_record(0, 12), 8, 5).empty());
  for (std::size_t n = 0; n < 30; ++n) {
    EXPECT_EQ(sliding_windows(ramp_record(0, n), 3, 10).size(), n >= 13 ? n - 12 : 0u);
  }
  const auto w = sliding_windows(ramp_record(4, 20), 8, 5);
  EXPECT_EQ(w[2].history.shape(), (Shape{4, 8}));
  EXPECT_EQ(w[2].future_beams, (std::vector<std::size_t>{10, 11, 12, 13, 14}));
  EXPECT_DOUBLE_EQ(w[2].history(0, 0), 0.02);
  EXPECT_DOUBLE_EQ(w[2].history(3, 7), 0.2);

  SequenceRecord gap = ramp_record(1, 15);
  for (std::size_t i = 8; i < gap.frames.size(); ++i) gap.frames[i].t += 3;
  EXPECT_THROW(sliding_windows(gap, 8, 5), Error);
}

TEST(SplitDataset, PartitionAndCounts) {
  std::vector<SequenceRecord> recs;
  for (long i = 0; i < 10; ++i) recs.push_back(ramp_record(i, 15));
  const DatasetSplit s = split_dataset(recs, 11, 8, 5);
  EXPECT_EQ(s.train_ids.size(), 7u);
  EXPECT_EQ(s.val_ids.size(), 1u);
  EXPECT_EQ(s.test_ids.size(), 2u);
  EXPECT_EQ(s.train.size(), 21u);

  std::set<long> all;
  for (const auto* ids : {&s.train_ids, &s.val_ids, &s.test_ids}) all.insert(ids->begin(), ids->end());
  EXPECT_EQ(all.size(), 10u);
  for (long id : s.test_ids) EXPECT_EQ(std::count(s.train_ids.begin(), s.train_ids.end(), id), 0);

  const DatasetSplit again = split_dataset(recs, 11, 8, 5);
  EXPECT_EQ(again.train_ids, s.train_ids);
  EXPECT_EQ(again.test_ids, s.test_ids);
  recs.pop_back();
  EXPECT_THROW(split_dataset(recs, 11, 8, 5), Error);
}

TEST(Jsonl, RoundTripAndErrors) {
  ScenarioConfig cfg;
  cfg.n_passes = 5;
  cfg.emit_beam_powers = true;
  const auto recs = generate_scenario(cfg, 2);
  const std::string path = temp_path("roundtrip.jsonl");
  save_jsonl(recs, path);
  EXPECT_EQ(load_jsonl(path), recs);
  std::filesystem::remove(path);

  const std::string good = R"({"seq_id":1,"frames":[{"t":0,"bbox":[0.1,0.2,0.3,0.4],"optimal_beam":2}]})";
  EXPECT_EQ(parse_jsonl(good + "\n").size(), 1u);
  try {
    parse_jsonl(good + "\n" + R"({"seq_id":2,"frames":[{"t":0,"optimal_beam":2}]})");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::parse);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  std::string powers = "[";
  for (int m = 0; m < 32; ++m) powers += (m ? "," : "") + std::string(m == 7 ? "5.0" : "0.1");
  powers += "]";
  try {
    parse_jsonl(R"({"seq_id":3,"frames":[{"t":0,"bbox":[0.1,0.2,0.3,0.4],"beam_powers":)" + powers +
                R"(,"optimal_beam":3}]})");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::validation);
  }
  const auto derived = parse_jsonl(R"({"seq_id":3,"frames":[{"t":0,"bbox":[0.1,0.2,0.3,0.4],"beam_powers":)" + powers + "}]}");
  EXPECT_EQ(derived[0].frames[0].optimal_beam, 7u);
  EXPECT_THROW(load_jsonl(temp_path("does_not_exist.jsonl")), Error);
}
