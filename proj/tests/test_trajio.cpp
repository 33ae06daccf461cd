#include <doctest.h>

#include <random>
#include <sstream>

#include <json.hpp>

#include "avp/sim.hpp"
#include "avp/trajio.hpp"
#include "test_util.hpp"

using namespace avp;
using namespace avp::trajio;

namespace {

Trajectory make_traj(const std::string& id, int source, int target, sim::WaypointMode mode,
                     int n_steps, avp::Rng& rng) {
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  std::uniform_real_distribution<double> g(0.0, 1.0);
  Trajectory t;
  t.episode_id = id;
  t.camera_id = "cam0";
  t.task = {source, target, mode, 0, 0};
  for (int i = 0; i < n_steps; ++i) {
    TrajectoryStep s;
    s.timestamp = 0.05 * i;
    s.proprio.ee_pos = {u(rng), u(rng), std::abs(u(rng))};
    s.proprio.gripper_cmd = g(rng);
    s.proprio.gripper_meas = g(rng);
    if (i % 2 == 0) s.obs_ref = "obs/" + id + ".avpo#" + std::to_string(i);
    t.steps.push_back(s);
  }
  return t;
}

void check_traj_equal(const Trajectory& a, const Trajectory& b) {
  CHECK(a.episode_id == b.episode_id);
  CHECK(a.camera_id == b.camera_id);
  CHECK(a.task.source_cell == b.task.source_cell);
  CHECK(a.task.target_cell == b.task.target_cell);
  CHECK(a.task.waypoint_mode == b.task.waypoint_mode);
  REQUIRE(a.steps.size() == b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    CHECK(a.steps[i].timestamp == b.steps[i].timestamp);
    CHECK(a.steps[i].proprio.ee_pos.x == b.steps[i].proprio.ee_pos.x);
    CHECK(a.steps[i].proprio.ee_pos.y == b.steps[i].proprio.ee_pos.y);
    CHECK(a.steps[i].proprio.ee_pos.z == b.steps[i].proprio.ee_pos.z);
    CHECK(a.steps[i].proprio.gripper_cmd == b.steps[i].proprio.gripper_cmd);
    CHECK(a.steps[i].proprio.gripper_meas == b.steps[i].proprio.gripper_meas);
    CHECK(a.steps[i].obs_ref == b.steps[i].obs_ref);
  }
}

render::RasterImage random_image(avp::Rng& rng, int c, int h, int w) {
  render::RasterImage img = render::RasterImage::filled(c, h, w, 0.0f);
  std::uniform_real_distribution<float> u(-2.0f, 2.0f);
  for (float& v : img.data) v = u(rng);
  return img;
}

LabeledSample random_sample(avp::Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  LabeledSample s;
  s.observation = random_image(rng, 3, 8, 8);
  s.raw_observation = random_image(rng, 3, 8, 8);
  s.proprio.ee_pos = {u(rng), u(rng), u(rng)};
  s.proprio.gripper_cmd = 0.25;
  s.proprio.gripper_meas = 0.75;
  s.instruction = {90, static_cast<int>(uniform_int(rng, 90)), static_cast<int>(uniform_int(rng, 90))};
  s.primitive_gt.stage = uniform_int(rng, 2) ? supervision::Stage::Place : supervision::Stage::Pick;
  s.primitive_gt.cell_u = static_cast<int>(uniform_int(rng, 32));
  s.primitive_gt.cell_v = static_cast<int>(uniform_int(rng, 32));
  s.primitive_gt.cell_index = s.primitive_gt.cell_v * 32 + s.primitive_gt.cell_u;
  s.primitive_gt.anchor = {u(rng) * 30 + 32, u(rng) * 30 + 32, 0.5 + std::abs(u(rng))};
  s.action_chunk = learn::ActionChunk::zeros(2);
  for (double& v : s.action_chunk.a) v = u(rng) * 0.015;
  s.stage_index = static_cast<int>(uniform_int(rng, 4));
  return s;
}

void check_sample_equal(const LabeledSample& a, const LabeledSample& b) {
  CHECK(a.observation == b.observation);
  CHECK(a.raw_observation == b.raw_observation);
  CHECK(a.proprio.ee_pos.x == b.proprio.ee_pos.x);
  CHECK(a.proprio.gripper_cmd == b.proprio.gripper_cmd);
  CHECK(a.proprio.gripper_meas == b.proprio.gripper_meas);
  CHECK(a.instruction == b.instruction);
  CHECK(a.primitive_gt.stage == b.primitive_gt.stage);
  CHECK(a.primitive_gt.cell_u == b.primitive_gt.cell_u);
  CHECK(a.primitive_gt.cell_v == b.primitive_gt.cell_v);
  CHECK(a.primitive_gt.cell_index == b.primitive_gt.cell_index);
  CHECK(a.primitive_gt.anchor.u == b.primitive_gt.anchor.u);
  CHECK(a.primitive_gt.anchor.v == b.primitive_gt.anchor.v);
  CHECK(a.primitive_gt.anchor.depth == b.primitive_gt.anchor.depth);
  CHECK(a.action_chunk == b.action_chunk);
  CHECK(a.stage_index == b.stage_index);
}

}  // namespace

TEST_CASE("trajectory log round trip") {
  auto rng = avp::make_rng(71);
  std::vector<Trajectory> trajs;
  trajs.push_back(make_traj("ep000", 3, 41, sim::WaypointMode::TwoStage, 7, rng));
  trajs.push_back(make_traj("ep001", 88, 12, sim::WaypointMode::Direct, 5, rng));

  std::stringstream ss;
  write_trajectory_log(trajs, ss);
  auto back = read_trajectory_log(ss);
  REQUIRE(back.size() == 2);
  check_traj_equal(back[0], trajs[0]);
  check_traj_equal(back[1], trajs[1]);
}

TEST_CASE("trajectory log regroups interleaved episodes by id") {
  auto rng = avp::make_rng(72);
  std::vector<Trajectory> trajs;
  trajs.push_back(make_traj("a", 0, 1, sim::WaypointMode::TwoStage, 3, rng));
  trajs.push_back(make_traj("b", 2, 3, sim::WaypointMode::Direct, 3, rng));
  std::stringstream ss;
  write_trajectory_log(trajs, ss);

  // Shuffle the record lines (keep the header first).
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(ss, line)) lines.push_back(line);
  REQUIRE(lines.size() == 7);
  std::swap(lines[1], lines[4]);
  std::swap(lines[2], lines[6]);
  std::stringstream mixed;
  for (const auto& l : lines) mixed << l << "\n";

  auto back = read_trajectory_log(mixed);
  REQUIRE(back.size() == 2);
  // Grouped by episode and re-sorted by timestamp regardless of line order.
  for (const auto& t : back) {
    const Trajectory& want = t.episode_id == "a" ? trajs[0] : trajs[1];
    check_traj_equal(t, want);
  }
}

TEST_CASE("trajectory log rejects malformed input") {
  auto ok_record = [](double ts, double grip) {
    nlohmann::ordered_json j;
    j["episode_id"] = "e";
    j["camera_id"] = "c";
    j["t"] = ts;
    j["ee"] = {0.1, 0.2, 0.3};
    j["grip_cmd"] = grip;
    j["grip_meas"] = grip;
    j["obs_ref"] = nullptr;
    j["task"] = {{"source_cell", 1}, {"target_cell", 2}, {"waypoint_mode", "direct"}};
    return j.dump();
  };
  std::string header = "{\"schema_version\": 1}\n";

  SUBCASE("missing header") {
    std::stringstream ss(ok_record(0, 1) + "\n");
    CHECK_THROWS_AS(read_trajectory_log(ss), SchemaMismatch);
  }
  SUBCASE("wrong schema version") {
    std::stringstream ss("{\"schema_version\": 2}\n" + ok_record(0, 1) + "\n");
    CHECK_THROWS_AS(read_trajectory_log(ss), SchemaMismatch);
  }
  SUBCASE("invalid json line") {
    std::stringstream ss(header + "{not json\n");
    CHECK_THROWS_AS(read_trajectory_log(ss), MalformedRecord);
  }
  SUBCASE("gripper outside [0,1]") {
    std::stringstream ss(header + ok_record(0, 1.5) + "\n");
    CHECK_THROWS_AS(read_trajectory_log(ss), MalformedRecord);
  }
  SUBCASE("duplicate timestamp") {
    std::stringstream ss(header + ok_record(0, 1) + "\n" + ok_record(0, 1) + "\n");
    CHECK_THROWS_AS(read_trajectory_log(ss), NonMonotonicTime);
  }
  SUBCASE("single-step episode") {
    std::stringstream ss(header + ok_record(0, 1) + "\n");
    CHECK_THROWS_AS(read_trajectory_log(ss), MalformedRecord);
  }
  SUBCASE("episode switches task mid-log") {
    std::string second = ok_record(1, 1);
    second.replace(second.find("\"source_cell\":1"), 15, "\"source_cell\":7");
    std::stringstream ss(header + ok_record(0, 1) + "\n" + second + "\n");
    CHECK_THROWS_AS(read_trajectory_log(ss), MalformedRecord);
  }
  SUBCASE("missing field") {
    std::string rec = ok_record(0, 1);
    rec.replace(rec.find("\"grip_cmd\""), 10, "\"grip_xxx\"");
    std::stringstream ss(header + rec + "\n");
    CHECK_THROWS_AS(read_trajectory_log(ss), MalformedRecord);
  }
}

TEST_CASE("calibration round trip is exact") {
  CameraModel cam = sim::default_camera();
  std::stringstream ss;
  write_calibration(cam, ss);
  CameraModel back = read_calibration(ss);
  CHECK(back.camera_id == cam.camera_id);
  CHECK(back.intrinsics.fx == cam.intrinsics.fx);
  CHECK(back.intrinsics.fy == cam.intrinsics.fy);
  CHECK(back.intrinsics.cx == cam.intrinsics.cx);
  CHECK(back.intrinsics.cy == cam.intrinsics.cy);
  CHECK(back.image_width == cam.image_width);
  CHECK(back.image_height == cam.image_height);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) CHECK(back.extrinsic.rotation(r, c) == cam.extrinsic.rotation(r, c));
  CHECK(back.extrinsic.translation.x == cam.extrinsic.translation.x);
  CHECK(back.extrinsic.translation.y == cam.extrinsic.translation.y);
  CHECK(back.extrinsic.translation.z == cam.extrinsic.translation.z);
}

TEST_CASE("calibration tolerates comments and rejects bad content") {
  CameraModel cam = sim::default_camera();
  std::stringstream ss;
  write_calibration(cam, ss);
  std::string text = ss.str();

  SUBCASE("comments and blank lines are skipped") {
    std::stringstream in("# camera file\n\n" + text + "\n# trailing\n");
    CHECK(read_calibration(in).camera_id == cam.camera_id);
  }
  SUBCASE("missing field") {
    std::string t = text;
    t.replace(t.find("fx ="), 4, "fq =");
    std::stringstream in(t);
    CHECK_THROWS_AS(read_calibration(in), MissingField);
  }
  SUBCASE("short extrinsic") {
    std::string t = text.substr(0, text.rfind(','));  // drop the last matrix entry
    std::stringstream in(t + "\n");
    CHECK_THROWS_AS(read_calibration(in), MalformedRecord);
  }
  SUBCASE("non-rotation block") {
    std::stringstream in(
        "camera_id = c\nfx = 90\nfy = 90\ncx = 32\ncy = 32\n"
        "image_width = 64\nimage_height = 64\n"
        "extrinsic = 2,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1\n");
    CHECK_THROWS_AS(read_calibration(in), BadRotation);
  }
  SUBCASE("bad bottom row") {
    std::stringstream in(
        "camera_id = c\nfx = 90\nfy = 90\ncx = 32\ncy = 32\n"
        "image_width = 64\nimage_height = 64\n"
        "extrinsic = 1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,1,1\n");
    CHECK_THROWS_AS(read_calibration(in), MalformedRecord);
  }
  SUBCASE("line without equals") {
    std::stringstream in("camera_id cam\n");
    CHECK_THROWS_AS(read_calibration(in), MalformedRecord);
  }
}

TEST_CASE("dataset shard round trip is bit-exact") {
  auto rng = avp::make_rng(73);
  std::vector<LabeledSample> samples;
  for (int i = 0; i < 3; ++i) samples.push_back(random_sample(rng));

  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_dataset(samples, ss);

  SUBCASE("vector reader") {
    auto back = read_dataset(ss);
    REQUIRE(back.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) check_sample_equal(back[i], samples[i]);
  }
  SUBCASE("streaming reader sees the same bytes") {
    std::size_t i = 0;
    read_dataset_stream(ss, [&](LabeledSample&& s) {
      check_sample_equal(s, samples[i]);
      ++i;
    });
    CHECK(i == samples.size());
  }
  SUBCASE("streaming writer produces identical output") {
    std::stringstream ss2(std::ios::in | std::ios::out | std::ios::binary);
    DatasetWriter w(ss2, samples.size());
    for (const auto& s : samples) w.add(s);
    w.finish();
    CHECK(ss2.str() == ss.str());
  }
}

TEST_CASE("dataset shard detects corruption") {
  auto rng = avp::make_rng(74);
  std::vector<LabeledSample> samples{random_sample(rng)};
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_dataset(samples, ss);
  std::string bytes = ss.str();

  SUBCASE("flipped checksum byte") {
    bytes.back() ^= 0x5a;
    std::stringstream in(bytes, std::ios::in | std::ios::binary);
    CHECK_THROWS_AS(read_dataset(in), ChecksumMismatch);
  }
  SUBCASE("flipped payload byte") {
    bytes[bytes.size() / 2] ^= 0x01;
    std::stringstream in(bytes, std::ios::in | std::ios::binary);
    CHECK_THROWS(read_dataset(in));  // checksum or a stricter structural error
  }
  SUBCASE("truncation") {
    std::stringstream in(bytes.substr(0, bytes.size() - 9), std::ios::in | std::ios::binary);
    CHECK_THROWS_AS(read_dataset(in), TruncatedFile);
  }
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    std::stringstream in(bytes, std::ios::in | std::ios::binary);
    CHECK_THROWS_AS(read_dataset(in), SchemaMismatch);
  }
  SUBCASE("unsupported version") {
    bytes[4] = 9;
    std::stringstream in(bytes, std::ios::in | std::ios::binary);
    CHECK_THROWS_AS(read_dataset(in), SchemaMismatch);
  }
}

TEST_CASE("dataset writer enforces the declared count") {
  auto rng = avp::make_rng(75);
  LabeledSample s = random_sample(rng);

  SUBCASE("finish before all samples written") {
    std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
    DatasetWriter w(ss, 2);
    w.add(s);
    CHECK_THROWS_AS(w.finish(), Error);
  }
  SUBCASE("add beyond the declared count") {
    std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
    DatasetWriter w(ss, 1);
    w.add(s);
    CHECK_THROWS_AS(w.add(s), Error);
    w.finish();
  }
  SUBCASE("double finish") {
    std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
    DatasetWriter w(ss, 0);
    w.finish();
    CHECK_THROWS_AS(w.finish(), Error);
  }
}

TEST_CASE("metrics report renders fixed columns and two-decimal rates") {
  harness::MetricsTable table;
  harness::MetricsRow none;
  none.config_name = "none";
  none.instr_rate = 80.0;
  none.pick_rate = 75.5;
  none.place_rate = 78.0;
  none.avg_rate = (none.instr_rate + none.pick_rate + none.place_rate) / 3.0;
  none.seeds.push_back({1, 80.0, 75.5, 78.0, 77.8333333});
  harness::MetricsRow box;
  box.config_name = "box";
  box.instr_rate = 84.0;
  box.pick_rate = 83.0;
  box.place_rate = 83.0;
  box.avg_rate = 83.0 + 1.0 / 3.0;
  table.rows = {none, box};
  table.supervision_drops.push_back({"ep007", 12, "off_image"});
  table.config_echo = "counts.train_episodes = 1\nname = \"quoted\"";

  std::stringstream ss;
  write_metrics_report(table, ss);
  std::string text = ss.str();

  auto doc = nlohmann::json::parse(text);
  CHECK(doc["schema"] == "avp-metrics-v1");
  REQUIRE(doc["columns"].size() == 4);
  CHECK(doc["columns"][0] == "Instr.");
  CHECK(doc["columns"][1] == "Pick");
  CHECK(doc["columns"][2] == "Place");
  CHECK(doc["columns"][3] == "Ave.");
  REQUIRE(doc["rows"].size() == 2);
  CHECK(doc["rows"][0]["config_name"] == "none");  // insertion order kept
  CHECK(doc["rows"][1]["config_name"] == "box");
  CHECK(doc["rows"][0]["seeds"][0]["seed"] == 1);
  CHECK(doc["supervision_drops"][0]["episode_id"] == "ep007");
  CHECK(doc["supervision_drops"][0]["step"] == 12);
  CHECK(doc["config_echo"] == table.config_echo);

  // Rates are serialized with exactly two decimals.
  CHECK(text.find("\"pick_rate\": 75.50") != std::string::npos);
  CHECK(text.find("\"avg_rate\": 77.83") != std::string::npos);
  CHECK(text.find("\"avg_rate\": 83.33") != std::string::npos);
  CHECK(doc["rows"][0]["avg_rate"] == doctest::Approx((80.0 + 75.5 + 78.0) / 3.0).epsilon(1e-4));
}

TEST_CASE("metrics report with empty table is still valid json") {
  harness::MetricsTable table;
  std::stringstream ss;
  write_metrics_report(table, ss);
  auto doc = nlohmann::json::parse(ss.str());
  CHECK(doc["rows"].is_array());
  CHECK(doc["rows"].empty());
  CHECK(doc["supervision_drops"].empty());
}
