#include "avp/trajio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "avp/binio.hpp"

namespace avp::trajio {

namespace {

using nlohmann::ordered_json;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

bool finite3(const geometry::Point3& p) {
  return std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z);
}

// ---- trajectory log ----

const char* mode_name(sim::WaypointMode m) {
  return m == sim::WaypointMode::TwoStage ? "two_stage" : "direct";
}

sim::WaypointMode mode_from_name(const std::string& s, int line_no) {
  if (s == "two_stage") return sim::WaypointMode::TwoStage;
  if (s == "direct") return sim::WaypointMode::Direct;
  throw MalformedRecord("line " + std::to_string(line_no) + ": unknown waypoint_mode '" + s + "'");
}

struct RawRecord {
  std::string episode_id;
  std::string camera_id;
  TrajectoryStep step;
  sim::TaskSpec task;
};

RawRecord parse_record(const ordered_json& j, int line_no) {
  auto where = [line_no] { return "line " + std::to_string(line_no) + ": "; };
  auto need = [&](const char* key) -> const ordered_json& {
    auto it = j.find(key);
    if (it == j.end()) throw MalformedRecord(where() + "missing field '" + key + "'");
    return *it;
  };
  RawRecord r;
  try {
    r.episode_id = need("episode_id").get<std::string>();
    r.camera_id = need("camera_id").get<std::string>();
    r.step.timestamp = need("t").get<double>();
    const auto& ee = need("ee");
    if (!ee.is_array() || ee.size() != 3) throw MalformedRecord(where() + "'ee' must be [x,y,z]");
    r.step.proprio.ee_pos = {ee[0].get<double>(), ee[1].get<double>(), ee[2].get<double>()};
    r.step.proprio.gripper_cmd = need("grip_cmd").get<double>();
    r.step.proprio.gripper_meas = need("grip_meas").get<double>();
    const auto& obs = need("obs_ref");
    if (!obs.is_null()) r.step.obs_ref = obs.get<std::string>();
    const auto& task = need("task");
    r.task.source_cell = task.at("source_cell").get<int>();
    r.task.target_cell = task.at("target_cell").get<int>();
    r.task.waypoint_mode = mode_from_name(task.at("waypoint_mode").get<std::string>(), line_no);
  } catch (const MalformedRecord&) {
    throw;
  } catch (const std::exception& e) {
    throw MalformedRecord(where() + e.what());
  }
  if (!std::isfinite(r.step.timestamp)) throw MalformedRecord(where() + "non-finite timestamp");
  if (!finite3(r.step.proprio.ee_pos)) throw MalformedRecord(where() + "non-finite ee position");
  for (double g : {r.step.proprio.gripper_cmd, r.step.proprio.gripper_meas}) {
    if (!(g >= 0.0 && g <= 1.0))
      throw MalformedRecord(where() + "gripper aperture " + fmt_double(g) + " outside [0,1]");
  }
  return r;
}

}  // namespace

std::vector<Trajectory> read_trajectory_log(std::istream& in) {
  std::vector<Trajectory> out;
  std::map<std::string, std::size_t> index;  // episode_id -> slot in `out`
  std::string line;
  int line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const std::exception& e) {
      throw MalformedRecord("line " + std::to_string(line_no) + ": invalid JSON: " + e.what());
    }
    if (!have_header) {
      auto it = j.find("schema_version");
      if (it == j.end())
        throw SchemaMismatch("line " + std::to_string(line_no) + ": missing schema_version header");
      if (!it->is_number_integer() || it->get<int>() != kTrajectoryLogSchemaVersion)
        throw SchemaMismatch("unsupported schema_version " + it->dump());
      have_header = true;
      continue;
    }
    RawRecord r = parse_record(j, line_no);
    auto [slot, inserted] = index.try_emplace(r.episode_id, out.size());
    if (inserted) {
      Trajectory t;
      t.episode_id = r.episode_id;
      t.camera_id = r.camera_id;
      t.task = r.task;
      out.push_back(std::move(t));
    } else {
      Trajectory& t = out[slot->second];
      if (t.camera_id != r.camera_id)
        throw MalformedRecord("line " + std::to_string(line_no) + ": episode '" + r.episode_id +
                              "' switches camera_id");
      if (t.task.source_cell != r.task.source_cell || t.task.target_cell != r.task.target_cell ||
          t.task.waypoint_mode != r.task.waypoint_mode)
        throw MalformedRecord("line " + std::to_string(line_no) + ": episode '" + r.episode_id +
                              "' switches task");
    }
    out[index[r.episode_id]].steps.push_back(std::move(r.step));
  }
  for (Trajectory& t : out) {
    std::stable_sort(t.steps.begin(), t.steps.end(),
                     [](const TrajectoryStep& a, const TrajectoryStep& b) {
                       return a.timestamp < b.timestamp;
                     });
    if (t.steps.size() < 2)
      throw MalformedRecord("episode '" + t.episode_id + "': fewer than 2 steps");
    for (std::size_t i = 1; i < t.steps.size(); ++i) {
      if (!(t.steps[i].timestamp > t.steps[i - 1].timestamp))
        throw NonMonotonicTime("episode '" + t.episode_id + "': timestamp " +
                               fmt_double(t.steps[i].timestamp) + " at step " + std::to_string(i) +
                               " does not increase");
    }
  }
  return out;
}

void write_trajectory_log(const std::vector<Trajectory>& trajs, std::ostream& out) {
  out << "{\"schema_version\": " << kTrajectoryLogSchemaVersion << "}\n";
  for (const Trajectory& t : trajs) {
    for (const TrajectoryStep& s : t.steps) {
      ordered_json j;
      j["episode_id"] = t.episode_id;
      j["camera_id"] = t.camera_id;
      j["t"] = s.timestamp;
      j["ee"] = {s.proprio.ee_pos.x, s.proprio.ee_pos.y, s.proprio.ee_pos.z};
      j["grip_cmd"] = s.proprio.gripper_cmd;
      j["grip_meas"] = s.proprio.gripper_meas;
      if (s.obs_ref.empty())
        j["obs_ref"] = nullptr;
      else
        j["obs_ref"] = s.obs_ref;
      j["task"] = {{"source_cell", t.task.source_cell},
                   {"target_cell", t.task.target_cell},
                   {"waypoint_mode", mode_name(t.task.waypoint_mode)}};
      out << j.dump() << "\n";
    }
  }
}

// ---- calibration ----

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw MalformedRecord("calibration: bad numeric value '" + s + "' for " + what);
  }
}

}  // namespace

CameraModel read_calibration(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) throw MalformedRecord("calibration: line without '=': " + t);
    kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  auto need = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw MissingField(std::string("calibration: missing field '") + key + "'");
    return it->second;
  };
  CameraModel cam;
  cam.camera_id = need("camera_id");
  cam.intrinsics.fx = parse_double(need("fx"), "fx");
  cam.intrinsics.fy = parse_double(need("fy"), "fy");
  cam.intrinsics.cx = parse_double(need("cx"), "cx");
  cam.intrinsics.cy = parse_double(need("cy"), "cy");
  cam.image_width = static_cast<int>(parse_double(need("image_width"), "image_width"));
  cam.image_height = static_cast<int>(parse_double(need("image_height"), "image_height"));
  if (cam.intrinsics.fx <= 0 || cam.intrinsics.fy <= 0)
    throw MalformedRecord("calibration: focal lengths must be > 0");
  if (cam.image_width <= 0 || cam.image_height <= 0)
    throw MalformedRecord("calibration: image dimensions must be > 0");

  std::vector<double> ext;
  {
    std::stringstream ss(need("extrinsic"));
    std::string item;
    while (std::getline(ss, item, ',')) ext.push_back(parse_double(trim(item), "extrinsic"));
  }
  if (ext.size() != 16)
    throw MalformedRecord("calibration: extrinsic needs 16 values, got " +
                          std::to_string(ext.size()));
  const double want_bottom[4] = {0, 0, 0, 1};
  for (int c = 0; c < 4; ++c) {
    if (std::abs(ext[12 + c] - want_bottom[c]) > 1e-12)
      throw MalformedRecord("calibration: extrinsic bottom row must be 0,0,0,1");
  }
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) cam.extrinsic.rotation(r, c) = ext[r * 4 + c];
  cam.extrinsic.translation = {ext[3], ext[7], ext[11]};
  if (!geometry::is_rotation(cam.extrinsic.rotation, 1e-6))
    throw BadRotation("calibration: extrinsic rotation block is not a proper rotation");
  return cam;
}

void write_calibration(const CameraModel& cam, std::ostream& out) {
  out << "camera_id = " << cam.camera_id << "\n";
  out << "fx = " << fmt_double(cam.intrinsics.fx) << "\n";
  out << "fy = " << fmt_double(cam.intrinsics.fy) << "\n";
  out << "cx = " << fmt_double(cam.intrinsics.cx) << "\n";
  out << "cy = " << fmt_double(cam.intrinsics.cy) << "\n";
  out << "image_width = " << cam.image_width << "\n";
  out << "image_height = " << cam.image_height << "\n";
  out << "extrinsic = ";
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      double v;
      if (r == 3)
        v = (c == 3) ? 1.0 : 0.0;
      else if (c == 3)
        v = (r == 0) ? cam.extrinsic.translation.x
                     : (r == 1 ? cam.extrinsic.translation.y : cam.extrinsic.translation.z);
      else
        v = cam.extrinsic.rotation(r, c);
      out << fmt_double(v);
      if (r != 3 || c != 3) out << ",";
    }
  }
  out << "\n";
}

// ---- binary shards ----

namespace {

using binio::CheckedReader;
using binio::CheckedWriter;

void write_image(CheckedWriter& w, const render::RasterImage& img) {
  w.u32(static_cast<std::uint32_t>(img.channels));
  w.u32(static_cast<std::uint32_t>(img.height));
  w.u32(static_cast<std::uint32_t>(img.width));
  for (float v : img.data) w.f32(v);
}

render::RasterImage read_image(CheckedReader& r) {
  render::RasterImage img;
  img.channels = static_cast<int>(r.u32());
  img.height = static_cast<int>(r.u32());
  img.width = static_cast<int>(r.u32());
  if (img.channels < 0 || img.height < 0 || img.width < 0 ||
      static_cast<std::uint64_t>(img.channels) * img.height * img.width > (1u << 28))
    throw MalformedRecord("shard: implausible image dimensions");
  img.data.resize(static_cast<std::size_t>(img.channels) * img.height * img.width);
  for (float& v : img.data) v = r.f32();
  return img;
}

void write_sample(CheckedWriter& w, const LabeledSample& s) {
  write_image(w, s.observation);
  write_image(w, s.raw_observation);
  w.f64(s.proprio.ee_pos.x);
  w.f64(s.proprio.ee_pos.y);
  w.f64(s.proprio.ee_pos.z);
  w.f64(s.proprio.gripper_cmd);
  w.f64(s.proprio.gripper_meas);
  w.u32(static_cast<std::uint32_t>(s.instruction.n_cells));
  w.u32(static_cast<std::uint32_t>(s.instruction.source));
  w.u32(static_cast<std::uint32_t>(s.instruction.target));
  w.u8(s.primitive_gt.stage == supervision::Stage::Pick ? 0 : 1);
  w.u32(static_cast<std::uint32_t>(s.primitive_gt.cell_u));
  w.u32(static_cast<std::uint32_t>(s.primitive_gt.cell_v));
  w.u32(static_cast<std::uint32_t>(s.primitive_gt.cell_index));
  w.f64(s.primitive_gt.anchor.u);
  w.f64(s.primitive_gt.anchor.v);
  w.f64(s.primitive_gt.anchor.depth);
  w.u32(static_cast<std::uint32_t>(s.action_chunk.horizon));
  for (double v : s.action_chunk.a) w.f64(v);
  w.u32(static_cast<std::uint32_t>(s.stage_index));
}

LabeledSample read_sample(CheckedReader& r) {
  LabeledSample s;
  s.observation = read_image(r);
  s.raw_observation = read_image(r);
  s.proprio.ee_pos = {r.f64(), r.f64(), r.f64()};
  s.proprio.gripper_cmd = r.f64();
  s.proprio.gripper_meas = r.f64();
  s.instruction.n_cells = static_cast<int>(r.u32());
  s.instruction.source = static_cast<int>(r.u32());
  s.instruction.target = static_cast<int>(r.u32());
  s.primitive_gt.stage = r.u8() == 0 ? supervision::Stage::Pick : supervision::Stage::Place;
  s.primitive_gt.cell_u = static_cast<int>(r.u32());
  s.primitive_gt.cell_v = static_cast<int>(r.u32());
  s.primitive_gt.cell_index = static_cast<int>(r.u32());
  s.primitive_gt.anchor.u = r.f64();
  s.primitive_gt.anchor.v = r.f64();
  s.primitive_gt.anchor.depth = r.f64();
  s.action_chunk.horizon = static_cast<int>(r.u32());
  if (s.action_chunk.horizon < 0 || s.action_chunk.horizon > (1 << 20))
    throw MalformedRecord("shard: implausible chunk horizon");
  s.action_chunk.a.resize(static_cast<std::size_t>(s.action_chunk.horizon) * 4);
  for (double& v : s.action_chunk.a) v = r.f64();
  s.stage_index = static_cast<int>(r.u32());
  return s;
}

constexpr char kShardMagic[4] = {'A', 'V', 'P', 'D'};
constexpr std::uint32_t kShardVersion = 1;

}  // namespace

void write_dataset(const std::vector<LabeledSample>& samples, std::ostream& out) {
  CheckedWriter w(out);
  w.bytes(kShardMagic, 4);
  w.u32(kShardVersion);
  w.u64(samples.size());
  for (const LabeledSample& s : samples) write_sample(w, s);
  w.finish();
}

void read_dataset_stream(std::istream& in, const std::function<void(LabeledSample&&)>& fn) {
  CheckedReader r(in, "shard");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kShardMagic, 4) != 0)
    throw SchemaMismatch("shard: bad magic bytes");
  std::uint32_t version = r.u32();
  if (version != kShardVersion)
    throw SchemaMismatch("shard: unsupported version " + std::to_string(version));
  std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) fn(read_sample(r));
  r.verify_digest();
}

std::vector<LabeledSample> read_dataset(std::istream& in) {
  std::vector<LabeledSample> out;
  read_dataset_stream(in, [&](LabeledSample&& s) { out.push_back(std::move(s)); });
  return out;
}

struct DatasetWriter::Impl {
  CheckedWriter w;
  std::uint64_t declared = 0;
  std::uint64_t written = 0;
  bool finished = false;
  explicit Impl(std::ostream& out) : w(out) {}
};

DatasetWriter::DatasetWriter(std::ostream& out, std::uint64_t count)
    : impl_(std::make_unique<Impl>(out)) {
  impl_->declared = count;
  impl_->w.bytes(kShardMagic, 4);
  impl_->w.u32(kShardVersion);
  impl_->w.u64(count);
}

DatasetWriter::~DatasetWriter() = default;

void DatasetWriter::add(const LabeledSample& s) {
  if (impl_->finished) throw Error("DatasetWriter: add after finish");
  if (impl_->written >= impl_->declared) throw Error("DatasetWriter: more samples than declared");
  write_sample(impl_->w, s);
  ++impl_->written;
}

void DatasetWriter::finish() {
  if (impl_->finished) throw Error("DatasetWriter: already finished");
  if (impl_->written != impl_->declared)
    throw Error("DatasetWriter: wrote " + std::to_string(impl_->written) + " of " +
                std::to_string(impl_->declared) + " declared samples");
  impl_->w.finish();
  impl_->finished = true;
}

namespace {

std::string json_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '"': o += "\\\""; break;
      case '\\': o += "\\\\"; break;
      case '\n': o += "\\n"; break;
      case '\t': o += "\\t"; break;
      case '\r': o += "\\r"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof(buf), "\\u%04x", static_cast<unsigned char>(c));
          o += buf;
        } else {
          o += c;
        }
    }
  }
  return o;
}

// Success rates always render with exactly two decimals.
std::string rate2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

void write_metrics_report(const harness::MetricsTable& metrics, std::ostream& out) {
  out << "{\n";
  out << "  \"schema\": \"avp-metrics-v1\",\n";
  out << "  \"columns\": [\"Instr.\", \"Pick\", \"Place\", \"Ave.\"],\n";
  out << "  \"rows\": [";
  for (std::size_t i = 0; i < metrics.rows.size(); ++i) {
    const auto& row = metrics.rows[i];
    out << (i ? ",\n    " : "\n    ");
    out << "{\"config_name\": \"" << json_escape(row.config_name) << "\", "
        << "\"instr_rate\": " << rate2(row.instr_rate) << ", "
        << "\"pick_rate\": " << rate2(row.pick_rate) << ", "
        << "\"place_rate\": " << rate2(row.place_rate) << ", "
        << "\"avg_rate\": " << rate2(row.avg_rate) << ", \"seeds\": [";
    for (std::size_t k = 0; k < row.seeds.size(); ++k) {
      const auto& sr = row.seeds[k];
      out << (k ? ", " : "") << "{\"seed\": " << sr.seed << ", \"instr_rate\": "
          << rate2(sr.instr_rate) << ", \"pick_rate\": " << rate2(sr.pick_rate)
          << ", \"place_rate\": " << rate2(sr.place_rate) << ", \"avg_rate\": "
          << rate2(sr.avg_rate) << "}";
    }
    out << "]}";
  }
  out << (metrics.rows.empty() ? "],\n" : "\n  ],\n");
  out << "  \"supervision_drops\": [";
  for (std::size_t i = 0; i < metrics.supervision_drops.size(); ++i) {
    const auto& d = metrics.supervision_drops[i];
    out << (i ? ",\n    " : "\n    ");
    out << "{\"episode_id\": \"" << json_escape(d.episode_id) << "\", \"step\": " << d.step
        << ", \"reason\": \"" << json_escape(d.reason) << "\"}";
  }
  out << (metrics.supervision_drops.empty() ? "],\n" : "\n  ],\n");
  out << "  \"config_echo\": \"" << json_escape(metrics.config_echo) << "\"\n";
  out << "}\n";
}

}  // namespace avp::trajio
