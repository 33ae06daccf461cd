#include "avp/harness.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <numbers>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "avp/binio.hpp"
#include "avp/geometry.hpp"

namespace avp::harness {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Scalar formatting/parsing. Doubles use the shortest round-trip form so the
// echo both reads well and reparses exactly.

std::string fmt_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ConfigError("config: bad number for " + key + ": '" + s + "'");
  return v;
}

long long parse_ll(const std::string& key, const std::string& s) {
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ConfigError("config: bad integer for " + key + ": '" + s + "'");
  return v;
}

int parse_int(const std::string& key, const std::string& s) {
  return static_cast<int>(parse_ll(key, s));
}

std::uint64_t parse_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ConfigError("config: bad unsigned integer for " + key + ": '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& key, const std::string& s) {
  std::vector<std::uint64_t> out;
  if (trim(s).empty()) return out;
  for (const std::string& part : split(s, ',')) out.push_back(parse_u64(key, trim(part)));
  return out;
}

std::string fmt_seed_list(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(seeds[i]);
  }
  return out;
}

geometry::Point3 parse_point3(const std::string& key, const std::string& s) {
  auto parts = split(s, ',');
  if (parts.size() != 3) throw ConfigError("config: " + key + " wants 'x,y,z'");
  return {parse_double(key, trim(parts[0])), parse_double(key, trim(parts[1])),
          parse_double(key, trim(parts[2]))};
}

std::string fmt_point3(const geometry::Point3& p) {
  return fmt_double(p.x) + "," + fmt_double(p.y) + "," + fmt_double(p.z);
}

render::Rgb parse_rgb(const std::string& key, const std::string& s) {
  auto parts = split(s, ',');
  if (parts.size() != 3) throw ConfigError("config: " + key + " wants 'r,g,b'");
  return {static_cast<float>(parse_double(key, trim(parts[0]))),
          static_cast<float>(parse_double(key, trim(parts[1]))),
          static_cast<float>(parse_double(key, trim(parts[2])))};
}

std::string fmt_rgb(const render::Rgb& c) {
  return fmt_double(c.r) + "," + fmt_double(c.g) + "," + fmt_double(c.b);
}

render::PromptType parse_prompt(const std::string& s) {
  if (s == "none") return render::PromptType::None;
  if (s == "point") return render::PromptType::Point;
  if (s == "box") return render::PromptType::Box;
  if (s == "boxmask") return render::PromptType::BoxMask;
  throw ConfigError("config: unknown prompt type '" + s + "'");
}

std::string prompt_name(render::PromptType p) {
  switch (p) {
    case render::PromptType::None: return "none";
    case render::PromptType::Point: return "point";
    case render::PromptType::Box: return "box";
    case render::PromptType::BoxMask: return "boxmask";
  }
  return "?";
}

learn::ConditioningMode parse_mode(const std::string& s) {
  if (s == "noprim") return learn::ConditioningMode::NoPrimitive;
  if (s == "primgt") return learn::ConditioningMode::PrimitiveGT;
  if (s == "primpred") return learn::ConditioningMode::PrimitivePredicted;
  throw ConfigError("config: unknown conditioning mode '" + s + "'");
}

supervision::GripperSignalKind parse_signal(const std::string& s) {
  if (s == "command") return supervision::GripperSignalKind::Command;
  if (s == "discrepancy") return supervision::GripperSignalKind::Discrepancy;
  throw ConfigError("config: unknown gripper signal '" + s + "'");
}

std::string signal_name(supervision::GripperSignalKind k) {
  return k == supervision::GripperSignalKind::Command ? "command" : "discrepancy";
}

// ---------------------------------------------------------------------------
// Config key table.

void apply_key(ExperimentConfig& c, const std::string& key, const std::string& val) {
  // sim
  if (key == "sim.board_u") c.sim.board_u = parse_int(key, val);
  else if (key == "sim.board_v") c.sim.board_v = parse_int(key, val);
  else if (key == "sim.spacing") c.sim.spacing = parse_double(key, val);
  else if (key == "sim.board_x0") c.sim.board_x0 = parse_double(key, val);
  else if (key == "sim.board_y0") c.sim.board_y0 = parse_double(key, val);
  else if (key == "sim.table_min") c.sim.table_min = parse_point3(key, val);
  else if (key == "sim.table_max") c.sim.table_max = parse_point3(key, val);
  else if (key == "sim.step_size") c.sim.step_size = parse_double(key, val);
  else if (key == "sim.grasp_tol") c.sim.grasp_tol = parse_double(key, val);
  else if (key == "sim.place_tol") c.sim.place_tol = parse_double(key, val);
  else if (key == "sim.noise") c.sim.noise = parse_double(key, val);
  else if (key == "sim.dt") c.sim.dt = parse_double(key, val);
  else if (key == "sim.piece_z") c.sim.piece_z = parse_double(key, val);
  else if (key == "sim.travel_z") c.sim.travel_z = parse_double(key, val);
  else if (key == "sim.grasp_z") c.sim.grasp_z = parse_double(key, val);
  else if (key == "sim.staging_x") c.sim.staging_x = parse_double(key, val);
  else if (key == "sim.staging_y") c.sim.staging_y = parse_double(key, val);
  else if (key == "sim.home") c.sim.home = parse_point3(key, val);
  // supervision
  else if (key == "sup.delta") c.sup.delta = parse_double(key, val);
  else if (key == "sup.grid_u") c.sup.grid_u = parse_int(key, val);
  else if (key == "sup.grid_v") c.sup.grid_v = parse_int(key, val);
  else if (key == "sup.min_stage_gap") c.sup.min_stage_gap = parse_int(key, val);
  else if (key == "sup.signal") c.sup.signal = parse_signal(val);
  else if (key == "sup.invert_kinds") c.sup.invert_kinds = parse_int(key, val) != 0;
  // render
  else if (key == "render.prompt") c.render.prompt_type = parse_prompt(val);
  else if (key == "render.alpha") c.render.alpha = parse_double(key, val);
  else if (key == "render.box_half_width") c.render.box_half_width = parse_int(key, val);
  else if (key == "render.point_radius") c.render.point_radius = parse_double(key, val);
  else if (key == "render.memory_depth") c.render.memory_depth = parse_int(key, val);
  else if (key == "render.pick_color") c.render.pick_color = parse_rgb(key, val);
  else if (key == "render.place_color") c.render.place_color = parse_rgb(key, val);
  else if (key == "render.memory_color") c.render.memory_color = parse_rgb(key, val);
  // train
  else if (key == "train.lambda") c.train.lambda = parse_double(key, val);
  else if (key == "train.lr") c.train.lr = parse_double(key, val);
  else if (key == "train.decoder_lr") c.train.decoder_lr = parse_double(key, val);
  else if (key == "train.lr_hold") c.train.lr_hold = parse_double(key, val);
  else if (key == "train.batch_size") c.train.batch_size = parse_int(key, val);
  else if (key == "train.steps") c.train.train_steps = parse_int(key, val);
  else if (key == "train.flow_steps") c.train.flow_steps = parse_int(key, val);
  else if (key == "train.expert_hidden") c.train.expert_hidden = parse_int(key, val);
  else if (key == "train.decoder_hidden") c.train.decoder_hidden = parse_int(key, val);
  else if (key == "train.horizon") c.train.horizon = parse_int(key, val);
  else if (key == "train.seed") c.train.seed = parse_u64(key, val);
  else if (key == "train.mode") c.train.mode = parse_mode(val);
  // counts
  else if (key == "counts.train_episodes") c.counts.train_episodes = parse_int(key, val);
  else if (key == "counts.eval_tasks") c.counts.eval_tasks = parse_int(key, val);
  else if (key == "counts.n_pieces") c.counts.n_pieces = parse_int(key, val);
  else if (key == "counts.seeds") c.counts.seeds = parse_seed_list(key, val);
  else if (key == "counts.data_seed") c.counts.data_seed = parse_u64(key, val);
  else if (key == "counts.eval_budget") c.counts.eval_budget = parse_int(key, val);
  // ablation overrides
  else if (key == "ablate.train_steps") c.ablate.train_steps = parse_int(key, val);
  else if (key == "ablate.seeds") c.ablate.seeds = parse_seed_list(key, val);
  // output
  else if (key == "out.dir") c.out_dir = val;
  else throw ConfigError("config: unknown key '" + key + "'");
}

void validate_config(const ExperimentConfig& c) {
  if (c.counts.seeds.empty()) throw ConfigError("config: counts.seeds must be nonempty");
  if (c.sim.board_u <= 0 || c.sim.board_v <= 0)
    throw ConfigError("config: board dimensions must be positive");
  if (c.train.lambda < 0.0) throw ConfigError("config: train.lambda must be >= 0");
  if (c.train.lr_hold < 0.0 || c.train.lr_hold > 1.0)
    throw ConfigError("config: train.lr_hold must be in [0, 1]");
  if (c.train.flow_steps < 1) throw ConfigError("config: train.flow_steps must be >= 1");
  if (c.train.horizon < 1) throw ConfigError("config: train.horizon must be >= 1");
  if (c.train.batch_size < 1) throw ConfigError("config: train.batch_size must be >= 1");
  if (c.counts.n_pieces < 1) throw ConfigError("config: counts.n_pieces must be >= 1");
  if (c.counts.eval_budget < 1) throw ConfigError("config: counts.eval_budget must be >= 1");
  if (c.out_dir.empty()) throw ConfigError("config: out.dir must be nonempty");
}

}  // namespace

ExperimentConfig default_config() { return ExperimentConfig{}; }

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    apply_key(cfg, key, val);
    seen.insert(key);
  }
  // Board geometry scales with spacing unless pinned explicitly.
  if (seen.count("sim.spacing")) {
    if (!seen.count("sim.grasp_tol")) cfg.sim.grasp_tol = 0.4 * cfg.sim.spacing;
    if (!seen.count("sim.place_tol")) cfg.sim.place_tol = 0.5 * cfg.sim.spacing;
  }
  validate_config(cfg);
  return cfg;
}

ExperimentConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config file not found: " + path);
  return parse_config(in);
}

std::string config_echo(const ExperimentConfig& c) {
  std::string o;
  auto kv = [&o](const char* k, const std::string& v) {
    o += k;
    o += " = ";
    o += v;
    o += "\n";
  };
  kv("sim.board_u", std::to_string(c.sim.board_u));
  kv("sim.board_v", std::to_string(c.sim.board_v));
  kv("sim.spacing", fmt_double(c.sim.spacing));
  kv("sim.board_x0", fmt_double(c.sim.board_x0));
  kv("sim.board_y0", fmt_double(c.sim.board_y0));
  kv("sim.table_min", fmt_point3(c.sim.table_min));
  kv("sim.table_max", fmt_point3(c.sim.table_max));
  kv("sim.step_size", fmt_double(c.sim.step_size));
  kv("sim.grasp_tol", fmt_double(c.sim.grasp_tol));
  kv("sim.place_tol", fmt_double(c.sim.place_tol));
  kv("sim.noise", fmt_double(c.sim.noise));
  kv("sim.dt", fmt_double(c.sim.dt));
  kv("sim.piece_z", fmt_double(c.sim.piece_z));
  kv("sim.travel_z", fmt_double(c.sim.travel_z));
  kv("sim.grasp_z", fmt_double(c.sim.grasp_z));
  kv("sim.staging_x", fmt_double(c.sim.staging_x));
  kv("sim.staging_y", fmt_double(c.sim.staging_y));
  kv("sim.home", fmt_point3(c.sim.home));
  kv("sup.delta", fmt_double(c.sup.delta));
  kv("sup.grid_u", std::to_string(c.sup.grid_u));
  kv("sup.grid_v", std::to_string(c.sup.grid_v));
  kv("sup.min_stage_gap", std::to_string(c.sup.min_stage_gap));
  kv("sup.signal", signal_name(c.sup.signal));
  kv("sup.invert_kinds", c.sup.invert_kinds ? "1" : "0");
  kv("render.prompt", prompt_name(c.render.prompt_type));
  kv("render.alpha", fmt_double(c.render.alpha));
  kv("render.box_half_width", std::to_string(c.render.box_half_width));
  kv("render.point_radius", fmt_double(c.render.point_radius));
  kv("render.memory_depth", std::to_string(c.render.memory_depth));
  kv("render.pick_color", fmt_rgb(c.render.pick_color));
  kv("render.place_color", fmt_rgb(c.render.place_color));
  kv("render.memory_color", fmt_rgb(c.render.memory_color));
  kv("train.lambda", fmt_double(c.train.lambda));
  kv("train.lr", fmt_double(c.train.lr));
  kv("train.decoder_lr", fmt_double(c.train.decoder_lr));
  kv("train.lr_hold", fmt_double(c.train.lr_hold));
  kv("train.batch_size", std::to_string(c.train.batch_size));
  kv("train.steps", std::to_string(c.train.train_steps));
  kv("train.flow_steps", std::to_string(c.train.flow_steps));
  kv("train.expert_hidden", std::to_string(c.train.expert_hidden));
  kv("train.decoder_hidden", std::to_string(c.train.decoder_hidden));
  kv("train.horizon", std::to_string(c.train.horizon));
  kv("train.seed", std::to_string(c.train.seed));
  kv("train.mode", learn::mode_name(c.train.mode));
  kv("counts.train_episodes", std::to_string(c.counts.train_episodes));
  kv("counts.eval_tasks", std::to_string(c.counts.eval_tasks));
  kv("counts.n_pieces", std::to_string(c.counts.n_pieces));
  kv("counts.seeds", fmt_seed_list(c.counts.seeds));
  kv("counts.data_seed", std::to_string(c.counts.data_seed));
  kv("counts.eval_budget", std::to_string(c.counts.eval_budget));
  kv("ablate.train_steps", std::to_string(c.ablate.train_steps));
  kv("ablate.seeds", fmt_seed_list(c.ablate.seeds));
  kv("out.dir", c.out_dir);
  return o;
}

learn::ModelDims model_dims(const ExperimentConfig& cfg) {
  learn::ModelDims d;
  d.n_board_cells = sim::n_cells(cfg.sim);
  d.grid_u = cfg.sup.grid_u;
  d.grid_v = cfg.sup.grid_v;
  const trajio::CameraModel& cam = cfg.sim.camera;
  d.obs_feat = 3 * (cam.image_height / 4) * (cam.image_width / 4);
  d.proprio = 5;
  d.horizon = cfg.train.horizon;
  return d;
}

learn::TrainSetup make_train_setup(const ExperimentConfig& cfg) {
  learn::TrainSetup s;
  s.train = cfg.train;
  s.render = cfg.render;
  s.sup = cfg.sup;
  s.camera = cfg.sim.camera;
  // Chunks are normalized to roughly unit scale: position deltas by the
  // simulator step size, gripper from [0,1] to [-1,1].
  for (int i = 0; i < 3; ++i) {
    s.train.action_scale[i] = cfg.sim.step_size;
    s.train.action_offset[i] = 0.0;
  }
  s.train.action_scale[3] = 0.5;
  s.train.action_offset[3] = 0.5;
  s.train.delta_clamp = cfg.sim.step_size;
  s.train.clamp_gripper = true;
  s.norm.center = {(cfg.sim.table_min.x + cfg.sim.table_max.x) / 2.0,
                   (cfg.sim.table_min.y + cfg.sim.table_max.y) / 2.0,
                   (cfg.sim.table_min.z + cfg.sim.table_max.z) / 2.0};
  s.norm.half = {(cfg.sim.table_max.x - cfg.sim.table_min.x) / 2.0,
                 (cfg.sim.table_max.y - cfg.sim.table_min.y) / 2.0,
                 (cfg.sim.table_max.z - cfg.sim.table_min.z) / 2.0};
  return s;
}

// ---------------------------------------------------------------------------
// RLE images and observation containers.

RleImage rle_encode(const render::RasterImage& img) {
  RleImage r;
  r.channels = img.channels;
  r.height = img.height;
  r.width = img.width;
  std::size_t n = img.data.size();
  std::size_t i = 0;
  while (i < n) {
    float v = img.data[i];
    std::uint32_t vb = std::bit_cast<std::uint32_t>(v);
    std::size_t j = i + 1;
    while (j < n && std::bit_cast<std::uint32_t>(img.data[j]) == vb) ++j;
    r.counts.push_back(static_cast<std::uint32_t>(j - i));
    r.values.push_back(v);
    i = j;
  }
  return r;
}

namespace {

void rle_decode_into(const RleImage& rle, render::RasterImage& img) {
  img.channels = rle.channels;
  img.height = rle.height;
  img.width = rle.width;
  std::size_t total = static_cast<std::size_t>(rle.channels) * rle.height * rle.width;
  img.data.resize(total);
  std::size_t pos = 0;
  for (std::size_t k = 0; k < rle.counts.size(); ++k) {
    std::uint32_t c = rle.counts[k];
    if (pos + c > total) throw Error("rle_decode: runs exceed image size");
    std::fill(img.data.begin() + static_cast<std::ptrdiff_t>(pos),
              img.data.begin() + static_cast<std::ptrdiff_t>(pos + c), rle.values[k]);
    pos += c;
  }
  if (pos != total) throw Error("rle_decode: runs do not cover image");
}

}  // namespace

render::RasterImage rle_decode(const RleImage& rle) {
  render::RasterImage img;
  rle_decode_into(rle, img);
  return img;
}

namespace {

constexpr char kObsMagic[4] = {'A', 'V', 'P', 'O'};
constexpr std::uint32_t kObsVersion = 1;

}  // namespace

void write_obs_container(const std::vector<render::RasterImage>& frames, std::ostream& out) {
  binio::CheckedWriter w(out);
  w.bytes(kObsMagic, 4);
  w.u32(kObsVersion);
  w.u32(static_cast<std::uint32_t>(frames.size()));
  for (const render::RasterImage& f : frames) {
    RleImage r = rle_encode(f);
    w.u32(static_cast<std::uint32_t>(r.channels));
    w.u32(static_cast<std::uint32_t>(r.height));
    w.u32(static_cast<std::uint32_t>(r.width));
    w.u32(static_cast<std::uint32_t>(r.counts.size()));
    for (std::size_t i = 0; i < r.counts.size(); ++i) {
      w.u32(r.counts[i]);
      w.f32(r.values[i]);
    }
  }
  w.finish();
}

std::vector<render::RasterImage> read_obs_container(std::istream& in) {
  binio::CheckedReader r(in, "obs container");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kObsMagic, 4) != 0)
    throw trajio::SchemaMismatch("obs container: bad magic bytes");
  std::uint32_t version = r.u32();
  if (version != kObsVersion)
    throw trajio::SchemaMismatch("obs container: unsupported version " + std::to_string(version));
  std::uint32_t n = r.u32();
  if (n > (1u << 24)) throw trajio::MalformedRecord("obs container: implausible frame count");
  std::vector<render::RasterImage> frames(n);
  for (render::RasterImage& f : frames) {
    RleImage rle;
    rle.channels = static_cast<int>(r.u32());
    rle.height = static_cast<int>(r.u32());
    rle.width = static_cast<int>(r.u32());
    std::uint64_t total = static_cast<std::uint64_t>(rle.channels) * rle.height * rle.width;
    if (rle.channels <= 0 || rle.height <= 0 || rle.width <= 0 || total > (1u << 28))
      throw trajio::MalformedRecord("obs container: implausible frame shape");
    std::uint32_t runs = r.u32();
    if (runs > total) throw trajio::MalformedRecord("obs container: implausible run count");
    rle.counts.resize(runs);
    rle.values.resize(runs);
    for (std::uint32_t i = 0; i < runs; ++i) {
      rle.counts[i] = r.u32();
      rle.values[i] = r.f32();
    }
    rle_decode_into(rle, f);
  }
  r.verify_digest();
  return frames;
}

// ---------------------------------------------------------------------------
// Manifest.

void write_manifest(const Manifest& m, std::ostream& out) {
  ordered_json doc;
  doc["schema"] = "avp-manifest-v1";
  doc["n_episodes"] = m.episodes.size();
  ordered_json tp = ordered_json::array();
  for (const auto& [s, t] : m.train_pairs) tp.push_back({s, t});
  doc["train_pairs"] = std::move(tp);
  ordered_json ep = ordered_json::array();
  for (const auto& [s, t] : m.eval_direct_pairs) ep.push_back({s, t});
  doc["eval_direct_pairs"] = std::move(ep);
  ordered_json eps = ordered_json::array();
  for (const EpisodeEntry& e : m.episodes) {
    ordered_json j;
    j["id"] = e.id;
    j["source"] = e.source;
    j["target"] = e.target;
    j["via"] = e.via;
    j["steps"] = e.steps;
    j["log"] = e.log_path;
    j["obs"] = e.obs_path;
    eps.push_back(std::move(j));
  }
  doc["episodes"] = std::move(eps);
  doc["config_echo"] = m.config_echo;
  out << doc.dump(2) << "\n";
}

Manifest read_manifest(std::istream& in) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(in);
  } catch (const std::exception& e) {
    throw trajio::MalformedRecord(std::string("manifest: ") + e.what());
  }
  if (!doc.is_object() || doc.value("schema", "") != "avp-manifest-v1")
    throw trajio::SchemaMismatch("manifest: missing or unknown schema");
  Manifest m;
  for (const auto& p : doc.at("train_pairs"))
    m.train_pairs.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
  for (const auto& p : doc.at("eval_direct_pairs"))
    m.eval_direct_pairs.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
  for (const auto& j : doc.at("episodes")) {
    EpisodeEntry e;
    e.id = j.at("id").get<std::string>();
    e.source = j.at("source").get<int>();
    e.target = j.at("target").get<int>();
    e.via = j.at("via").get<int>();
    e.steps = j.at("steps").get<int>();
    e.log_path = j.at("log").get<std::string>();
    e.obs_path = j.at("obs").get<std::string>();
    m.episodes.push_back(std::move(e));
  }
  m.config_echo = doc.value("config_echo", "");
  return m;
}

// ---------------------------------------------------------------------------
// Per-step targets.

std::vector<StepTargets> episode_step_targets(const trajio::Trajectory& traj,
                                              const supervision::SupervisionResult& sup,
                                              int horizon) {
  std::vector<StepTargets> out;
  if (sup.labels.empty()) return out;
  if (sup.labels.size() != traj.steps.size())
    throw Error("episode_step_targets: label/step count mismatch");
  int n = static_cast<int>(traj.steps.size());
  if (horizon < 1 || n <= horizon) return out;

  // One label per completed stage, in order.
  std::vector<supervision::PrimitiveLabel> stage_labels;
  for (const supervision::StepLabel& sl : sup.labels) {
    if (sl.stage_index == static_cast<int>(stage_labels.size()))
      stage_labels.push_back(sl.label);
  }

  for (int t = 0; t < n - horizon; ++t) {
    StepTargets st;
    st.step = t;
    st.stage_index = sup.labels[static_cast<std::size_t>(t)].stage_index;
    st.label = sup.labels[static_cast<std::size_t>(t)].label;
    st.history.assign(stage_labels.begin(),
                      stage_labels.begin() + std::min<std::size_t>(
                                                 static_cast<std::size_t>(st.stage_index),
                                                 stage_labels.size()));
    st.proprio = traj.steps[static_cast<std::size_t>(t)].proprio;
    st.chunk = learn::ActionChunk::zeros(horizon);
    for (int j = 0; j < horizon; ++j) {
      const auto& a = traj.steps[static_cast<std::size_t>(t + j)].proprio;
      const auto& b = traj.steps[static_cast<std::size_t>(t + j + 1)].proprio;
      st.chunk.at(j, 0) = b.ee_pos.x - a.ee_pos.x;
      st.chunk.at(j, 1) = b.ee_pos.y - a.ee_pos.y;
      st.chunk.at(j, 2) = b.ee_pos.z - a.ee_pos.z;
      st.chunk.at(j, 3) = b.gripper_cmd;
    }
    out.push_back(std::move(st));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared path helpers.

namespace {

std::string join(const std::string& dir, const std::string& rel) {
  return (fs::path(dir) / rel).string();
}

std::string ckpt_name(learn::ConditioningMode mode, std::uint64_t seed) {
  return "ckpt_" + learn::mode_name(mode) + "_seed" + std::to_string(seed) + ".avpc";
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open for writing: " + path);
  return out;
}

std::ifstream open_in(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(std::string(what) + " missing: " + path);
  return in;
}

trajio::Trajectory load_episode_log(const std::string& path) {
  std::ifstream in = open_in(path, "trajectory log");
  std::vector<trajio::Trajectory> trajs = trajio::read_trajectory_log(in);
  if (trajs.size() != 1)
    throw trajio::MalformedRecord("expected exactly one episode in " + path);
  return std::move(trajs[0]);
}

}  // namespace

std::string eval_mode_name(EvalMode m) { return m == EvalMode::Seen ? "seen" : "unseen-direct"; }

// ---------------------------------------------------------------------------
// gen-data

void cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log) {
  int n_cells = sim::n_cells(cfg.sim);
  if (cfg.counts.n_pieces >= n_cells)
    throw ConfigError("config: counts.n_pieces must leave free cells");
  fs::create_directories(join(cfg.out_dir, "logs"));
  fs::create_directories(join(cfg.out_dir, "obs"));

  {
    std::ofstream out = open_out(join(cfg.out_dir, "camera.calib"));
    trajio::write_calibration(cfg.sim.camera, out);
  }

  Manifest m;
  m.config_echo = config_echo(cfg);
  std::set<std::pair<int, int>> train_set;
  Rng pair_rng = make_rng(cfg.counts.data_seed, 0xDA7A);
  for (int i = 0; i < cfg.counts.train_episodes; ++i) {
    int s = static_cast<int>(uniform_int(pair_rng, static_cast<std::uint64_t>(n_cells)));
    int t = static_cast<int>(uniform_int(pair_rng, static_cast<std::uint64_t>(n_cells - 1)));
    if (t >= s) ++t;
    sim::TaskSpec task{s, t, sim::WaypointMode::TwoStage, 0,
                       sim::TaskSpec::make_instruction_id(s, t, n_cells)};
    sim::SceneState scene = sim::init_scene_for_task(
        mix_seed(cfg.counts.data_seed, 3000000u + static_cast<std::uint64_t>(i)), cfg.sim,
        cfg.counts.n_pieces, task);
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "ep_%04d", i);
    std::string id = idbuf;
    Rng ep_rng = make_rng(cfg.counts.data_seed, 1000000u + static_cast<std::uint64_t>(i));
    trajio::Trajectory traj = sim::scripted_expert(scene, task, cfg.sim, id, ep_rng);

    std::string obs_rel = "obs/" + id + ".avpo";
    std::vector<render::RasterImage> frames;
    frames.reserve(traj.steps.size());
    for (std::size_t k = 0; k < traj.steps.size(); ++k) {
      trajio::TrajectoryStep& st = traj.steps[k];
      if (!st.obs) throw Error("gen-data: expert step without observation");
      frames.push_back(*st.obs);
      st.obs_ref = obs_rel + "#" + std::to_string(k);
    }
    {
      std::ofstream out = open_out(join(cfg.out_dir, obs_rel));
      write_obs_container(frames, out);
    }
    std::string log_rel = "logs/" + id + ".jsonl";
    {
      std::ofstream out = open_out(join(cfg.out_dir, log_rel));
      trajio::write_trajectory_log({traj}, out);
    }
    m.episodes.push_back(EpisodeEntry{id, s, t, task.via_slot,
                                      static_cast<int>(traj.steps.size()), log_rel, obs_rel});
    train_set.insert({s, t});
  }
  m.train_pairs.assign(train_set.begin(), train_set.end());

  if (cfg.counts.train_episodes > 0) {
    std::vector<std::pair<int, int>> candidates;
    for (int s = 0; s < n_cells; ++s)
      for (int t = 0; t < n_cells; ++t)
        if (s != t && !train_set.count({s, t})) candidates.emplace_back(s, t);
    if (static_cast<int>(candidates.size()) < cfg.counts.eval_tasks)
      throw ConfigError("gen-data: not enough unseen pairs for the evaluation split");
    Rng eval_rng = make_rng(cfg.counts.data_seed, 0xE7A1);
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.counts.eval_tasks); ++i) {
      std::size_t j = i + uniform_int(eval_rng, candidates.size() - i);
      std::swap(candidates[i], candidates[j]);
      m.eval_direct_pairs.push_back(candidates[i]);
    }
  }

  {
    std::ofstream out = open_out(join(cfg.out_dir, "manifest.json"));
    write_manifest(m, out);
  }
  log << "gen-data: " << m.episodes.size() << " episodes, " << m.train_pairs.size()
      << " distinct train pairs, " << m.eval_direct_pairs.size() << " held-out direct pairs -> "
      << cfg.out_dir << "\n";
}

// ---------------------------------------------------------------------------
// make-supervision

void cmd_make_supervision(const ExperimentConfig& cfg, std::ostream& log) {
  std::ifstream min = open_in(join(cfg.out_dir, "manifest.json"), "manifest");
  Manifest m = read_manifest(min);
  std::ifstream cin_ = open_in(join(cfg.out_dir, "camera.calib"), "calibration");
  trajio::CameraModel cam = trajio::read_calibration(cin_);
  int n_cells = sim::n_cells(cfg.sim);
  int h = cfg.train.horizon;

  // First pass: labels only, to learn the exact sample count and the skip set.
  std::vector<supervision::SupervisionResult> sups(m.episodes.size());
  std::vector<char> skipped(m.episodes.size(), 0);
  std::vector<supervision::DropEvent> drops;
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < m.episodes.size(); ++i) {
    trajio::Trajectory traj = load_episode_log(join(cfg.out_dir, m.episodes[i].log_path));
    try {
      sups[i] = supervision::build_supervision(traj, cam, cfg.sup);
    } catch (const supervision::NoKeyframes&) {
      skipped[i] = 1;
      drops.push_back({m.episodes[i].id, -1, "no keyframes"});
      continue;
    }
    for (const supervision::DropEvent& d : sups[i].drops) drops.push_back(d);
    if (sups[i].labels.empty()) {
      skipped[i] = 1;
      continue;
    }
    int n = static_cast<int>(traj.steps.size());
    if (n > h) total += static_cast<std::uint64_t>(n - h);
  }

  std::string shard_path = join(cfg.out_dir, "dataset.avpd");
  std::ofstream sout = open_out(shard_path);
  trajio::DatasetWriter writer(sout, total);
  std::uint64_t written = 0;
  for (std::size_t i = 0; i < m.episodes.size(); ++i) {
    if (skipped[i]) continue;
    trajio::Trajectory traj = load_episode_log(join(cfg.out_dir, m.episodes[i].log_path));
    std::ifstream oin = open_in(join(cfg.out_dir, m.episodes[i].obs_path), "obs container");
    std::vector<render::RasterImage> frames = read_obs_container(oin);
    if (frames.size() != traj.steps.size())
      throw trajio::MalformedRecord("obs container frame count mismatch for " + m.episodes[i].id);
    learn::InstructionEncoding instr{n_cells, m.episodes[i].source, m.episodes[i].target};
    for (StepTargets& st : episode_step_targets(traj, sups[i], h)) {
      trajio::LabeledSample s;
      s.raw_observation = frames[static_cast<std::size_t>(st.step)];
      s.observation = render::compose(s.raw_observation, {st.label, cfg.render}, st.history);
      s.proprio = st.proprio;
      s.instruction = instr;
      s.primitive_gt = st.label;
      s.action_chunk = std::move(st.chunk);
      s.stage_index = st.stage_index;
      writer.add(s);
      ++written;
    }
  }
  writer.finish();

  {
    ordered_json doc;
    doc["schema"] = "avp-supervision-v1";
    doc["n_episodes"] = m.episodes.size();
    doc["n_episodes_skipped"] =
        static_cast<int>(std::count(skipped.begin(), skipped.end(), char(1)));
    doc["n_samples"] = written;
    ordered_json dj = ordered_json::array();
    for (const supervision::DropEvent& d : drops) {
      ordered_json e;
      e["episode_id"] = d.episode_id;
      e["step"] = d.step;
      e["reason"] = d.reason;
      dj.push_back(std::move(e));
    }
    doc["drops"] = std::move(dj);
    doc["config_echo"] = config_echo(cfg);
    std::ofstream out = open_out(join(cfg.out_dir, "supervision_report.json"));
    out << doc.dump(2) << "\n";
  }
  log << "make-supervision: " << written << " samples (" << drops.size() << " drop events) -> "
      << shard_path << "\n";
}

// ---------------------------------------------------------------------------
// Training core shared by cmd_train and cmd_ablate.

static double lr_decay_factor(const learn::TrainConfig& tc, int step) {
  double frac = tc.train_steps <= 1 ? 0.0 : double(step - 1) / double(tc.train_steps - 1);
  if (frac <= tc.lr_hold || tc.lr_hold >= 1.0) return 1.0;
  double u = (frac - tc.lr_hold) / (1.0 - tc.lr_hold);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * u));
}

double scheduled_lr(const learn::TrainConfig& tc, int step) {
  return tc.lr * lr_decay_factor(tc, step);
}

namespace {

struct CurvePoint {
  int step = 0;
  double l_act = 0.0;
  double l_vp = 0.0;
};

// Materializes the i-th sample into a reusable slot.
using MaterializeFn = std::function<void(std::size_t, trajio::LabeledSample&)>;

learn::ModelParams run_training(std::size_t n_samples, const MaterializeFn& materialize,
                                const learn::TrainSetup& setup, const learn::ModelDims& dims,
                                std::vector<CurvePoint>* curve, std::ostream& log,
                                const std::string& tag) {
  if (n_samples == 0) throw ConfigError("training: dataset is empty");
  const learn::TrainConfig& tc = setup.train;
  Rng model_rng = make_rng(tc.seed, 0x0A11);
  learn::ModelParams params = learn::make_model(tc, dims, model_rng);
  Rng train_rng = make_rng(tc.seed, 0x7124);

  std::vector<trajio::LabeledSample> slots(static_cast<std::size_t>(tc.batch_size));
  std::vector<const trajio::LabeledSample*> batch(static_cast<std::size_t>(tc.batch_size));
  learn::TrainSetup stepsetup = setup;
  for (int step = 1; step <= tc.train_steps; ++step) {
    double f = lr_decay_factor(tc, step);
    stepsetup.train.lr = tc.lr * f;
    stepsetup.train.decoder_lr = tc.decoder_lr * f;
    for (int b = 0; b < tc.batch_size; ++b) {
      std::size_t idx = static_cast<std::size_t>(uniform_int(train_rng, n_samples));
      materialize(idx, slots[static_cast<std::size_t>(b)]);
      batch[static_cast<std::size_t>(b)] = &slots[static_cast<std::size_t>(b)];
    }
    learn::TrainMetrics tm = learn::train_step(params, batch, stepsetup, train_rng);
    if (curve && (step % 100 == 0 || step == tc.train_steps))
      curve->push_back({step, tm.l_act, tm.l_vp});
    if (step % 1000 == 0)
      log << "  " << tag << " step " << step << "/" << tc.train_steps << " L_act=" << tm.l_act
          << " L_vp=" << tm.l_vp << "\n";
  }
  return params;
}

struct CachedSample {
  RleImage composed;
  RleImage raw;
  trajio::ProprioState proprio;
  learn::InstructionEncoding instr;
  supervision::PrimitiveLabel label;
  learn::ActionChunk chunk;
  int stage_index = 0;
};

std::vector<CachedSample> load_shard_cache(const std::string& path, int horizon) {
  std::ifstream in = open_in(path, "dataset");
  std::vector<CachedSample> cache;
  trajio::read_dataset_stream(in, [&](trajio::LabeledSample&& s) {
    if (s.action_chunk.horizon != horizon)
      throw ConfigError("dataset horizon " + std::to_string(s.action_chunk.horizon) +
                        " does not match train.horizon " + std::to_string(horizon));
    CachedSample c;
    c.composed = rle_encode(s.observation);
    c.raw = rle_encode(s.raw_observation);
    c.proprio = s.proprio;
    c.instr = s.instruction;
    c.label = s.primitive_gt;
    c.chunk = std::move(s.action_chunk);
    c.stage_index = s.stage_index;
    cache.push_back(std::move(c));
  });
  return cache;
}

void fill_from_cache(const CachedSample& c, trajio::LabeledSample& s) {
  rle_decode_into(c.composed, s.observation);
  rle_decode_into(c.raw, s.raw_observation);
  s.proprio = c.proprio;
  s.instruction = c.instr;
  s.primitive_gt = c.label;
  s.action_chunk = c.chunk;
  s.stage_index = c.stage_index;
}

void write_curve(const std::string& path, const std::vector<CurvePoint>& curve,
                 learn::ConditioningMode mode, std::uint64_t seed, const std::string& echo) {
  ordered_json doc;
  doc["schema"] = "avp-curve-v1";
  doc["mode"] = learn::mode_name(mode);
  doc["seed"] = seed;
  ordered_json entries = ordered_json::array();
  for (const CurvePoint& p : curve) {
    ordered_json e;
    e["step"] = p.step;
    e["l_act"] = p.l_act;
    e["l_vp"] = p.l_vp;
    entries.push_back(std::move(e));
  }
  doc["entries"] = std::move(entries);
  doc["config_echo"] = echo;
  std::ofstream out = open_out(path);
  out << doc.dump(2) << "\n";
}

}  // namespace

void cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
  learn::TrainSetup setup = make_train_setup(cfg);
  learn::ModelDims dims = model_dims(cfg);
  std::vector<CachedSample> cache =
      load_shard_cache(join(cfg.out_dir, "dataset.avpd"), cfg.train.horizon);
  log << "train: " << cache.size() << " samples, mode " << learn::mode_name(cfg.train.mode)
      << ", seed " << cfg.train.seed << "\n";

  std::vector<CurvePoint> curve;
  learn::ModelParams params = run_training(
      cache.size(),
      [&cache](std::size_t i, trajio::LabeledSample& s) { fill_from_cache(cache[i], s); }, setup,
      dims, &curve, log, learn::mode_name(cfg.train.mode));

  std::string echo = config_echo(cfg);
  std::string ckpt = join(cfg.out_dir, ckpt_name(cfg.train.mode, cfg.train.seed));
  {
    std::ofstream out = open_out(ckpt);
    learn::save_checkpoint(out, params, echo);
  }
  write_curve(join(cfg.out_dir, "curve_" + learn::mode_name(cfg.train.mode) + "_seed" +
                                    std::to_string(cfg.train.seed) + ".json"),
              curve, cfg.train.mode, cfg.train.seed, echo);
  log << "train: wrote " << ckpt << "\n";
}

// ---------------------------------------------------------------------------
// Evaluation.

namespace {

std::vector<sim::TaskSpec> eval_task_set(const ExperimentConfig& cfg, const Manifest& m,
                                         EvalMode mode) {
  int n_cells = sim::n_cells(cfg.sim);
  std::vector<sim::TaskSpec> tasks;
  if (mode == EvalMode::UnseenDirect) {
    std::set<std::pair<int, int>> train_set(m.train_pairs.begin(), m.train_pairs.end());
    for (const auto& [s, t] : m.eval_direct_pairs) {
      if (train_set.count({s, t}))
        throw Error("eval: held-out pair (" + std::to_string(s) + "," + std::to_string(t) +
                    ") appears in the training manifest");
      tasks.push_back({s, t, sim::WaypointMode::Direct, 0,
                       sim::TaskSpec::make_instruction_id(s, t, n_cells)});
    }
  } else {
    if (m.train_pairs.empty()) throw Error("eval: manifest has no training pairs");
    Rng rng = make_rng(cfg.counts.data_seed, 0x5EE0);
    for (int i = 0; i < cfg.counts.eval_tasks; ++i) {
      const auto& [s, t] =
          m.train_pairs[static_cast<std::size_t>(uniform_int(rng, m.train_pairs.size()))];
      tasks.push_back({s, t, sim::WaypointMode::TwoStage, 0,
                       sim::TaskSpec::make_instruction_id(s, t, n_cells)});
    }
  }
  return tasks;
}

SeedRates run_rollouts(const ExperimentConfig& cfg, const learn::TrainSetup& setup,
                       const learn::ModelParams& params, const std::vector<sim::TaskSpec>& tasks,
                       std::uint64_t seed) {
  learn::RolloutConfig rc{cfg.sim, setup, cfg.counts.eval_budget};
  int instr_n = 0, pick_n = 0, place_n = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    sim::SceneState scene = sim::init_scene_for_task(
        mix_seed(cfg.counts.data_seed, 4000000u + static_cast<std::uint64_t>(i)), cfg.sim,
        cfg.counts.n_pieces, tasks[i]);
    Rng rng = make_rng(seed, 0xE000000u + static_cast<std::uint64_t>(i));
    sim::EpisodeResult res = learn::policy_rollout(params, scene, tasks[i], rc, rng);
    instr_n += res.instr_ok ? 1 : 0;
    pick_n += res.pick_ok ? 1 : 0;
    place_n += res.place_ok ? 1 : 0;
  }
  double n = tasks.empty() ? 1.0 : static_cast<double>(tasks.size());
  SeedRates r;
  r.seed = seed;
  r.instr_rate = 100.0 * instr_n / n;
  r.pick_rate = 100.0 * pick_n / n;
  r.place_rate = 100.0 * place_n / n;
  r.avg_rate = (r.instr_rate + r.pick_rate + r.place_rate) / 3.0;
  return r;
}

MetricsRow row_from_seeds(const std::string& name, const std::vector<SeedRates>& seeds) {
  MetricsRow row;
  row.config_name = name;
  row.seeds = seeds;
  for (const SeedRates& s : seeds) {
    row.instr_rate += s.instr_rate;
    row.pick_rate += s.pick_rate;
    row.place_rate += s.place_rate;
  }
  double n = seeds.empty() ? 1.0 : static_cast<double>(seeds.size());
  row.instr_rate /= n;
  row.pick_rate /= n;
  row.place_rate /= n;
  row.avg_rate = (row.instr_rate + row.pick_rate + row.place_rate) / 3.0;
  return row;
}

}  // namespace

MetricsTable cmd_eval(const ExperimentConfig& cfg, const std::string& ckpt_path, EvalMode mode,
                      std::ostream& log) {
  std::ifstream cin_ = open_in(ckpt_path, "checkpoint");
  learn::Checkpoint ck = learn::load_checkpoint(cin_);
  std::string echo = config_echo(cfg);
  if (ck.config_echo != echo)
    throw ConfigError("checkpoint/config mismatch: " + ckpt_path +
                      " was trained under a different configuration");

  std::ifstream min = open_in(join(cfg.out_dir, "manifest.json"), "manifest");
  Manifest m = read_manifest(min);
  std::vector<sim::TaskSpec> tasks = eval_task_set(cfg, m, mode);
  learn::TrainSetup setup = make_train_setup(cfg);
  SeedRates r = run_rollouts(cfg, setup, ck.params, tasks, cfg.train.seed);

  MetricsTable table;
  table.config_echo = echo;
  table.rows.push_back(row_from_seeds(
      learn::mode_name(cfg.train.mode) + "/" + eval_mode_name(mode), {r}));
  std::string out_path =
      join(cfg.out_dir, "metrics_" + learn::mode_name(cfg.train.mode) + "_" +
                            eval_mode_name(mode) + "_seed" + std::to_string(cfg.train.seed) +
                            ".json");
  {
    std::ofstream out = open_out(out_path);
    trajio::write_metrics_report(table, out);
  }
  log << "eval " << eval_mode_name(mode) << " (" << tasks.size() << " tasks): instr "
      << r.instr_rate << " pick " << r.pick_rate << " place " << r.place_rate << " avg "
      << r.avg_rate << " -> " << out_path << "\n";
  return table;
}

MetricsTable cmd_eval_oracle(const ExperimentConfig& cfg, EvalMode mode, std::ostream& log) {
  std::ifstream min = open_in(join(cfg.out_dir, "manifest.json"), "manifest");
  Manifest m = read_manifest(min);
  std::vector<sim::TaskSpec> tasks = eval_task_set(cfg, m, mode);
  int instr_n = 0, pick_n = 0, place_n = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    sim::SceneState scene = sim::init_scene_for_task(
        mix_seed(cfg.counts.data_seed, 4000000u + static_cast<std::uint64_t>(i)), cfg.sim,
        cfg.counts.n_pieces, tasks[i]);
    Rng rng = make_rng(cfg.counts.data_seed, 0x09ac1eu + static_cast<std::uint64_t>(i));
    trajio::Trajectory traj = sim::scripted_expert(scene, tasks[i], cfg.sim, "oracle", rng);
    // Replay the recorded end state through the evaluator.
    sim::SceneState replayed = scene;
    for (std::size_t k = 1; k < traj.steps.size(); ++k) {
      const auto& prev = traj.steps[k - 1].proprio;
      const auto& cur = traj.steps[k].proprio;
      sim::ActionStep a{cur.ee_pos.x - prev.ee_pos.x, cur.ee_pos.y - prev.ee_pos.y,
                        cur.ee_pos.z - prev.ee_pos.z, cur.gripper_cmd};
      replayed = sim::step(replayed, a, cfg.sim);
    }
    sim::EpisodeResult res = sim::evaluate_episode(replayed, tasks[i], cfg.sim);
    instr_n += res.instr_ok ? 1 : 0;
    pick_n += res.pick_ok ? 1 : 0;
    place_n += res.place_ok ? 1 : 0;
  }
  double n = tasks.empty() ? 1.0 : static_cast<double>(tasks.size());
  SeedRates r;
  r.seed = cfg.counts.data_seed;
  r.instr_rate = 100.0 * instr_n / n;
  r.pick_rate = 100.0 * pick_n / n;
  r.place_rate = 100.0 * place_n / n;
  r.avg_rate = (r.instr_rate + r.pick_rate + r.place_rate) / 3.0;
  MetricsTable table;
  table.config_echo = config_echo(cfg);
  table.rows.push_back(row_from_seeds("oracle/" + eval_mode_name(mode), {r}));
  log << "oracle eval " << eval_mode_name(mode) << ": instr " << r.instr_rate << " pick "
      << r.pick_rate << " place " << r.place_rate << "\n";
  return table;
}

// ---------------------------------------------------------------------------
// Ablation sweep.

namespace {

struct AblateSample {
  RleImage raw;
  StepTargets targets;
  learn::InstructionEncoding instr;
};

struct BehaviorKey {
  render::PromptType prompt;
  double alpha;
  int memory;
  bool operator<(const BehaviorKey& o) const {
    if (prompt != o.prompt) return prompt < o.prompt;
    if (alpha != o.alpha) return alpha < o.alpha;
    return memory < o.memory;
  }
};

// Rows that render identically share one training/eval result: alpha only
// matters for masked prompts, memory never matters without a prompt, and a
// mask of opacity zero is exactly the plain box.
BehaviorKey canonical_key(render::PromptType p, double alpha, int memory) {
  if (p == render::PromptType::None) return {render::PromptType::None, 0.0, 0};
  if (p == render::PromptType::BoxMask && alpha == 0.0) p = render::PromptType::Box;
  if (p != render::PromptType::BoxMask) return {p, 0.0, memory};
  return {p, alpha, memory};
}

std::string prompt_display(render::PromptType p) {
  switch (p) {
    case render::PromptType::None: return "None";
    case render::PromptType::Point: return "Point";
    case render::PromptType::Box: return "Box";
    case render::PromptType::BoxMask: return "Box+Mask";
  }
  return "?";
}

}  // namespace

MetricsTable cmd_ablate(const ExperimentConfig& cfg, std::ostream& log) {
  std::ifstream min = open_in(join(cfg.out_dir, "manifest.json"), "manifest");
  Manifest m = read_manifest(min);
  std::ifstream calin = open_in(join(cfg.out_dir, "camera.calib"), "calibration");
  trajio::CameraModel cam = trajio::read_calibration(calin);
  int n_cells = sim::n_cells(cfg.sim);
  int h = cfg.train.horizon;

  // Base dataset: raw frames plus targets; prompts get composed per row.
  std::vector<AblateSample> base;
  std::vector<supervision::DropEvent> drops;
  for (const EpisodeEntry& e : m.episodes) {
    trajio::Trajectory traj = load_episode_log(join(cfg.out_dir, e.log_path));
    supervision::SupervisionResult sup;
    try {
      sup = supervision::build_supervision(traj, cam, cfg.sup);
    } catch (const supervision::NoKeyframes&) {
      drops.push_back({e.id, -1, "no keyframes"});
      continue;
    }
    for (const supervision::DropEvent& d : sup.drops) drops.push_back(d);
    if (sup.labels.empty()) continue;
    std::ifstream oin = open_in(join(cfg.out_dir, e.obs_path), "obs container");
    std::vector<render::RasterImage> frames = read_obs_container(oin);
    if (frames.size() != traj.steps.size())
      throw trajio::MalformedRecord("obs container frame count mismatch for " + e.id);
    learn::InstructionEncoding instr{n_cells, e.source, e.target};
    for (StepTargets& st : episode_step_targets(traj, sup, h)) {
      AblateSample a;
      a.raw = rle_encode(frames[static_cast<std::size_t>(st.step)]);
      a.targets = std::move(st);
      a.instr = instr;
      base.push_back(std::move(a));
    }
  }
  if (base.empty()) throw ConfigError("ablate: no training samples");
  log << "ablate: " << base.size() << " base samples\n";

  ExperimentConfig eff = cfg;
  if (cfg.ablate.train_steps > 0) eff.train.train_steps = cfg.ablate.train_steps;
  std::vector<std::uint64_t> seeds =
      cfg.ablate.seeds.empty() ? cfg.counts.seeds : cfg.ablate.seeds;
  learn::ModelDims dims = model_dims(eff);
  std::vector<sim::TaskSpec> tasks = eval_task_set(eff, m, EvalMode::Seen);

  const std::array<render::PromptType, 4> prompts = {
      render::PromptType::None, render::PromptType::Point, render::PromptType::Box,
      render::PromptType::BoxMask};
  const std::array<double, 3> alphas = {0.0, 0.7, 0.9};
  const std::array<int, 2> memories = {0, 1};

  std::map<BehaviorKey, std::vector<SeedRates>> done;
  MetricsTable table;
  table.config_echo = config_echo(cfg);
  table.supervision_drops = drops;

  for (render::PromptType p : prompts) {
    for (double alpha : alphas) {
      for (int mem : memories) {
        std::string name = prompt_display(p) + " alpha=" + fmt_double(alpha) +
                           " mem=" + std::to_string(mem);
        BehaviorKey key = canonical_key(p, alpha, mem);
        auto it = done.find(key);
        if (it == done.end()) {
          ExperimentConfig run = eff;
          run.render.prompt_type = p;
          run.render.alpha = alpha;
          run.render.memory_depth = mem;
          MaterializeFn mat = [&base, &run](std::size_t i, trajio::LabeledSample& s) {
            const AblateSample& a = base[i];
            rle_decode_into(a.raw, s.raw_observation);
            s.observation =
                render::compose(s.raw_observation, {a.targets.label, run.render},
                                a.targets.history);
            s.proprio = a.targets.proprio;
            s.instruction = a.instr;
            s.primitive_gt = a.targets.label;
            s.action_chunk = a.targets.chunk;
            s.stage_index = a.targets.stage_index;
          };
          std::vector<SeedRates> rates;
          for (std::uint64_t seed : seeds) {
            ExperimentConfig runs = run;
            runs.train.seed = seed;
            learn::TrainSetup setup_s = make_train_setup(runs);
            log << "ablate: " << name << " seed " << seed << "\n";
            learn::ModelParams params =
                run_training(base.size(), mat, setup_s, dims, nullptr, log, name);
            rates.push_back(run_rollouts(runs, setup_s, params, tasks, seed));
          }
          it = done.emplace(key, std::move(rates)).first;
        }
        table.rows.push_back(row_from_seeds(name, it->second));
      }
    }
  }

  std::string out_path = join(cfg.out_dir, "ablation.json");
  {
    std::ofstream out = open_out(out_path);
    trajio::write_metrics_report(table, out);
  }
  log << "ablate: " << table.rows.size() << " rows (" << done.size()
      << " distinct behaviors) -> " << out_path << "\n";
  return table;
}

// ---------------------------------------------------------------------------
// render-prompts

void cmd_render_prompts(const std::string& dataset_path, const std::string& out_dir, int limit,
                        std::ostream& log) {
  std::ifstream in = open_in(dataset_path, "dataset");
  fs::create_directories(out_dir);
  int written = 0;
  trajio::read_dataset_stream(in, [&](trajio::LabeledSample&& s) {
    if (written >= limit) return;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "sample_%04d_composed.ppm", written);
    {
      std::ofstream out = open_out((fs::path(out_dir) / buf).string());
      render::write_ppm(s.observation, out);
    }
    std::snprintf(buf, sizeof(buf), "sample_%04d_raw.ppm", written);
    {
      std::ofstream out = open_out((fs::path(out_dir) / buf).string());
      render::write_ppm(s.raw_observation, out);
    }
    ++written;
  });
  log << "render-prompts: wrote " << written << " sample pairs to " << out_dir << "\n";
}

// ---------------------------------------------------------------------------
// selftest

namespace {

using Mat4 = std::array<double, 16>;

Mat4 mat4_mul(const Mat4& a, const Mat4& b) {
  Mat4 c{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += a[static_cast<std::size_t>(i * 4 + k)] *
                                         b[static_cast<std::size_t>(k * 4 + j)];
      c[static_cast<std::size_t>(i * 4 + j)] = acc;
    }
  return c;
}

bool approx(double a, double b, double tol) { return std::fabs(a - b) <= tol; }

geometry::RigidTransform random_transform(Rng& rng) {
  geometry::Point3 axis{gauss(rng), gauss(rng), gauss(rng)};
  double n = std::sqrt(axis.x * axis.x + axis.y * axis.y + axis.z * axis.z);
  if (n < 1e-9) axis = {1, 0, 0}, n = 1;
  axis = {axis.x / n, axis.y / n, axis.z / n};
  geometry::RigidTransform t;
  t.rotation = geometry::rotation_axis_angle(axis, uniform_range(rng, -3.0, 3.0));
  t.translation = {uniform_range(rng, -0.5, 0.5), uniform_range(rng, -0.5, 0.5),
                   uniform_range(rng, -0.5, 0.5)};
  return t;
}

bool prop_projection_oracle(std::string& detail) {
  Rng rng = make_rng(20240801, 1);
  for (int i = 0; i < 100; ++i) {
    geometry::RigidTransform t = random_transform(rng);
    geometry::CameraIntrinsics k{uniform_range(rng, 50, 150), uniform_range(rng, 50, 150),
                                 uniform_range(rng, 20, 44), uniform_range(rng, 20, 44)};
    geometry::Point3 p{uniform_range(rng, -0.4, 0.4), uniform_range(rng, -0.4, 0.4),
                       uniform_range(rng, -0.4, 0.4)};
    geometry::Point3 pc = geometry::transform_point(t, p);
    if (pc.z < 0.05) continue;
    Mat4 kt{k.fx, 0, k.cx, 0, 0, k.fy, k.cy, 0, 0, 0, 1, 0, 0, 0, 0, 1};
    Mat4 tm{t.rotation(0, 0), t.rotation(0, 1), t.rotation(0, 2), t.translation.x,
            t.rotation(1, 0), t.rotation(1, 1), t.rotation(1, 2), t.translation.y,
            t.rotation(2, 0), t.rotation(2, 1), t.rotation(2, 2), t.translation.z,
            0,                0,                0,                1};
    Mat4 full = mat4_mul(kt, tm);
    double hx = full[0] * p.x + full[1] * p.y + full[2] * p.z + full[3];
    double hy = full[4] * p.x + full[5] * p.y + full[6] * p.z + full[7];
    double hz = full[8] * p.x + full[9] * p.y + full[10] * p.z + full[11];
    geometry::PixelAnchor a = geometry::project(k, t, p);
    if (!approx(a.u, hx / hz, 1e-9) || !approx(a.v, hy / hz, 1e-9) ||
        !approx(a.depth, hz, 1e-9)) {
      detail = "projection disagrees with homogeneous oracle";
      return false;
    }
    geometry::Point3 back = geometry::unproject(k, t, {a.u, a.v, a.depth});
    if (!approx(back.x, p.x, 1e-9) || !approx(back.y, p.y, 1e-9) || !approx(back.z, p.z, 1e-9)) {
      detail = "unproject(project(p)) != p";
      return false;
    }
  }
  return true;
}

bool prop_keyframes(std::string& detail) {
  Rng rng = make_rng(20240801, 2);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 2 + static_cast<int>(uniform_int(rng, 31));
    std::vector<double> sig(static_cast<std::size_t>(n));
    for (double& v : sig) v = uniform01(rng);
    supervision::SupervisionConfig cfg;
    cfg.delta = uniform_range(rng, 0.05, 0.8);
    cfg.min_stage_gap = 1 + static_cast<int>(uniform_int(rng, 4));
    supervision::KeyframeSet got = supervision::extract_keyframes(sig, cfg);
    // Straight-line rescan of the definition.
    std::vector<int> want;
    long long last = -(1LL << 40);
    for (int t = 1; t < n; ++t) {
      if (std::fabs(sig[static_cast<std::size_t>(t)] - sig[static_cast<std::size_t>(t - 1)]) >
              cfg.delta &&
          t - last >= cfg.min_stage_gap) {
        want.push_back(t);
        last = t;
      }
    }
    if (got.indices != want) {
      detail = "keyframe indices disagree with brute-force scan";
      return false;
    }
  }
  // Square wave: one keyframe per edge for any threshold below the amplitude.
  std::vector<double> wave;
  for (int cyc = 0; cyc < 5; ++cyc) {
    for (int i = 0; i < 4; ++i) wave.push_back(0.0);
    for (int i = 0; i < 4; ++i) wave.push_back(1.0);
  }
  for (double delta : {0.2, 0.5, 0.9}) {
    supervision::SupervisionConfig cfg;
    cfg.delta = delta;
    cfg.min_stage_gap = 1;
    if (supervision::extract_keyframes(wave, cfg).indices.size() != 9) {
      detail = "square-wave keyframe count law violated";
      return false;
    }
  }
  return true;
}

bool prop_mlp_grad(std::string& detail, bool inject_fault) {
  Rng rng = make_rng(20240801, 3);
  std::vector<int> dims = {5, 8, 8, 1};
  learn::Mlp net = learn::mlp_init(dims, rng);
  std::vector<double> x(5);
  for (double& v : x) v = gauss(rng);
  learn::MlpCache cache;
  learn::mlp_forward(net, x, &cache);
  learn::Mlp grads = learn::mlp_zeros_like(net);
  learn::mlp_backward(net, cache, {1.0}, grads);
  if (inject_fault) grads.layers[0].w[0] += 0.5;
  double step = 1e-5;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    for (std::size_t wi = 0; wi < net.layers[li].w.size(); wi += 7) {
      learn::Mlp plus = net, minus = net;
      plus.layers[li].w[wi] += step;
      minus.layers[li].w[wi] -= step;
      double fd = (learn::mlp_forward(plus, x)[0] - learn::mlp_forward(minus, x)[0]) / (2 * step);
      double an = grads.layers[li].w[wi];
      if (std::fabs(fd - an) > 1e-4 * std::max(1.0, std::fabs(fd))) {
        detail = "analytic gradient differs from finite differences at layer " +
                 std::to_string(li) + " weight " + std::to_string(wi);
        return false;
      }
    }
  }
  return true;
}

bool prop_fm_grad(std::string& detail) {
  Rng rng = make_rng(20240801, 4);
  learn::TrainConfig cfg;
  cfg.horizon = 2;
  // Input: 16 image features + 3 proprio + the 8-dim noisy chunk + tau.
  learn::Mlp net = learn::mlp_init({16 + 3 + 8 + 1, 16, 16, 8}, rng);
  learn::ConditioningBundle cond;
  cond.obs_feat = {0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8, 0.9, 1.0, -1.1, 1.2,
                   0.15, 0.25, 0.35, 0.45};
  cond.proprio_feat = {0.1, 0.2, 0.3};
  learn::ActionChunk a = learn::ActionChunk::zeros(2);
  for (double& v : a.a) v = gauss(rng) * 0.3;

  learn::Mlp grads = learn::mlp_zeros_like(net);
  Rng frozen = make_rng(99, 0);
  learn::fm_loss(net, cond, a, cfg, frozen, &grads);
  double step = 1e-5;
  for (std::size_t wi = 0; wi < net.layers[0].w.size(); wi += 11) {
    learn::Mlp plus = net, minus = net;
    plus.layers[0].w[wi] += step;
    minus.layers[0].w[wi] -= step;
    Rng r1 = make_rng(99, 0), r2 = make_rng(99, 0);
    double fd = (learn::fm_loss(plus, cond, a, cfg, r1) -
                 learn::fm_loss(minus, cond, a, cfg, r2)) /
                (2 * step);
    double an = grads.layers[0].w[wi];
    if (std::fabs(fd - an) > 1e-4 * std::max(1.0, std::fabs(fd))) {
      detail = "flow-matching gradient differs from finite differences";
      return false;
    }
  }
  return true;
}

bool prop_ce(std::string& detail) {
  learn::DecoderLogits lg;
  lg.stage.assign(2, 0.0);
  lg.u.assign(32, 0.0);
  lg.v.assign(32, 0.0);
  supervision::PrimitiveLabel label;
  label.stage = supervision::Stage::Place;
  label.cell_u = 7;
  label.cell_v = 21;
  double want = std::log(2.0) + 2.0 * std::log(32.0);
  learn::DecoderLogits grad;
  double got = learn::ce_loss(lg, label, &grad);
  if (!approx(got, want, 1e-12)) {
    detail = "uniform-logit cross entropy is not ln(2) + 2 ln(32)";
    return false;
  }
  Rng rng = make_rng(20240801, 5);
  for (double& v : lg.u) v = gauss(rng);
  learn::ce_loss(lg, label, &grad);
  double step = 1e-6;
  for (int i = 0; i < 32; i += 5) {
    learn::DecoderLogits p = lg, m = lg;
    p.u[static_cast<std::size_t>(i)] += step;
    m.u[static_cast<std::size_t>(i)] -= step;
    double fd = (learn::ce_loss(p, label) - learn::ce_loss(m, label)) / (2 * step);
    if (std::fabs(fd - grad.u[static_cast<std::size_t>(i)]) > 1e-4) {
      detail = "cross-entropy gradient differs from finite differences";
      return false;
    }
  }
  return true;
}

bool prop_euler(std::string& detail) {
  std::vector<double> target = {0.3, -0.8, 1.4, 0.05};
  std::vector<double> x0 = {1.0, 1.0, -1.0, 0.2};
  for (int steps : {1, 5, 10, 37}) {
    auto field = [&target](const std::vector<double>& x, double tau) {
      std::vector<double> v(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) v[i] = (target[i] - x[i]) / (1.0 - tau);
      return v;
    };
    std::vector<double> xe = learn::euler_integrate(field, x0, steps);
    for (std::size_t i = 0; i < xe.size(); ++i)
      if (std::fabs(xe[i] - target[i]) > 1e-9) {
        detail = "Euler integration of the point-target field missed the target";
        return false;
      }
  }
  return true;
}

bool prop_render_identity(std::string& detail) {
  Rng rng = make_rng(20240801, 6);
  for (int i = 0; i < 10; ++i) {
    render::RasterImage img = render::RasterImage::filled(3, 64, 64, 0.0f);
    for (float& v : img.data) v = static_cast<float>(uniform01(rng));
    supervision::PrimitiveLabel label;
    label.stage = uniform01(rng) < 0.5 ? supervision::Stage::Pick : supervision::Stage::Place;
    label.anchor = {uniform_range(rng, -5, 69), uniform_range(rng, -5, 69), 0.4};
    render::RenderConfig rc;
    rc.alpha = 0.0;
    render::RasterImage a = render::render_box_mask(img, label, rc);
    render::RasterImage b = render::render_box(img, label, rc);
    if (!(a == b)) {
      detail = "render_box_mask(alpha=0) differs from render_box";
      return false;
    }
    render::RenderConfig none = rc;
    none.prompt_type = render::PromptType::None;
    render::RasterImage c = render::compose(img, {label, none}, {label});
    if (!(c == img)) {
      detail = "compose with prompt 'none' is not the identity";
      return false;
    }
  }
  return true;
}

bool prop_adam(std::string& detail) {
  std::vector<double> p = {1.0};
  std::vector<double> g = {0.3};
  learn::AdamState st;
  learn::adam_update(p, g, st, 0.01);
  // After one bias-corrected step the update is exactly -lr * g / (|g| + eps).
  double want = 1.0 - 0.01 * 0.3 / (0.3 + 1e-8);
  if (!approx(p[0], want, 1e-12)) {
    detail = "first Adam step does not match the closed form";
    return false;
  }
  return true;
}

bool prop_shard_round_trip(std::string& detail) {
  Rng rng = make_rng(20240801, 7);
  std::vector<trajio::LabeledSample> samples;
  for (int i = 0; i < 3; ++i) {
    trajio::LabeledSample s;
    s.observation = render::RasterImage::filled(3, 8, 8, 0.0f);
    s.raw_observation = render::RasterImage::filled(3, 8, 8, 0.0f);
    for (float& v : s.observation.data) v = static_cast<float>(uniform01(rng));
    for (float& v : s.raw_observation.data) v = static_cast<float>(uniform01(rng));
    s.proprio = {{uniform01(rng), uniform01(rng), uniform01(rng)}, 0.5, 0.5};
    s.instruction = {90, i, 89 - i};
    s.primitive_gt.cell_u = i;
    s.primitive_gt.cell_index = i;
    s.action_chunk = learn::ActionChunk::zeros(4);
    for (double& v : s.action_chunk.a) v = gauss(rng);
    s.stage_index = i;
    samples.push_back(std::move(s));
  }
  std::ostringstream out;
  trajio::write_dataset(samples, out);
  std::string bytes = out.str();
  std::istringstream in(bytes);
  std::vector<trajio::LabeledSample> back = trajio::read_dataset(in);
  std::ostringstream out2;
  trajio::write_dataset(back, out2);
  if (out2.str() != bytes) {
    detail = "shard write/read/write is not byte-identical";
    return false;
  }
  std::string corrupt = bytes;
  corrupt[corrupt.size() / 2] = static_cast<char>(corrupt[corrupt.size() / 2] ^ 0x40);
  std::istringstream cin_(corrupt);
  try {
    trajio::read_dataset(cin_);
    detail = "corrupted shard was accepted";
    return false;
  } catch (const Error&) {
  }
  return true;
}

bool prop_calibration_round_trip(std::string& detail) {
  trajio::CameraModel cam = sim::default_camera();
  std::ostringstream out;
  trajio::write_calibration(cam, out);
  std::istringstream in(out.str());
  trajio::CameraModel back = trajio::read_calibration(in);
  std::ostringstream out2;
  trajio::write_calibration(back, out2);
  if (out.str() != out2.str()) {
    detail = "calibration write/read/write is not byte-identical";
    return false;
  }
  return true;
}

bool prop_obs_round_trip(std::string& detail) {
  Rng rng = make_rng(20240801, 8);
  std::vector<render::RasterImage> frames;
  for (int i = 0; i < 3; ++i) {
    render::RasterImage f = render::RasterImage::filled(3, 16, 16, 0.25f);
    for (int k = 0; k < 30; ++k)
      f.data[uniform_int(rng, f.data.size())] = static_cast<float>(uniform01(rng));
    frames.push_back(std::move(f));
  }
  std::ostringstream out;
  write_obs_container(frames, out);
  std::istringstream in(out.str());
  std::vector<render::RasterImage> back = read_obs_container(in);
  if (back.size() != frames.size()) {
    detail = "frame count changed across the container round trip";
    return false;
  }
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (!(frames[i] == back[i])) {
      detail = "frame pixels changed across the container round trip";
      return false;
    }
  return true;
}

}  // namespace

int cmd_selftest(std::ostream& out, bool inject_gradient_fault) {
  struct Prop {
    const char* name;
    std::function<bool(std::string&)> fn;
  };
  std::vector<Prop> props = {
      {"projection-homogeneous-oracle", prop_projection_oracle},
      {"keyframe-brute-force-and-square-wave", prop_keyframes},
      {"mlp-gradient-finite-difference",
       [inject_gradient_fault](std::string& d) { return prop_mlp_grad(d, inject_gradient_fault); }},
      {"flow-matching-gradient-finite-difference", prop_fm_grad},
      {"cross-entropy-analytic-and-gradient", prop_ce},
      {"euler-point-target-exactness", prop_euler},
      {"render-alpha0-and-compose-none-identities", prop_render_identity},
      {"adam-first-step-closed-form", prop_adam},
      {"dataset-shard-round-trip-and-checksum", prop_shard_round_trip},
      {"calibration-round-trip", prop_calibration_round_trip},
      {"observation-container-round-trip", prop_obs_round_trip},
  };
  int failures = 0;
  for (const Prop& p : props) {
    std::string detail;
    bool ok = false;
    try {
      ok = p.fn(detail);
    } catch (const std::exception& e) {
      detail = e.what();
    }
    if (ok) {
      out << "[ok]   " << p.name << "\n";
    } else {
      out << "[FAIL] " << p.name << (detail.empty() ? "" : ": " + detail) << "\n";
      ++failures;
    }
  }
  out << (failures == 0 ? "selftest: all properties hold\n"
                        : "selftest: " + std::to_string(failures) + " failure(s)\n");
  return failures;
}

}  // namespace avp::harness
