#include "avp/sim.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "avp/render.hpp"

namespace avp::sim {

using geometry::Point3;

trajio::CameraModel default_camera() {
  trajio::CameraModel cam;
  cam.camera_id = "cam0";
  cam.image_width = 64;
  cam.image_height = 64;
  cam.intrinsics = {90.0, 90.0, 32.0, 32.0};

  const Point3 board_center{0.30, 0.0, 0.0};
  const double elev = 45.0 * 3.14159265358979323846 / 180.0;
  const double dist = 0.5;
  const Point3 cam_pos = board_center + dist * Point3{-std::cos(elev), 0.0, std::sin(elev)};

  // Camera axes as rows of the base->camera rotation: z looks at the board
  // center, x points along -y in base frame so +u is rightward in the view,
  // y completes the right-handed frame (far board edge renders at the top).
  const Point3 zc = geometry::normalized(board_center - cam_pos);
  const Point3 xc{0.0, -1.0, 0.0};
  const Point3 yc = geometry::cross(zc, xc);
  geometry::Mat3& r = cam.extrinsic.rotation;
  r(0, 0) = xc.x; r(0, 1) = xc.y; r(0, 2) = xc.z;
  r(1, 0) = yc.x; r(1, 1) = yc.y; r(1, 2) = yc.z;
  r(2, 0) = zc.x; r(2, 1) = zc.y; r(2, 2) = zc.z;
  cam.extrinsic.translation = {-geometry::dot(xc, cam_pos), -geometry::dot(yc, cam_pos),
                               -geometry::dot(zc, cam_pos)};
  return cam;
}

Point3 cell_center_3d(const SimConfig& cfg, int cell_index) {
  int i = cell_index % cfg.board_u;
  int j = cell_index / cfg.board_u;
  return {cfg.board_x0 + i * cfg.spacing, cfg.board_y0 + j * cfg.spacing, 0.0};
}

Point3 slot_center_3d(const SimConfig& cfg, int slot) {
  return {cfg.staging_x, cfg.staging_y + slot * cfg.spacing, 0.0};
}

int piece_on_cell(const SceneState& scene, int cell) {
  for (const Piece& p : scene.pieces)
    if (p.state == PieceState::OnCell && p.cell == cell) return p.id;
  return -1;
}

namespace {

Piece make_piece(int id, const SimConfig& cfg, int cell) {
  Piece p;
  p.id = id;
  p.state = PieceState::OnCell;
  p.cell = cell;
  p.pos = cell_center_3d(cfg, cell);
  p.pos.z = cfg.piece_z;
  return p;
}

// First n entries of a seeded partial Fisher-Yates shuffle of `cells`.
std::vector<int> sample_cells(std::vector<int> cells, int n, Rng& rng) {
  for (int k = 0; k < n; ++k) {
    std::size_t j = k + uniform_int(rng, cells.size() - k);
    std::swap(cells[static_cast<std::size_t>(k)], cells[j]);
  }
  cells.resize(static_cast<std::size_t>(n));
  return cells;
}

SceneState home_scene(const SimConfig& cfg) {
  SceneState s;
  s.ee_pos = cfg.home;
  s.gripper = 1.0;
  return s;
}

}  // namespace

SceneState init_scene(std::uint64_t seed, const SimConfig& cfg, int n_pieces) {
  if (n_pieces > n_cells(cfg))
    throw TooManyPieces(std::to_string(n_pieces) + " pieces on " + std::to_string(n_cells(cfg)) +
                        " cells");
  SceneState s = home_scene(cfg);
  std::vector<int> all(static_cast<std::size_t>(n_cells(cfg)));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  Rng rng = make_rng(seed, 0x5ce11e);
  for (int cell : sample_cells(std::move(all), n_pieces, rng))
    s.pieces.push_back(make_piece(static_cast<int>(s.pieces.size()), cfg, cell));
  return s;
}

SceneState init_scene_for_task(std::uint64_t seed, const SimConfig& cfg, int n_pieces,
                               const TaskSpec& task) {
  if (n_pieces < 1 || n_pieces > n_cells(cfg) - 1)
    throw TooManyPieces("need 1.." + std::to_string(n_cells(cfg) - 1) +
                        " pieces with a free target, got " + std::to_string(n_pieces));
  SceneState s = home_scene(cfg);
  s.pieces.push_back(make_piece(0, cfg, task.source_cell));
  s.source_piece = 0;
  std::vector<int> rest;
  for (int c = 0; c < n_cells(cfg); ++c)
    if (c != task.source_cell && c != task.target_cell) rest.push_back(c);
  Rng rng = make_rng(seed, 0x5ce11e);
  for (int cell : sample_cells(std::move(rest), n_pieces - 1, rng))
    s.pieces.push_back(make_piece(static_cast<int>(s.pieces.size()), cfg, cell));
  return s;
}

namespace {

double clamp(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

double xy_dist(const Point3& a, const Point3& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

int nearest_cell(const SimConfig& cfg, const Point3& p) {
  int i = static_cast<int>(std::lround((p.x - cfg.board_x0) / cfg.spacing));
  int j = static_cast<int>(std::lround((p.y - cfg.board_y0) / cfg.spacing));
  i = std::clamp(i, 0, cfg.board_u - 1);
  j = std::clamp(j, 0, cfg.board_v - 1);
  return j * cfg.board_u + i;
}

}  // namespace

SceneState step(const SceneState& scene, const ActionStep& action, const SimConfig& cfg) {
  SceneState s = scene;
  s.ee_pos.x = clamp(s.ee_pos.x + clamp(action.dx, -cfg.step_size, cfg.step_size),
                     cfg.table_min.x, cfg.table_max.x);
  s.ee_pos.y = clamp(s.ee_pos.y + clamp(action.dy, -cfg.step_size, cfg.step_size),
                     cfg.table_min.y, cfg.table_max.y);
  s.ee_pos.z = clamp(s.ee_pos.z + clamp(action.dz, -cfg.step_size, cfg.step_size),
                     cfg.table_min.z, cfg.table_max.z);

  const double g_new = clamp(action.gripper, 0.0, 1.0);
  const bool was_open = scene.gripper >= 0.5;
  const bool now_open = g_new >= 0.5;

  if (was_open && !now_open && s.held < 0) {
    int best = -1;
    double best_d = cfg.grasp_tol;
    for (const Piece& p : s.pieces) {
      if (p.state == PieceState::Held) continue;
      double d = xy_dist(p.pos, s.ee_pos);
      if (d <= best_d && (best < 0 || d < best_d)) {
        best = p.id;
        best_d = d;
      }
    }
    if (best >= 0) {
      Piece& p = s.pieces[static_cast<std::size_t>(best)];
      p.state = PieceState::Held;
      p.cell = -1;
      s.held = best;
      if (s.first_grasp < 0) s.first_grasp = best;
      if (std::find(s.grasped_ids.begin(), s.grasped_ids.end(), best) == s.grasped_ids.end())
        s.grasped_ids.push_back(best);
    }
  } else if (!was_open && now_open && s.held >= 0) {
    Piece& p = s.pieces[static_cast<std::size_t>(s.held)];
    int cell = nearest_cell(cfg, s.ee_pos);
    Point3 center = cell_center_3d(cfg, cell);
    if (xy_dist(center, s.ee_pos) <= cfg.place_tol && piece_on_cell(s, cell) < 0) {
      p.state = PieceState::OnCell;
      p.cell = cell;
      p.pos = center;
      p.pos.z = cfg.piece_z;
    } else {
      p.state = PieceState::Loose;
      p.cell = -1;
      p.pos = {s.ee_pos.x, s.ee_pos.y, cfg.piece_z};
    }
    s.held = -1;
  }

  s.gripper = g_new;
  if (s.held >= 0) s.pieces[static_cast<std::size_t>(s.held)].pos = s.ee_pos;
  return s;
}

namespace {

render::Rgb hsv_to_rgb(double h, double sat, double val) {
  double r = 0, g = 0, b = 0;
  double i = std::floor(h * 6.0);
  double f = h * 6.0 - i;
  double p = val * (1.0 - sat);
  double q = val * (1.0 - f * sat);
  double t = val * (1.0 - (1.0 - f) * sat);
  switch (static_cast<int>(i) % 6) {
    case 0: r = val; g = t; b = p; break;
    case 1: r = q; g = val; b = p; break;
    case 2: r = p; g = val; b = t; break;
    case 3: r = p; g = q; b = val; break;
    case 4: r = t; g = p; b = val; break;
    case 5: r = val; g = p; b = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

render::Rgb piece_color(int id) {
  double hue = std::fmod(0.61803398874989485 * (id + 1), 1.0);
  return hsv_to_rgb(hue, 0.8, 0.9);
}

void put_rgb(render::RasterImage& img, int x, int y, const render::Rgb& c) {
  if (x < 0 || x >= img.width || y < 0 || y >= img.height) return;
  img.at(0, y, x) = c.r;
  img.at(1, y, x) = c.g;
  img.at(2, y, x) = c.b;
}

void draw_disc(render::RasterImage& img, const trajio::CameraModel& cam, const Point3& p,
               double radius, const render::Rgb& color) {
  geometry::PixelAnchor a;
  try {
    a = geometry::project(cam.intrinsics, cam.extrinsic, p);
  } catch (const geometry::BehindCamera&) {
    return;
  }
  int px = static_cast<int>(std::floor(a.u));
  int py = static_cast<int>(std::floor(a.v));
  int r = static_cast<int>(std::ceil(radius));
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= radius * radius) put_rgb(img, px + dx, py + dy, color);
}

}  // namespace

render::RasterImage render_camera(const SceneState& scene, const trajio::CameraModel& cam,
                                  const SimConfig& cfg) {
  auto img = render::RasterImage::filled(3, cam.image_height, cam.image_width, 0.55f);
  const render::Rgb dot{0.25f, 0.25f, 0.25f};
  for (int c = 0; c < n_cells(cfg); ++c) {
    geometry::PixelAnchor a;
    try {
      a = geometry::project(cam.intrinsics, cam.extrinsic, cell_center_3d(cfg, c));
    } catch (const geometry::BehindCamera&) {
      continue;
    }
    put_rgb(img, static_cast<int>(std::floor(a.u)), static_cast<int>(std::floor(a.v)), dot);
  }
  for (const Piece& p : scene.pieces)
    if (p.state != PieceState::Held) draw_disc(img, cam, p.pos, 2.0, piece_color(p.id));
  // A held piece rides inside a white carry ring. Without it a carried piece
  // at travel height projects onto another cell's resting spot and the image
  // alone cannot tell mid-carry from a settled board.
  for (const Piece& p : scene.pieces)
    if (p.state == PieceState::Held) {
      draw_disc(img, cam, scene.ee_pos, 5.0, render::Rgb{1.0f, 1.0f, 1.0f});
      draw_disc(img, cam, scene.ee_pos, 2.0, piece_color(p.id));
    }
  return img;
}

namespace {

// Closed-loop demonstration driver: every emitted state is rendered and
// logged; deltas get Gaussian jitter before the simulator clamps them.
struct ExpertRun {
  SceneState scene;
  const SimConfig& cfg;
  Rng& rng;
  trajio::Trajectory traj;
  int t = 0;

  void record() {
    trajio::TrajectoryStep s;
    s.timestamp = t * cfg.dt;
    s.proprio.ee_pos = scene.ee_pos;
    s.proprio.gripper_cmd = scene.gripper;
    s.proprio.gripper_meas = scene.gripper;
    s.obs = std::make_shared<render::RasterImage>(render_camera(scene, cfg.camera, cfg));
    traj.steps.push_back(std::move(s));
    ++t;
  }

  void apply(double dx, double dy, double dz, double grip) {
    ActionStep a;
    a.dx = dx + cfg.noise * gauss(rng);
    a.dy = dy + cfg.noise * gauss(rng);
    a.dz = dz + cfg.noise * gauss(rng);
    a.gripper = grip;
    scene = step(scene, a, cfg);
    record();
  }

  void move_to(const Point3& goal, int max_steps = 200, double tol = 0.002) {
    for (int k = 0; k < max_steps; ++k) {
      Point3 d = goal - scene.ee_pos;
      if (geometry::norm(d) <= tol) break;
      apply(d.x, d.y, d.z, scene.gripper);
    }
  }

  void close_gripper() {
    apply(0, 0, 0, 0.45);
    apply(0, 0, 0, 0.0);
  }
  void open_gripper() {
    apply(0, 0, 0, 0.55);
    apply(0, 0, 0, 1.0);
  }

  void pick_at(const Point3& p) {
    move_to({p.x, p.y, cfg.travel_z});
    move_to({p.x, p.y, cfg.grasp_z});
    close_gripper();
    move_to({scene.ee_pos.x, scene.ee_pos.y, cfg.travel_z});
  }

  void place_at(const Point3& p) {
    move_to({p.x, p.y, cfg.travel_z});
    move_to({p.x, p.y, cfg.grasp_z});
    open_gripper();
    move_to({scene.ee_pos.x, scene.ee_pos.y, cfg.travel_z});
  }
};

}  // namespace

trajio::Trajectory scripted_expert(const SceneState& scene, const TaskSpec& task,
                                   const SimConfig& cfg, const std::string& episode_id,
                                   Rng& rng) {
  if (piece_on_cell(scene, task.source_cell) < 0)
    throw InfeasibleTask("episode '" + episode_id + "': source cell " +
                         std::to_string(task.source_cell) + " is empty");
  if (piece_on_cell(scene, task.target_cell) >= 0)
    throw InfeasibleTask("episode '" + episode_id + "': target cell " +
                         std::to_string(task.target_cell) + " is occupied");

  ExpertRun run{scene, cfg, rng, {}};
  run.traj.episode_id = episode_id;
  run.traj.camera_id = cfg.camera.camera_id;
  run.traj.task = task;
  run.traj.task.instruction_id =
      TaskSpec::make_instruction_id(task.source_cell, task.target_cell, n_cells(cfg));
  run.record();

  run.pick_at(cell_center_3d(cfg, task.source_cell));
  if (task.waypoint_mode == WaypointMode::TwoStage) {
    const Point3 via = slot_center_3d(cfg, task.via_slot);
    run.place_at(via);
    run.pick_at(via);
  }
  run.place_at(cell_center_3d(cfg, task.target_cell));

  run.move_to({cfg.home.x, cfg.home.y, cfg.travel_z}, 8);
  for (int k = 0; k < 10; ++k) run.apply(0, 0, 0, run.scene.gripper);
  return run.traj;
}

EpisodeResult evaluate_episode(const SceneState& final_scene, const TaskSpec& task,
                               const SimConfig& cfg) {
  EpisodeResult r;
  const int src = final_scene.source_piece;
  if (src < 0) return r;
  r.instr_ok = final_scene.first_grasp == src;
  r.pick_ok = std::find(final_scene.grasped_ids.begin(), final_scene.grasped_ids.end(), src) !=
              final_scene.grasped_ids.end();
  if (r.pick_ok) {
    const Piece& p = final_scene.pieces[static_cast<std::size_t>(src)];
    r.place_ok = xy_dist(p.pos, cell_center_3d(cfg, task.target_cell)) <= cfg.place_tol;
  }
  return r;
}

}  // namespace avp::sim
