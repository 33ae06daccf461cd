#pragma once

#include <vector>

#include "avp/geometry.hpp"
#include "avp/raster.hpp"
#include "avp/rng.hpp"
#include "avp/task.hpp"
#include "avp/trajio.hpp"

namespace avp::sim {

struct TooManyPieces : Error {
  explicit TooManyPieces(const std::string& m) : Error(m) {}
};
struct InfeasibleTask : Error {
  explicit InfeasibleTask(const std::string& m) : Error(m) {}
};

// Fixed tilted pinhole camera: 45 degrees above the board center at 0.5 m,
// 64x64 image, every board cell and the staging slot in view.
trajio::CameraModel default_camera();

struct SimConfig {
  int board_u = 9;
  int board_v = 10;
  double spacing = 0.03;
  double board_x0 = 0.18;    // board centered at x = 0.30
  double board_y0 = -0.135;  // centered at y = 0
  geometry::Point3 table_min{0.0, -0.25, 0.0};
  geometry::Point3 table_max{0.5, 0.25, 0.3};
  double step_size = 0.015;   // per-axis delta clamp, meters
  double grasp_tol = 0.012;   // 0.4 * spacing
  double place_tol = 0.015;   // 0.5 * spacing
  double noise = 0.0015;      // expert per-step jitter sigma, meters
  double dt = 0.05;           // log timestamp increment, seconds
  double piece_z = 0.01;
  double travel_z = 0.06;     // carry height
  double grasp_z = 0.012;     // interaction height
  double staging_x = 0.13;    // staging slots sit off-board at this x
  double staging_y = 0.0;
  geometry::Point3 home{0.10, 0.0, 0.10};
  trajio::CameraModel camera = default_camera();
};

inline int n_cells(const SimConfig& cfg) { return cfg.board_u * cfg.board_v; }

geometry::Point3 cell_center_3d(const SimConfig& cfg, int cell_index);
geometry::Point3 slot_center_3d(const SimConfig& cfg, int slot);

enum class PieceState { OnCell, Held, Loose };

struct Piece {
  int id = 0;
  PieceState state = PieceState::OnCell;
  int cell = -1;  // valid when OnCell
  geometry::Point3 pos;
};

struct SceneState {
  std::vector<Piece> pieces;
  geometry::Point3 ee_pos;
  double gripper = 1.0;  // aperture: 1 open, 0 closed
  int held = -1;         // piece id or -1
  // Episode bookkeeping consumed by evaluate_episode.
  int source_piece = -1;         // piece that started on the task's source cell
  int first_grasp = -1;          // first piece ever attached
  std::vector<int> grasped_ids;  // unique ids ever attached, in order
};

// Piece id currently on a cell, or -1.
int piece_on_cell(const SceneState& scene, int cell);

// Pieces on distinct uniform cells, ee at home. Deterministic per seed.
SceneState init_scene(std::uint64_t seed, const SimConfig& cfg, int n_pieces);

// Same, but guarantees a piece on task.source_cell (piece 0, recorded as
// source_piece) and keeps task.target_cell free.
SceneState init_scene_for_task(std::uint64_t seed, const SimConfig& cfg, int n_pieces,
                               const TaskSpec& task);

// One control tick: clamped ee motion, gripper crossing below 0.5 within
// grasp_tol of a piece attaches it, crossing above while held releases (snap
// to the nearest free cell center within place_tol, else drop loose).
SceneState step(const SceneState& scene, const ActionStep& action, const SimConfig& cfg);

// Gray table, dark dots at projected cell centers, 2 px discs per piece in a
// per-piece hue; a held piece is drawn at the ee, on top, inside a white
// carry ring so carrying is visible in a single frame.
render::RasterImage render_camera(const SceneState& scene, const trajio::CameraModel& cam,
                                  const SimConfig& cfg);

// Demonstration with rendered observations inline. TwoStage routes place,
// release and re-grasp at the staging slot; Direct goes straight. Gripper
// ramps are 1 -> 0.45 -> 0 and 0 -> 0.55 -> 1 so each grasp/release yields
// exactly one keyframe at the default threshold.
trajio::Trajectory scripted_expert(const SceneState& scene, const TaskSpec& task,
                                   const SimConfig& cfg, const std::string& episode_id,
                                   Rng& rng);

struct EpisodeResult {
  bool instr_ok = false;
  bool pick_ok = false;
  bool place_ok = false;
};

EpisodeResult evaluate_episode(const SceneState& final_scene, const TaskSpec& task,
                               const SimConfig& cfg);

}  // namespace avp::sim
