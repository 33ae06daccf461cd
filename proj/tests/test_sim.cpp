#include <doctest.h>

#include <cmath>
#include <set>

#include "avp/render.hpp"
#include "avp/sim.hpp"
#include "avp/supervision.hpp"
#include "test_util.hpp"

using namespace avp;
using namespace avp::sim;
using geometry::Point3;

namespace {

double xy(const Point3& a, const Point3& b) { return std::hypot(a.x - b.x, a.y - b.y); }

// Minimal noise-free driver used to exercise step() without the scripted
// expert: walks the ee to a goal in clamped increments, keeping the gripper.
SceneState drive_to(SceneState s, const SimConfig& cfg, const Point3& goal) {
  for (int k = 0; k < 400; ++k) {
    Point3 d = goal - s.ee_pos;
    if (geometry::norm(d) < 1e-12) break;
    ActionStep a{d.x, d.y, d.z, s.gripper};
    s = step(s, a, cfg);
  }
  return s;
}

SceneState grip(SceneState s, const SimConfig& cfg, double aperture) {
  return step(s, {0, 0, 0, aperture}, cfg);
}

}  // namespace

TEST_CASE("board cells and the staging slot project inside the image") {
  SimConfig cfg;
  trajio::CameraModel cam = default_camera();
  CHECK(geometry::is_rotation(cam.extrinsic.rotation, 1e-9));
  auto inside = [&](const Point3& p) {
    auto a = geometry::project(cam.intrinsics, cam.extrinsic, p);
    return a.u >= 0 && a.u < cam.image_width && a.v >= 0 && a.v < cam.image_height;
  };
  for (int c = 0; c < n_cells(cfg); ++c) CHECK(inside(cell_center_3d(cfg, c)));
  CHECK(inside(slot_center_3d(cfg, 0)));
}

TEST_CASE("cell grid is row-major from the board origin") {
  SimConfig cfg;
  Point3 c0 = cell_center_3d(cfg, 0);
  CHECK(c0.x == doctest::Approx(cfg.board_x0));
  CHECK(c0.y == doctest::Approx(cfg.board_y0));
  Point3 c1 = cell_center_3d(cfg, 1);
  CHECK(c1.x == doctest::Approx(cfg.board_x0 + cfg.spacing));
  CHECK(c1.y == doctest::Approx(cfg.board_y0));
  Point3 crow = cell_center_3d(cfg, cfg.board_u);
  CHECK(crow.x == doctest::Approx(cfg.board_x0));
  CHECK(crow.y == doctest::Approx(cfg.board_y0 + cfg.spacing));
  CHECK(slot_center_3d(cfg, 0).x == doctest::Approx(cfg.staging_x));
}

TEST_CASE("init_scene is deterministic and puts pieces on distinct cells") {
  SimConfig cfg;
  SceneState a = init_scene(42, cfg, 12);
  SceneState b = init_scene(42, cfg, 12);
  REQUIRE(a.pieces.size() == 12);
  REQUIRE(b.pieces.size() == 12);
  std::set<int> cells;
  for (std::size_t i = 0; i < a.pieces.size(); ++i) {
    CHECK(a.pieces[i].cell == b.pieces[i].cell);
    CHECK(a.pieces[i].state == PieceState::OnCell);
    cells.insert(a.pieces[i].cell);
    Point3 want = cell_center_3d(cfg, a.pieces[i].cell);
    CHECK(a.pieces[i].pos.x == want.x);
    CHECK(a.pieces[i].pos.y == want.y);
    CHECK(a.pieces[i].pos.z == cfg.piece_z);
  }
  CHECK(cells.size() == 12);  // no stacking
  CHECK(a.ee_pos.x == cfg.home.x);
  CHECK(a.gripper == 1.0);
  CHECK(a.held == -1);

  SceneState c = init_scene(43, cfg, 12);
  bool same = true;
  for (std::size_t i = 0; i < c.pieces.size(); ++i) same = same && c.pieces[i].cell == a.pieces[i].cell;
  CHECK_FALSE(same);

  CHECK_THROWS_AS(init_scene(1, cfg, n_cells(cfg) + 1), TooManyPieces);
}

TEST_CASE("init_scene_for_task reserves the source and frees the target") {
  SimConfig cfg;
  TaskSpec task{17, 63, WaypointMode::TwoStage, 0, 0};
  SceneState s = init_scene_for_task(7, cfg, 12, task);
  CHECK(s.source_piece == 0);
  CHECK(s.pieces[0].cell == task.source_cell);
  CHECK(piece_on_cell(s, task.target_cell) == -1);
  std::set<int> cells;
  for (const Piece& p : s.pieces) cells.insert(p.cell);
  CHECK(cells.size() == s.pieces.size());
  CHECK_THROWS_AS(init_scene_for_task(7, cfg, 0, task), TooManyPieces);
  CHECK_THROWS_AS(init_scene_for_task(7, cfg, n_cells(cfg), task), TooManyPieces);
}

TEST_CASE("step clamps motion to the per-axis limit and the table box") {
  SimConfig cfg;
  SceneState s = init_scene(1, cfg, 0);
  SceneState moved = step(s, {1.0, -1.0, 1.0, 1.0}, cfg);
  CHECK(moved.ee_pos.x == doctest::Approx(s.ee_pos.x + cfg.step_size));
  CHECK(moved.ee_pos.y == doctest::Approx(s.ee_pos.y - cfg.step_size));
  CHECK(moved.ee_pos.z == doctest::Approx(s.ee_pos.z + cfg.step_size));

  for (int k = 0; k < 40; ++k) s = step(s, {0, 0, 1.0, 1.0}, cfg);
  CHECK(s.ee_pos.z == cfg.table_max.z);
  for (int k = 0; k < 40; ++k) s = step(s, {-1.0, 0, 0, 1.0}, cfg);
  CHECK(s.ee_pos.x == cfg.table_min.x);

  SceneState g = step(s, {0, 0, 0, 1.7}, cfg);
  CHECK(g.gripper == 1.0);
  g = step(g, {0, 0, 0, -0.3}, cfg);
  CHECK(g.gripper == 0.0);
}

TEST_CASE("closing within tolerance grasps the nearest piece") {
  SimConfig cfg;
  TaskSpec task{40, 50, WaypointMode::Direct, 0, 0};
  SceneState s = init_scene_for_task(3, cfg, 1, task);
  Point3 src = cell_center_3d(cfg, task.source_cell);

  SUBCASE("grasp, track, release onto a free cell") {
    s = drive_to(s, cfg, {src.x, src.y, cfg.grasp_z});
    s = grip(s, cfg, 0.0);
    CHECK(s.held == 0);
    CHECK(s.pieces[0].state == PieceState::Held);
    CHECK(s.first_grasp == 0);
    REQUIRE(s.grasped_ids.size() == 1);

    Point3 tgt = cell_center_3d(cfg, task.target_cell);
    s = drive_to(s, cfg, {tgt.x, tgt.y, cfg.travel_z});
    CHECK(s.pieces[0].pos.x == s.ee_pos.x);  // held piece rides the ee
    CHECK(s.pieces[0].pos.z == s.ee_pos.z);

    s = grip(s, cfg, 1.0);
    CHECK(s.held == -1);
    CHECK(s.pieces[0].state == PieceState::OnCell);
    CHECK(s.pieces[0].cell == task.target_cell);
    CHECK(s.pieces[0].pos.x == tgt.x);
    CHECK(s.pieces[0].pos.z == cfg.piece_z);
    EpisodeResult r = evaluate_episode(s, task, cfg);
    CHECK(r.instr_ok);
    CHECK(r.pick_ok);
    CHECK(r.place_ok);
  }

  SUBCASE("closing just outside the tolerance grasps nothing") {
    s = drive_to(s, cfg, {src.x + cfg.grasp_tol + 1e-3, src.y, cfg.grasp_z});
    s = grip(s, cfg, 0.0);
    CHECK(s.held == -1);
    CHECK(s.pieces[0].state == PieceState::OnCell);
  }

  SUBCASE("closing while already closed does not grasp") {
    s = grip(s, cfg, 0.0);  // close far away
    s = drive_to(s, cfg, {src.x, src.y, cfg.grasp_z});
    s = grip(s, cfg, 0.0);  // no open->closed crossing
    CHECK(s.held == -1);
  }

  SUBCASE("release away from any cell center drops the piece loose") {
    s = drive_to(s, cfg, {src.x, src.y, cfg.grasp_z});
    s = grip(s, cfg, 0.0);
    REQUIRE(s.held == 0);
    Point3 between = cell_center_3d(cfg, task.source_cell);
    between.x += cfg.spacing / 2;  // halfway between two centers, > place_tol from both
    s = drive_to(s, cfg, {between.x, between.y, cfg.travel_z});
    s = grip(s, cfg, 1.0);
    CHECK(s.pieces[0].state == PieceState::Loose);
    CHECK(s.pieces[0].pos.x == s.ee_pos.x);
    CHECK(s.pieces[0].pos.z == cfg.piece_z);
    EpisodeResult r = evaluate_episode(s, task, cfg);
    CHECK(r.pick_ok);
    CHECK_FALSE(r.place_ok);
  }
}

TEST_CASE("release onto an occupied cell drops the piece loose") {
  SimConfig cfg;
  TaskSpec task{10, 20, WaypointMode::Direct, 0, 0};
  SceneState s = init_scene_for_task(5, cfg, 2, task);
  int occupied = s.pieces[1].cell;
  Point3 src = cell_center_3d(cfg, task.source_cell);
  s = drive_to(s, cfg, {src.x, src.y, cfg.grasp_z});
  s = grip(s, cfg, 0.0);
  REQUIRE(s.held == 0);
  Point3 over = cell_center_3d(cfg, occupied);
  s = drive_to(s, cfg, {over.x, over.y, cfg.travel_z});
  s = grip(s, cfg, 1.0);
  CHECK(s.pieces[0].state == PieceState::Loose);
  CHECK(s.pieces[1].state == PieceState::OnCell);
}

TEST_CASE("grasping the wrong piece first fails the instruction check") {
  SimConfig cfg;
  TaskSpec task{30, 60, WaypointMode::Direct, 0, 0};
  SceneState s = init_scene_for_task(11, cfg, 2, task);
  Point3 decoy = s.pieces[1].pos;
  s = drive_to(s, cfg, {decoy.x, decoy.y, cfg.grasp_z});
  s = grip(s, cfg, 0.0);
  REQUIRE(s.held == 1);
  s = grip(s, cfg, 1.0);  // put it back down wherever

  Point3 src = cell_center_3d(cfg, task.source_cell);
  s = drive_to(s, cfg, {src.x, src.y, cfg.grasp_z});
  s = grip(s, cfg, 0.0);
  REQUIRE(s.held == 0);
  Point3 tgt = cell_center_3d(cfg, task.target_cell);
  s = drive_to(s, cfg, {tgt.x, tgt.y, cfg.travel_z});
  s = grip(s, cfg, 1.0);

  EpisodeResult r = evaluate_episode(s, task, cfg);
  CHECK_FALSE(r.instr_ok);
  CHECK(r.pick_ok);
  CHECK(r.place_ok);
}

TEST_CASE("scripted expert solves its task and leaves a clean gripper trace") {
  SimConfig cfg;
  auto rng = avp::make_rng(5, 1000000);
  TaskSpec task{4, 85, WaypointMode::TwoStage, 0,
                TaskSpec::make_instruction_id(4, 85, n_cells(SimConfig{}))};
  SceneState s0 = init_scene_for_task(9, cfg, 12, task);
  trajio::Trajectory traj = scripted_expert(s0, task, cfg, "ep_test", rng);

  CHECK(traj.episode_id == "ep_test");
  CHECK(traj.task.instruction_id == task.instruction_id);
  REQUIRE(traj.steps.size() >= 10);
  for (std::size_t i = 0; i < traj.steps.size(); ++i) {
    REQUIRE(traj.steps[i].obs != nullptr);
    CHECK(traj.steps[i].obs->channels == 3);
    CHECK(traj.steps[i].obs->height == 64);
    if (i) CHECK(traj.steps[i].timestamp > traj.steps[i - 1].timestamp);
  }

  // Exactly two grasp/release cycles at the default keyframe threshold.
  supervision::SupervisionConfig sup;
  auto kf = supervision::extract_keyframes(supervision::gripper_signal(traj), sup);
  REQUIRE(kf.indices.size() == 4);
  CHECK(kf.kinds[0] == supervision::KeyframeKind::Grasp);
  CHECK(kf.kinds[1] == supervision::KeyframeKind::Release);
  CHECK(kf.kinds[2] == supervision::KeyframeKind::Grasp);
  CHECK(kf.kinds[3] == supervision::KeyframeKind::Release);

  // Interactions happen where the task says they should.
  Point3 src = cell_center_3d(cfg, task.source_cell);
  Point3 via = slot_center_3d(cfg, task.via_slot);
  Point3 tgt = cell_center_3d(cfg, task.target_cell);
  auto ee_at = [&](int k) {
    return traj.steps[static_cast<std::size_t>(kf.indices[static_cast<std::size_t>(k)])]
        .proprio.ee_pos;
  };
  CHECK(xy(ee_at(0), src) < 0.012);
  CHECK(xy(ee_at(1), via) < 0.012);
  CHECK(xy(ee_at(2), via) < 0.012);
  CHECK(xy(ee_at(3), tgt) < 0.012);

  SUBCASE("direct mode has a single cycle") {
    auto rng2 = avp::make_rng(6, 1000000);
    TaskSpec direct{4, 85, WaypointMode::Direct, 0, task.instruction_id};
    auto t2 = scripted_expert(s0, direct, cfg, "ep_direct", rng2);
    auto kf2 = supervision::extract_keyframes(supervision::gripper_signal(t2), sup);
    REQUIRE(kf2.indices.size() == 2);
    CHECK(xy(t2.steps[static_cast<std::size_t>(kf2.indices[1])].proprio.ee_pos, tgt) < 0.012);
    CHECK(t2.steps.size() < traj.steps.size());  // no staging detour
  }

  SUBCASE("same seed reproduces the trajectory bit for bit") {
    auto rng3 = avp::make_rng(5, 1000000);
    auto t3 = scripted_expert(s0, task, cfg, "ep_test", rng3);
    REQUIRE(t3.steps.size() == traj.steps.size());
    for (std::size_t i = 0; i < t3.steps.size(); ++i) {
      CHECK(t3.steps[i].proprio.ee_pos.x == traj.steps[i].proprio.ee_pos.x);
      CHECK(t3.steps[i].proprio.gripper_cmd == traj.steps[i].proprio.gripper_cmd);
      CHECK(*t3.steps[i].obs == *traj.steps[i].obs);
    }
  }

  SUBCASE("infeasible tasks are rejected") {
    TaskSpec empty_src{task.target_cell, 4, WaypointMode::Direct, 0, 0};
    CHECK_THROWS_AS(scripted_expert(s0, empty_src, cfg, "bad", rng), InfeasibleTask);
    TaskSpec occupied_tgt{task.source_cell, s0.pieces[1].cell, WaypointMode::Direct, 0, 0};
    CHECK_THROWS_AS(scripted_expert(s0, occupied_tgt, cfg, "bad", rng), InfeasibleTask);
  }
}

TEST_CASE("render_camera draws the documented layers") {
  SimConfig cfg;
  trajio::CameraModel cam = default_camera();

  SceneState empty = init_scene(1, cfg, 0);
  render::RasterImage base = render_camera(empty, cam, cfg);
  REQUIRE(base.channels == 3);
  REQUIRE(base.width == 64);

  SUBCASE("empty board is background plus one dark dot per visible cell") {
    std::set<std::pair<int, int>> dot_px;
    for (int c = 0; c < n_cells(cfg); ++c) {
      auto a = geometry::project(cam.intrinsics, cam.extrinsic, cell_center_3d(cfg, c));
      int x = static_cast<int>(std::floor(a.u)), y = static_cast<int>(std::floor(a.v));
      if (x >= 0 && x < 64 && y >= 0 && y < 64) dot_px.insert({x, y});
    }
    int non_bg = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        bool bg = base.at(0, y, x) == 0.55f && base.at(1, y, x) == 0.55f && base.at(2, y, x) == 0.55f;
        if (!bg) {
          ++non_bg;
          CHECK(dot_px.count({x, y}) == 1);
        }
      }
    CHECK(non_bg == static_cast<int>(dot_px.size()));
  }

  SUBCASE("a resting piece renders a disc centered on its projection") {
    SceneState one = empty;
    Piece p;
    p.id = 0;
    p.state = PieceState::OnCell;
    p.cell = 44;
    p.pos = cell_center_3d(cfg, 44);
    p.pos.z = cfg.piece_z;
    one.pieces.push_back(p);
    render::RasterImage img = render_camera(one, cam, cfg);
    double sx = 0, sy = 0;
    int n = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (img.at(0, y, x) != base.at(0, y, x) || img.at(1, y, x) != base.at(1, y, x) ||
            img.at(2, y, x) != base.at(2, y, x)) {
          sx += x + 0.5;
          sy += y + 0.5;
          ++n;
        }
    REQUIRE(n > 0);
    CHECK(n <= 25);  // a radius-2 disc touches at most a 5x5 block
    auto a = geometry::project(cam.intrinsics, cam.extrinsic, p.pos);
    CHECK(std::abs(sx / n - a.u) < 1.0);
    CHECK(std::abs(sy / n - a.v) < 1.0);
  }

  SUBCASE("held pieces carry a white ring, resting boards have none") {
    auto count_white = [](const render::RasterImage& img) {
      int n = 0;
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
          if (img.at(0, y, x) == 1.0f && img.at(1, y, x) == 1.0f && img.at(2, y, x) == 1.0f) ++n;
      return n;
    };
    SceneState rest = init_scene(2, cfg, 12);
    CHECK(count_white(render_camera(rest, cam, cfg)) == 0);

    SceneState carrying = rest;
    carrying.ee_pos = {0.30, 0.0, cfg.travel_z};
    carrying.held = 3;
    carrying.pieces[3].state = PieceState::Held;
    carrying.pieces[3].cell = -1;
    carrying.pieces[3].pos = carrying.ee_pos;
    render::RasterImage img = render_camera(carrying, cam, cfg);
    CHECK(count_white(img) > 20);  // ring interior minus the piece disc

    auto a = geometry::project(cam.intrinsics, cam.extrinsic, carrying.ee_pos);
    bool near_ee = false;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (img.at(0, y, x) == 1.0f && img.at(1, y, x) == 1.0f && img.at(2, y, x) == 1.0f &&
            std::hypot(x - a.u, y - a.v) < 7)
          near_ee = true;
    CHECK(near_ee);
  }

  SUBCASE("rendering is deterministic") {
    SceneState rest = init_scene(3, cfg, 12);
    CHECK(render_camera(rest, cam, cfg) == render_camera(rest, cam, cfg));
  }
}
