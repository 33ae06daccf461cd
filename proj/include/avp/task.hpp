#pragma once

namespace avp::sim {

enum class WaypointMode { TwoStage, Direct };

// A pick-and-place command: move the piece on source_cell to target_cell,
// either through the off-board staging slot (TwoStage) or straight (Direct).
struct TaskSpec {
  int source_cell = 0;
  int target_cell = 0;
  WaypointMode waypoint_mode = WaypointMode::TwoStage;
  int via_slot = 0;  // staging slot id; meaningful in TwoStage mode only
  int instruction_id = 0;

  static int make_instruction_id(int source, int target, int n_cells) {
    return source * n_cells + target;
  }
};

// One low-level command: end-effector delta in meters plus gripper aperture
// command in [0,1]. Deltas beyond the simulator step size are clamped by step().
struct ActionStep {
  double dx = 0.0;
  double dy = 0.0;
  double dz = 0.0;
  double gripper = 1.0;
};

}  // namespace avp::sim
