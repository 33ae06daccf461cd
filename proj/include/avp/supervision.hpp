#pragma once

#include <vector>

#include "avp/primitive.hpp"
#include "avp/trajio.hpp"

namespace avp::supervision {

struct OffImage : Error {
  explicit OffImage(const std::string& m) : Error(m) {}
};
struct NoKeyframes : Error {
  explicit NoKeyframes(const std::string& m) : Error(m) {}
};

// Which scalar is scanned for gripper transitions. Command is the default;
// the command/measurement discrepancy is degenerate in the simulator but
// available for real logs.
enum class GripperSignalKind { Command, Discrepancy };

struct SupervisionConfig {
  double delta = 0.5;      // |Δg| threshold for a keyframe
  int grid_u = 32;         // label grid bins per image axis
  int grid_v = 32;
  int min_stage_gap = 3;   // thinning: min steps between kept keyframes
  GripperSignalKind signal = GripperSignalKind::Command;
  bool invert_kinds = false;  // for grippers with inverted aperture conventions
};

enum class KeyframeKind { Grasp, Release };

struct KeyframeSet {
  std::vector<int> indices;          // strictly increasing step indices
  std::vector<KeyframeKind> kinds;   // parallel to indices
};

struct GridCell {
  int cell_u = 0;
  int cell_v = 0;
  int cell_index = 0;
};

// Per-step supervision: every step carries the label of the next retained
// keyframe at or after it; stage_index counts usable keyframes from 0.
struct StepLabel {
  int stage_index = 0;
  int step = 0;
  PrimitiveLabel label;
};

struct SupervisionResult {
  std::vector<StepLabel> labels;  // one entry per trajectory step, in order
  std::vector<DropEvent> drops;
};

std::vector<double> gripper_signal(const trajio::Trajectory& traj,
                                   GripperSignalKind kind = GripperSignalKind::Command);

KeyframeSet extract_keyframes(const std::vector<double>& signal, const SupervisionConfig& cfg);

// Projects the end-effector at step t into the camera; OffImage when the
// projection leaves [0,width) x [0,height).
geometry::PixelAnchor anchor_for_keyframe(const trajio::Trajectory& traj, int t,
                                          const trajio::CameraModel& cam);

GridCell discretize_anchor(const geometry::PixelAnchor& a, const trajio::CameraModel& cam,
                           const SupervisionConfig& cfg);

// Pixel-space center of a grid cell; depth is left 0 (no 3D information).
geometry::PixelAnchor cell_center(int cell_u, int cell_v, const trajio::CameraModel& cam,
                                  const SupervisionConfig& cfg);

// Full pipeline for one trajectory. Throws NoKeyframes when the gripper signal
// has no transitions; unprojectable keyframes become drop events instead of
// labels (labels may come back empty if every keyframe dropped).
SupervisionResult build_supervision(const trajio::Trajectory& traj,
                                    const trajio::CameraModel& cam,
                                    const SupervisionConfig& cfg);

}  // namespace avp::supervision
