#include "avp/supervision.hpp"

#include <algorithm>
#include <cmath>

namespace avp::supervision {

std::vector<double> gripper_signal(const trajio::Trajectory& traj, GripperSignalKind kind) {
  std::vector<double> g;
  g.reserve(traj.steps.size());
  for (const auto& s : traj.steps) {
    if (kind == GripperSignalKind::Command)
      g.push_back(s.proprio.gripper_cmd);
    else
      g.push_back(s.proprio.gripper_cmd - s.proprio.gripper_meas);
  }
  return g;
}

KeyframeSet extract_keyframes(const std::vector<double>& signal, const SupervisionConfig& cfg) {
  KeyframeSet out;
  long long last_kept = -(1LL << 40);
  for (std::size_t t = 1; t < signal.size(); ++t) {
    double d = signal[t] - signal[t - 1];
    if (std::abs(d) <= cfg.delta) continue;
    if (static_cast<long long>(t) - last_kept < cfg.min_stage_gap) continue;  // keep cluster onset
    last_kept = static_cast<long long>(t);
    out.indices.push_back(static_cast<int>(t));
    bool closing = d < 0.0;
    if (cfg.invert_kinds) closing = !closing;
    out.kinds.push_back(closing ? KeyframeKind::Grasp : KeyframeKind::Release);
  }
  return out;
}

geometry::PixelAnchor anchor_for_keyframe(const trajio::Trajectory& traj, int t,
                                          const trajio::CameraModel& cam) {
  const auto& p = traj.steps.at(static_cast<std::size_t>(t)).proprio.ee_pos;
  geometry::PixelAnchor a = geometry::project(cam.intrinsics, cam.extrinsic, p);
  if (a.u < 0.0 || a.u >= cam.image_width || a.v < 0.0 || a.v >= cam.image_height)
    throw OffImage("anchor (" + std::to_string(a.u) + ", " + std::to_string(a.v) +
                   ") outside " + std::to_string(cam.image_width) + "x" +
                   std::to_string(cam.image_height) + " at step " + std::to_string(t));
  return a;
}

GridCell discretize_anchor(const geometry::PixelAnchor& a, const trajio::CameraModel& cam,
                           const SupervisionConfig& cfg) {
  GridCell c;
  c.cell_u = std::min(static_cast<int>(std::floor(a.u * cfg.grid_u / cam.image_width)),
                      cfg.grid_u - 1);
  c.cell_v = std::min(static_cast<int>(std::floor(a.v * cfg.grid_v / cam.image_height)),
                      cfg.grid_v - 1);
  c.cell_index = c.cell_v * cfg.grid_u + c.cell_u;
  return c;
}

geometry::PixelAnchor cell_center(int cell_u, int cell_v, const trajio::CameraModel& cam,
                                  const SupervisionConfig& cfg) {
  double du = static_cast<double>(cam.image_width) / cfg.grid_u;
  double dv = static_cast<double>(cam.image_height) / cfg.grid_v;
  return {(cell_u + 0.5) * du, (cell_v + 0.5) * dv, 0.0};
}

SupervisionResult build_supervision(const trajio::Trajectory& traj,
                                    const trajio::CameraModel& cam,
                                    const SupervisionConfig& cfg) {
  KeyframeSet keys = extract_keyframes(gripper_signal(traj, cfg.signal), cfg);
  if (keys.indices.empty())
    throw NoKeyframes("episode '" + traj.episode_id + "': gripper signal has no transitions");

  SupervisionResult out;
  struct Usable {
    int step;
    PrimitiveLabel label;
  };
  std::vector<Usable> usable;
  for (std::size_t i = 0; i < keys.indices.size(); ++i) {
    int t = keys.indices[i];
    PrimitiveLabel label;
    label.stage = keys.kinds[i] == KeyframeKind::Grasp ? Stage::Pick : Stage::Place;
    try {
      label.anchor = anchor_for_keyframe(traj, t, cam);
    } catch (const OffImage&) {
      out.drops.push_back({traj.episode_id, t, "off_image"});
      continue;
    } catch (const geometry::BehindCamera&) {
      out.drops.push_back({traj.episode_id, t, "behind_camera"});
      continue;
    }
    GridCell c = discretize_anchor(label.anchor, cam, cfg);
    label.cell_u = c.cell_u;
    label.cell_v = c.cell_v;
    label.cell_index = c.cell_index;
    usable.push_back({t, label});
  }
  if (usable.empty()) return out;  // all keyframes dropped; caller skips the episode

  // Next-stage targeting: step t gets the first usable keyframe at or after t;
  // steps after the last keyframe keep the last label.
  std::size_t k = 0;
  for (int t = 0; t < static_cast<int>(traj.steps.size()); ++t) {
    while (k + 1 < usable.size() && usable[k].step < t) ++k;
    const Usable& u = (usable[k].step >= t) ? usable[k] : usable.back();
    int stage_index = static_cast<int>((usable[k].step >= t) ? k : usable.size() - 1);
    out.labels.push_back({stage_index, t, u.label});
  }
  return out;
}

}  // namespace avp::supervision
