#pragma once

#include <string>

#include "avp/geometry.hpp"

namespace avp::supervision {

enum class Stage { Pick, Place };

inline const char* stage_name(Stage s) { return s == Stage::Pick ? "pick" : "place"; }

// A discretized interaction target: which stage comes next and which grid cell
// its image-plane anchor falls in. The continuous anchor is retained so
// renderers can draw at the true projection; labels synthesized from a bare
// cell carry a cell-center anchor with depth 0.
struct PrimitiveLabel {
  Stage stage = Stage::Pick;
  int cell_u = 0;
  int cell_v = 0;
  int cell_index = 0;
  geometry::PixelAnchor anchor;
};

inline bool same_cell(const PrimitiveLabel& a, const PrimitiveLabel& b) {
  return a.stage == b.stage && a.cell_u == b.cell_u && a.cell_v == b.cell_v;
}

// A keyframe whose anchor could not be projected; reported, never fabricated.
struct DropEvent {
  std::string episode_id;
  int step = 0;
  std::string reason;  // "off_image" | "behind_camera"
};

}  // namespace avp::supervision
