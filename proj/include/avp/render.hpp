#pragma once

#include <iosfwd>
#include <vector>

#include "avp/primitive.hpp"
#include "avp/raster.hpp"

namespace avp::render {

enum class PromptType { None, Point, Box, BoxMask };

struct Rgb {
  float r = 0.0f;
  float g = 0.0f;
  float b = 0.0f;
};

struct RenderConfig {
  PromptType prompt_type = PromptType::BoxMask;
  double alpha = 0.7;        // mask opacity; 0 leaves the background untouched
  int box_half_width = 5;    // pixels from the anchor pixel to the outline
  double point_radius = 2.0; // pixels
  int memory_depth = 1;      // history labels kept by compose
  Rgb pick_color{1.0f, 0.0f, 0.0f};
  Rgb place_color{0.0f, 1.0f, 0.0f};
  Rgb memory_color{0.5f, 0.5f, 0.5f};
};

struct VisualPrimitive {
  supervision::PrimitiveLabel label;
  RenderConfig config;
};

// All drawing positions derive from label.anchor, snapped to the pixel that
// contains it. Inputs are never mutated; outputs share the input's shape and
// stay within [0,1].

// Filled disc: pixels whose centers lie within point_radius of the anchor
// pixel's center, in the stage color.
RasterImage render_point(const RasterImage& img, const supervision::PrimitiveLabel& label,
                         const RenderConfig& cfg);

// One-pixel-wide square outline at Chebyshev distance box_half_width from the
// anchor pixel, clipped to bounds.
RasterImage render_box(const RasterImage& img, const supervision::PrimitiveLabel& label,
                       const RenderConfig& cfg);

// Blends every pixel strictly outside the box region toward black by alpha,
// then draws the outline.
RasterImage render_box_mask(const RasterImage& img, const supervision::PrimitiveLabel& label,
                            const RenderConfig& cfg);

// Mask first (relative to the current label), then history overlays in memory
// style oldest to newest, then the current primitive in stage style.
// History longer than memory_depth is truncated to the newest entries.
// PromptType::None returns the input unchanged.
RasterImage compose(const RasterImage& img, const VisualPrimitive& current,
                    const std::vector<supervision::PrimitiveLabel>& history);

// 8-bit binary PPM (P6), values round(255*v).
void write_ppm(const RasterImage& img, std::ostream& out);

}  // namespace avp::render
