#include "avp/render.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "avp/errors.hpp"

namespace avp::render {

namespace {

struct AnchorPixel {
  int x, y;
};

AnchorPixel anchor_pixel(const supervision::PrimitiveLabel& label) {
  return {static_cast<int>(std::floor(label.anchor.u)), static_cast<int>(std::floor(label.anchor.v))};
}

Rgb stage_color(const supervision::PrimitiveLabel& label, const RenderConfig& cfg) {
  return label.stage == supervision::Stage::Pick ? cfg.pick_color : cfg.place_color;
}

void set_pixel(RasterImage& img, int x, int y, const Rgb& c) {
  if (x < 0 || x >= img.width || y < 0 || y >= img.height) return;
  img.at(0, y, x) = c.r;
  if (img.channels > 1) img.at(1, y, x) = c.g;
  if (img.channels > 2) img.at(2, y, x) = c.b;
}

void draw_point(RasterImage& img, const AnchorPixel& a, double radius, const Rgb& c) {
  int r = static_cast<int>(std::ceil(radius));
  double r2 = radius * radius;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= r2) set_pixel(img, a.x + dx, a.y + dy, c);
}

void draw_box_outline(RasterImage& img, const AnchorPixel& a, int hw, const Rgb& c) {
  for (int dy = -hw; dy <= hw; ++dy)
    for (int dx = -hw; dx <= hw; ++dx)
      if (std::max(std::abs(dx), std::abs(dy)) == hw) set_pixel(img, a.x + dx, a.y + dy, c);
}

void apply_mask(RasterImage& img, const AnchorPixel& a, int hw, double alpha) {
  float keep = static_cast<float>(1.0 - alpha);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      if (std::max(std::abs(x - a.x), std::abs(y - a.y)) <= hw) continue;
      for (int ch = 0; ch < img.channels; ++ch) img.at(ch, y, x) *= keep;
    }
}

void draw_shape(RasterImage& img, const supervision::PrimitiveLabel& label,
                const RenderConfig& cfg, const Rgb& color) {
  AnchorPixel a = anchor_pixel(label);
  if (cfg.prompt_type == PromptType::Point)
    draw_point(img, a, cfg.point_radius, color);
  else
    draw_box_outline(img, a, cfg.box_half_width, color);
}

}  // namespace

RasterImage render_point(const RasterImage& img, const supervision::PrimitiveLabel& label,
                         const RenderConfig& cfg) {
  RasterImage out = img;
  draw_point(out, anchor_pixel(label), cfg.point_radius, stage_color(label, cfg));
  return out;
}

RasterImage render_box(const RasterImage& img, const supervision::PrimitiveLabel& label,
                       const RenderConfig& cfg) {
  RasterImage out = img;
  draw_box_outline(out, anchor_pixel(label), cfg.box_half_width, stage_color(label, cfg));
  return out;
}

RasterImage render_box_mask(const RasterImage& img, const supervision::PrimitiveLabel& label,
                            const RenderConfig& cfg) {
  RasterImage out = img;
  AnchorPixel a = anchor_pixel(label);
  apply_mask(out, a, cfg.box_half_width, cfg.alpha);
  draw_box_outline(out, a, cfg.box_half_width, stage_color(label, cfg));
  return out;
}

RasterImage compose(const RasterImage& img, const VisualPrimitive& current,
                    const std::vector<supervision::PrimitiveLabel>& history) {
  const RenderConfig& cfg = current.config;
  if (cfg.prompt_type == PromptType::None) return img;

  RasterImage out = img;
  if (cfg.prompt_type == PromptType::BoxMask)
    apply_mask(out, anchor_pixel(current.label), cfg.box_half_width, cfg.alpha);

  std::size_t keep = std::min<std::size_t>(history.size(),
                                           cfg.memory_depth < 0 ? 0 : cfg.memory_depth);
  for (std::size_t i = history.size() - keep; i < history.size(); ++i)
    draw_shape(out, history[i], cfg, cfg.memory_color);

  draw_shape(out, current.label, cfg, stage_color(current.label, cfg));
  return out;
}

void write_ppm(const RasterImage& img, std::ostream& out) {
  if (img.channels != 3) throw Error("write_ppm: expected a 3-channel image");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        out.put(static_cast<char>(std::lround(255.0f * v)));
      }
}

}  // namespace avp::render
