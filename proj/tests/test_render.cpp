#include <doctest.h>

#include <cmath>
#include <sstream>

#include "avp/render.hpp"
#include "test_util.hpp"

using namespace avp::render;
using avp::supervision::PrimitiveLabel;
using avp::supervision::Stage;

namespace {

RasterImage random_image(avp::Rng& rng, int h = 24, int w = 24) {
  RasterImage img = RasterImage::filled(3, h, w, 0.0f);
  for (float& v : img.data) v = static_cast<float>(avp::uniform01(rng));
  return img;
}

PrimitiveLabel label_at(double u, double v, Stage s = Stage::Pick) {
  PrimitiveLabel l;
  l.stage = s;
  l.anchor = {u, v, 1.0};
  return l;
}

int count_diff(const RasterImage& a, const RasterImage& b) {
  int n = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    if (a.data[i] != b.data[i]) ++n;
  return n;
}

}  // namespace

TEST_CASE("render_point draws a disc in the stage color") {
  RasterImage img = RasterImage::filled(3, 16, 16, 0.25f);
  RenderConfig cfg;
  cfg.point_radius = 1.4;
  RasterImage out = render_point(img, label_at(8.5, 8.5), cfg);

  // Anchor pixel and its 4-neighbors are red; diagonals are sqrt(2) > 1.4 away.
  CHECK(out.at(0, 8, 8) == 1.0f);
  CHECK(out.at(1, 8, 8) == 0.0f);
  CHECK(out.at(2, 8, 8) == 0.0f);
  CHECK(out.at(0, 8, 9) == 1.0f);
  CHECK(out.at(0, 7, 8) == 1.0f);
  CHECK(out.at(0, 7, 7) == 0.25f);
  // Place stage uses the green style.
  RasterImage pl = render_point(img, label_at(8.5, 8.5, Stage::Place), cfg);
  CHECK(pl.at(1, 8, 8) == 1.0f);
  CHECK(pl.at(0, 8, 8) == 0.0f);
}

TEST_CASE("render_box draws a one-pixel Chebyshev ring") {
  RasterImage img = RasterImage::filled(3, 32, 32, 0.5f);
  RenderConfig cfg;
  cfg.box_half_width = 3;
  RasterImage out = render_box(img, label_at(16.5, 16.5), cfg);

  int painted = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      int cheb = std::max(std::abs(y - 16), std::abs(x - 16));
      bool on_ring = cheb == cfg.box_half_width;
      bool red = out.at(0, y, x) == 1.0f && out.at(1, y, x) == 0.0f;
      CHECK(red == on_ring);
      if (red) ++painted;
    }
  CHECK(painted == 8 * cfg.box_half_width);  // perimeter of a (2k+1)^2 ring
  // Interior and exterior untouched.
  CHECK(out.at(0, 16, 16) == 0.5f);
  CHECK(out.at(0, 0, 0) == 0.5f);
}

TEST_CASE("render_box clips at image bounds") {
  RasterImage img = RasterImage::filled(3, 16, 16, 0.5f);
  RenderConfig cfg;
  cfg.box_half_width = 4;
  RasterImage out = render_box(img, label_at(1.5, 1.5), cfg);
  // Ring rows/cols at -3 are clipped away; the visible part is drawn.
  CHECK(out.at(0, 5, 1) == 1.0f);
  CHECK(out.at(0, 1, 5) == 1.0f);
  CHECK(out.at(0, 0, 0) == 0.5f);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    CHECK(out.data[i] >= 0.0f);
    CHECK(out.data[i] <= 1.0f);
  }
}

TEST_CASE("render_box_mask darkens strictly outside the box") {
  RasterImage img = RasterImage::filled(3, 32, 32, 0.8f);
  RenderConfig cfg;
  cfg.box_half_width = 3;
  cfg.alpha = 0.5;
  RasterImage out = render_box_mask(img, label_at(16.5, 16.5), cfg);
  // Outside: blended toward black by alpha. Inside (off-ring): untouched.
  CHECK(out.at(0, 0, 0) == doctest::Approx(0.4).epsilon(1e-6));
  CHECK(out.at(0, 16, 16) == 0.8f);
  CHECK(out.at(0, 16, 13) == 1.0f);  // ring pixel, stage color
}

TEST_CASE("render_box_mask with zero alpha equals render_box") {
  auto rng = avp::make_rng(31);
  RenderConfig cfg;
  cfg.alpha = 0.0;
  for (int i = 0; i < 20; ++i) {
    RasterImage img = random_image(rng);
    PrimitiveLabel l = label_at(avp::uniform_range(rng, -2.0, 26.0),
                                avp::uniform_range(rng, -2.0, 26.0),
                                i % 2 ? Stage::Place : Stage::Pick);
    RasterImage a = render_box(img, l, cfg);
    RasterImage b = render_box_mask(img, l, cfg);
    CHECK(a == b);
  }
}

TEST_CASE("compose with prompt None returns the input unchanged") {
  auto rng = avp::make_rng(32);
  RasterImage img = random_image(rng);
  RenderConfig cfg;
  cfg.prompt_type = PromptType::None;
  VisualPrimitive cur{label_at(5, 5), cfg};
  RasterImage out = compose(img, cur, {label_at(2, 2), label_at(9, 9)});
  CHECK(out == img);
}

TEST_CASE("compose layers mask, memory, then current") {
  RasterImage img = RasterImage::filled(3, 32, 32, 0.6f);
  RenderConfig cfg;
  cfg.prompt_type = PromptType::BoxMask;
  cfg.alpha = 0.5;
  cfg.box_half_width = 2;
  VisualPrimitive cur{label_at(16.5, 16.5, Stage::Place), cfg};
  std::vector<PrimitiveLabel> hist{label_at(6.5, 6.5), label_at(26.5, 26.5)};

  RasterImage out = compose(img, cur, hist);
  // Current primitive in place color.
  CHECK(out.at(1, 16, 14) == 1.0f);
  // memory_depth = 1 keeps only the newest history entry, drawn in memory gray
  // on top of the darkened background.
  CHECK(out.at(0, 26, 24) == 0.5f);
  CHECK(out.at(1, 26, 24) == 0.5f);
  // The older entry is truncated away: its ring pixel is just maskedbackground.
  CHECK(out.at(0, 6, 4) == doctest::Approx(0.3).epsilon(1e-6));

  // Depth 2 brings the older entry back.
  cfg.memory_depth = 2;
  RasterImage out2 = compose(img, {label_at(16.5, 16.5, Stage::Place), cfg}, hist);
  CHECK(out2.at(0, 6, 4) == 0.5f);
}

TEST_CASE("compose box prompt touches only ring pixels") {
  auto rng = avp::make_rng(33);
  RasterImage img = random_image(rng, 32, 32);
  RenderConfig cfg;
  cfg.prompt_type = PromptType::Box;
  cfg.box_half_width = 4;
  RasterImage out = compose(img, {label_at(16.5, 16.5), cfg}, {});
  CHECK(count_diff(img, out) <= 3 * 8 * cfg.box_half_width);
  CHECK(out.at(0, 0, 0) == img.at(0, 0, 0));
}

TEST_CASE("inputs are never mutated") {
  auto rng = avp::make_rng(34);
  RasterImage img = random_image(rng);
  RasterImage copy = img;
  RenderConfig cfg;
  (void)render_point(img, label_at(5, 5), cfg);
  (void)render_box(img, label_at(5, 5), cfg);
  (void)render_box_mask(img, label_at(5, 5), cfg);
  (void)compose(img, {label_at(5, 5), cfg}, {label_at(2, 2)});
  CHECK(img == copy);
}

TEST_CASE("write_ppm emits a P6 header and rounded bytes") {
  RasterImage img = RasterImage::filled(3, 2, 2, 0.0f);
  img.at(0, 0, 0) = 1.0f;
  img.at(1, 0, 1) = 0.5f;
  std::ostringstream out;
  write_ppm(img, out);
  std::string s = out.str();
  CHECK(s.rfind("P6\n2 2\n255\n", 0) == 0);
  std::string body = s.substr(s.find("255\n") + 4);
  REQUIRE(body.size() == 12);
  CHECK(static_cast<unsigned char>(body[0]) == 255);  // r of (0,0)
  CHECK(static_cast<unsigned char>(body[4]) == 128);  // g of (0,1), round(127.5)
  CHECK(static_cast<unsigned char>(body[1]) == 0);
}
