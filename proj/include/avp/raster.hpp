#pragma once

#include <cstddef>
#include <vector>

namespace avp::render {

// Channel-major float image with values in [0, 1].
struct RasterImage {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> data;  // data[(c*height + y)*width + x]

  static RasterImage filled(int c, int h, int w, float value) {
    RasterImage img;
    img.channels = c;
    img.height = h;
    img.width = w;
    img.data.assign(static_cast<std::size_t>(c) * h * w, value);
    return img;
  }

  float& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  bool same_shape(const RasterImage& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

inline bool operator==(const RasterImage& a, const RasterImage& b) {
  return a.same_shape(b) && a.data == b.data;
}

}  // namespace avp::render
