#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "iif/vec.hpp"

namespace iif {

// Row-major float image, top-left origin, 1 or 3 channels.
struct ImageF {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  ImageF() = default;
  ImageF(int w, int h, int c) : width(w), height(h), channels(c), data(size_t(w) * h * c, 0.0f) {}

  size_t pixel_count() const { return size_t(width) * height; }
  float& at(int x, int y, int c = 0) { return data[(size_t(y) * width + x) * channels + c]; }
  float at(int x, int y, int c = 0) const { return data[(size_t(y) * width + x) * channels + c]; }

  Vec3 rgb(int x, int y) const {
    if (channels == 1) return Vec3(at(x, y));
    return {at(x, y, 0), at(x, y, 1), at(x, y, 2)};
  }
  void set_rgb(int x, int y, const Vec3& v) {
    if (channels == 1) {
      at(x, y) = float(v.x);
    } else {
      at(x, y, 0) = float(v.x);
      at(x, y, 1) = float(v.y);
      at(x, y, 2) = float(v.z);
    }
  }

  bool same_shape(const ImageF& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

}  // namespace iif
