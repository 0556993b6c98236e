#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "iif/geom.hpp"
#include "iif/image.hpp"
#include "iif/rng.hpp"

namespace iif::testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp root, removed on destruction.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("iif_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

inline ImageF random_image(int w, int h, int c, uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
  ImageF im(w, h, c);
  Rng rng(seed);
  for (float& f : im.data) f = lo + float(rng.next_double()) * (hi - lo);
  return im;
}

// Central finite difference of f at *param with step h.
inline double central_diff(double* param, const std::function<double()>& f, double h) {
  const double x0 = *param;
  *param = x0 + h;
  const double fp = f();
  *param = x0 - h;
  const double fm = f();
  *param = x0;
  return (fp - fm) / (2.0 * h);
}

inline double rel_err(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

// Single large quad in the z=0 plane facing +z, one object.
inline Mesh make_plane(double half = 100.0) {
  Mesh mesh;
  mesh.vertices = {{-half, -half, 0}, {half, -half, 0}, {half, half, 0}, {-half, half, 0}};
  mesh.triangles = {{{0, 1, 2}, 0}, {{0, 2, 3}, 0}};
  mesh.compute_normals();
  return mesh;
}

inline Mesh make_two_boxes() {
  Mesh mesh;
  const auto add_box = [&mesh](const Vec3& lo, const Vec3& hi, int object) {
    const int b = int(mesh.vertices.size());
    mesh.vertices.insert(mesh.vertices.end(),
                         {{lo.x, lo.y, lo.z},
                          {hi.x, lo.y, lo.z},
                          {hi.x, hi.y, lo.z},
                          {lo.x, hi.y, lo.z},
                          {lo.x, lo.y, hi.z},
                          {hi.x, lo.y, hi.z},
                          {hi.x, hi.y, hi.z},
                          {lo.x, hi.y, hi.z}});
    const int f[12][3] = {{0, 2, 1}, {0, 3, 2}, {4, 5, 6}, {4, 6, 7}, {0, 1, 5}, {0, 5, 4},
                          {2, 3, 7}, {2, 7, 6}, {1, 2, 6}, {1, 6, 5}, {3, 0, 4}, {3, 4, 7}};
    for (const auto& t : f)
      mesh.triangles.push_back({{b + t[0], b + t[1], b + t[2]}, object});
  };
  add_box({0, 0, 0}, {1, 1, 1}, 0);
  add_box({1.5, 0.2, 0.1}, {2.2, 0.8, 0.9}, 1);
  mesh.compute_normals();
  return mesh;
}

}  // namespace iif::testing
