#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "iif/image.hpp"
#include "iif/vec.hpp"

namespace iif {

struct Triangle {
  std::array<int, 3> v;
  int object_id = 0;
};

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<Triangle> triangles;
  std::vector<Vec3> normals;  // per-triangle geometric normals, derived

  int object_count() const;
  void compute_normals();
  Aabb bounds() const;
  // Throws std::runtime_error on out-of-range indices, degenerate triangles
  // (area <= 1e-12) or non-contiguous object ids.
  void validate() const;

  Vec3 point_on(int tri, double b1, double b2) const {
    const Triangle& t = triangles[tri];
    const double b0 = 1.0 - b1 - b2;
    return vertices[t.v[0]] * b0 + vertices[t.v[1]] * b1 + vertices[t.v[2]] * b2;
  }
  double triangle_area(int tri) const;
};

struct Camera {
  Vec3 position;
  Vec3 right, up, forward;  // orthonormal
  double fov_y = 0.8;       // vertical field of view, radians
  int width = 0, height = 0;

  static Camera look_at(const Vec3& pos, const Vec3& target, const Vec3& up_hint,
                        double fov_y, int width, int height);
  // Ray through a point in pixel coords (px, py measured in pixels, center at +0.5).
  struct Ray primary_ray(double px, double py) const;
  void validate() const;
};

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit
  double t_max = 1e30;
};

struct Hit {
  int tri = -1;
  double b1 = 0, b2 = 0;  // barycentrics of v1, v2
  double t = 0;
  Vec3 position;
  Vec3 normal;  // shading normal, flipped toward the ray
  int object_id = -1;
};

class Bvh {
 public:
  // Binned SAH build, leaf size <= 4. Throws on an empty mesh.
  explicit Bvh(const Mesh& mesh);

  std::optional<Hit> intersect(const Ray& ray) const;
  bool occluded(const Ray& ray) const;

  const Mesh& mesh() const { return *mesh_; }
  const Aabb& bounds() const { return root_bounds_; }
  double ray_epsilon() const { return ray_eps_; }

 private:
  struct Node {
    Aabb box;
    int left = -1;       // internal: child index; leaf: first triangle
    int count = 0;       // leaf: triangle count; internal: 0
    int right = -1;
  };
  const Mesh* mesh_;
  std::vector<Node> nodes_;
  std::vector<int> tri_order_;
  Aabb root_bounds_;
  double ray_eps_ = 1e-6;

  int build_node(std::vector<int>& tris, int begin, int end, std::vector<Aabb>& boxes,
                 std::vector<Vec3>& centroids);
};

// Reference intersection over all triangles; used as the BVH oracle and for
// small queries.
std::optional<Hit> intersect_brute_force(const Mesh& mesh, const Ray& ray);
std::optional<Hit> intersect_triangle(const Mesh& mesh, int tri, const Ray& ray);

struct GBuffer {
  int width = 0, height = 0;
  std::vector<Vec3> position;
  std::vector<Vec3> normal;
  std::vector<int> object_id;  // -1 on miss
  std::vector<int> tri;        // -1 on miss
  std::vector<uint8_t> hit_mask;

  size_t index(int x, int y) const { return size_t(y) * width + x; }
};

// Primary-visibility attributes through pixel centers.
GBuffer make_gbuffer(const Bvh& bvh, const Camera& cam);

}  // namespace iif
