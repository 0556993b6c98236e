#include "iif/geom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace iif {

int Mesh::object_count() const {
  int max_id = -1;
  for (const auto& t : triangles) max_id = std::max(max_id, t.object_id);
  return max_id + 1;
}

double Mesh::triangle_area(int tri) const {
  const Triangle& t = triangles[tri];
  const Vec3 e1 = vertices[t.v[1]] - vertices[t.v[0]];
  const Vec3 e2 = vertices[t.v[2]] - vertices[t.v[0]];
  return 0.5 * length(cross(e1, e2));
}

void Mesh::compute_normals() {
  normals.resize(triangles.size());
  for (size_t i = 0; i < triangles.size(); ++i) {
    const Triangle& t = triangles[i];
    const Vec3 e1 = vertices[t.v[1]] - vertices[t.v[0]];
    const Vec3 e2 = vertices[t.v[2]] - vertices[t.v[0]];
    const Vec3 n = cross(e1, e2);
    const double len = length(n);
    normals[i] = len > 0 ? n / len : Vec3(0, 0, 1);
  }
}

void Mesh::validate() const {
  const int nv = int(vertices.size());
  std::vector<uint8_t> seen;
  int max_id = -1;
  for (size_t i = 0; i < triangles.size(); ++i) {
    const Triangle& t = triangles[i];
    for (int k = 0; k < 3; ++k)
      if (t.v[k] < 0 || t.v[k] >= nv)
        throw std::runtime_error("mesh: triangle " + std::to_string(i) + " index out of range");
    if (triangle_area(int(i)) <= 1e-12)
      throw std::runtime_error("mesh: triangle " + std::to_string(i) + " is degenerate");
    if (t.object_id < 0)
      throw std::runtime_error("mesh: negative object id");
    max_id = std::max(max_id, t.object_id);
  }
  seen.assign(size_t(max_id + 1), 0);
  for (const auto& t : triangles) seen[t.object_id] = 1;
  for (int o = 0; o <= max_id; ++o)
    if (!seen[o]) throw std::runtime_error("mesh: object ids not contiguous, missing " + std::to_string(o));
}

Aabb Mesh::bounds() const {
  Aabb box;
  for (const auto& v : vertices) box.expand(v);
  return box;
}

Camera Camera::look_at(const Vec3& pos, const Vec3& target, const Vec3& up_hint,
                       double fov_y, int width, int height) {
  Camera cam;
  cam.position = pos;
  cam.forward = normalize(target - pos);
  cam.right = normalize(cross(cam.forward, up_hint));
  cam.up = cross(cam.right, cam.forward);
  cam.fov_y = fov_y;
  cam.width = width;
  cam.height = height;
  return cam;
}

void Camera::validate() const {
  if (width <= 0 || height <= 0) throw std::runtime_error("camera: resolution must be positive");
  if (fov_y <= 0 || fov_y >= M_PI) throw std::runtime_error("camera: fov out of range");
  const double tol = 1e-6;
  if (std::abs(length(right) - 1) > tol || std::abs(length(up) - 1) > tol ||
      std::abs(length(forward) - 1) > tol || std::abs(dot(right, up)) > tol ||
      std::abs(dot(right, forward)) > tol || std::abs(dot(up, forward)) > tol)
    throw std::runtime_error("camera: basis not orthonormal");
}

Ray Camera::primary_ray(double px, double py) const {
  const double tan_half = std::tan(0.5 * fov_y);
  const double aspect = double(width) / double(height);
  const double sx = (2.0 * px / width - 1.0) * tan_half * aspect;
  const double sy = (1.0 - 2.0 * py / height) * tan_half;
  Ray ray;
  ray.origin = position;
  ray.dir = normalize(forward + right * sx + up * sy);
  return ray;
}

std::optional<Hit> intersect_triangle(const Mesh& mesh, int tri, const Ray& ray) {
  // Moller-Trumbore.
  const Triangle& t = mesh.triangles[tri];
  const Vec3 v0 = mesh.vertices[t.v[0]];
  const Vec3 e1 = mesh.vertices[t.v[1]] - v0;
  const Vec3 e2 = mesh.vertices[t.v[2]] - v0;
  const Vec3 p = cross(ray.dir, e2);
  const double det = dot(e1, p);
  if (std::abs(det) < 1e-14) return std::nullopt;
  const double inv_det = 1.0 / det;
  const Vec3 s = ray.origin - v0;
  const double b1 = dot(s, p) * inv_det;
  if (b1 < 0 || b1 > 1) return std::nullopt;
  const Vec3 q = cross(s, e1);
  const double b2 = dot(ray.dir, q) * inv_det;
  if (b2 < 0 || b1 + b2 > 1) return std::nullopt;
  const double tt = dot(e2, q) * inv_det;
  if (tt <= 0 || tt >= ray.t_max) return std::nullopt;
  Hit hit;
  hit.tri = tri;
  hit.b1 = b1;
  hit.b2 = b2;
  hit.t = tt;
  hit.position = ray.origin + ray.dir * tt;
  Vec3 n = mesh.normals[tri];
  if (dot(n, ray.dir) > 0) n = -n;  // keep n . omega_o >= 0
  hit.normal = n;
  hit.object_id = t.object_id;
  return hit;
}

std::optional<Hit> intersect_brute_force(const Mesh& mesh, const Ray& ray) {
  std::optional<Hit> best;
  Ray r = ray;
  for (int i = 0; i < int(mesh.triangles.size()); ++i) {
    if (auto h = intersect_triangle(mesh, i, r)) {
      r.t_max = h->t;
      best = h;
    }
  }
  return best;
}

namespace {

bool ray_box(const Aabb& box, const Vec3& o, const Vec3& inv_dir, double t_max) {
  double t0 = 0, t1 = t_max;
  for (int a = 0; a < 3; ++a) {
    double lo = (box.lo[a] - o[a]) * inv_dir[a];
    double hi = (box.hi[a] - o[a]) * inv_dir[a];
    if (lo > hi) std::swap(lo, hi);
    t0 = std::max(t0, lo);
    t1 = std::min(t1, hi);
    if (t0 > t1) return false;
  }
  return true;
}

constexpr int kLeafSize = 4;
constexpr int kBins = 16;

}  // namespace

Bvh::Bvh(const Mesh& mesh) : mesh_(&mesh) {
  if (mesh.triangles.empty()) throw std::runtime_error("bvh: empty mesh");
  const int n = int(mesh.triangles.size());
  std::vector<Aabb> boxes(n);
  std::vector<Vec3> centroids(n);
  for (int i = 0; i < n; ++i) {
    const Triangle& t = mesh.triangles[i];
    for (int k = 0; k < 3; ++k) boxes[i].expand(mesh.vertices[t.v[k]]);
    centroids[i] = boxes[i].center();
  }
  std::vector<int> tris(n);
  std::iota(tris.begin(), tris.end(), 0);
  nodes_.reserve(size_t(2) * n);
  build_node(tris, 0, n, boxes, centroids);
  tri_order_ = std::move(tris);
  root_bounds_ = nodes_[0].box;
  ray_eps_ = 1e-4 * root_bounds_.diagonal();
}

int Bvh::build_node(std::vector<int>& tris, int begin, int end, std::vector<Aabb>& boxes,
                    std::vector<Vec3>& centroids) {
  const int node_index = int(nodes_.size());
  nodes_.emplace_back();
  Aabb box, cbox;
  for (int i = begin; i < end; ++i) {
    box.expand(boxes[tris[i]]);
    cbox.expand(centroids[tris[i]]);
  }
  nodes_[node_index].box = box;
  const int count = end - begin;
  if (count <= kLeafSize) {
    nodes_[node_index].left = begin;
    nodes_[node_index].count = count;
    return node_index;
  }

  // Binned SAH over the widest centroid axis.
  const Vec3 ext = cbox.extent();
  int axis = 0;
  if (ext.y > ext[axis]) axis = 1;
  if (ext.z > ext[axis]) axis = 2;
  int best_split = -1;
  double best_cost = 1e300;
  if (ext[axis] > 1e-12) {
    Aabb bin_box[kBins];
    int bin_count[kBins] = {};
    const double scale = kBins / ext[axis];
    auto bin_of = [&](int tri) {
      int b = int((centroids[tri][axis] - cbox.lo[axis]) * scale);
      return std::clamp(b, 0, kBins - 1);
    };
    for (int i = begin; i < end; ++i) {
      const int b = bin_of(tris[i]);
      bin_box[b].expand(boxes[tris[i]]);
      bin_count[b]++;
    }
    Aabb right_acc[kBins];
    Aabb acc;
    for (int b = kBins - 1; b > 0; --b) {
      acc.expand(bin_box[b]);
      right_acc[b] = acc;
    }
    Aabb left;
    int left_n = 0;
    for (int b = 0; b < kBins - 1; ++b) {
      left.expand(bin_box[b]);
      left_n += bin_count[b];
      const int right_n = count - left_n;
      if (left_n == 0 || right_n == 0) continue;
      const double cost = left.surface_area() * left_n + right_acc[b + 1].surface_area() * right_n;
      if (cost < best_cost) {
        best_cost = cost;
        best_split = b;
      }
    }
    if (best_split >= 0) {
      auto mid_it = std::partition(tris.begin() + begin, tris.begin() + end,
                                   [&](int tri) { return bin_of(tri) <= best_split; });
      const int mid = int(mid_it - tris.begin());
      if (mid != begin && mid != end) {
        const int l = build_node(tris, begin, mid, boxes, centroids);
        const int r = build_node(tris, mid, end, boxes, centroids);
        nodes_[node_index].left = l;
        nodes_[node_index].right = r;
        return node_index;
      }
    }
  }
  // Degenerate spread: median split.
  const int mid = begin + count / 2;
  std::nth_element(tris.begin() + begin, tris.begin() + mid, tris.begin() + end,
                   [&](int a, int b) { return centroids[a][axis] < centroids[b][axis]; });
  const int l = build_node(tris, begin, mid, boxes, centroids);
  const int r = build_node(tris, mid, end, boxes, centroids);
  nodes_[node_index].left = l;
  nodes_[node_index].right = r;
  return node_index;
}

std::optional<Hit> Bvh::intersect(const Ray& ray) const {
  const Vec3 inv_dir{1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z};
  std::optional<Hit> best;
  Ray r = ray;
  int stack[64];
  int sp = 0;
  stack[sp++] = 0;
  while (sp > 0) {
    const Node& node = nodes_[stack[--sp]];
    if (!ray_box(node.box, r.origin, inv_dir, r.t_max)) continue;
    if (node.count > 0) {
      for (int i = 0; i < node.count; ++i) {
        if (auto h = intersect_triangle(*mesh_, tri_order_[node.left + i], r)) {
          r.t_max = h->t;
          best = h;
        }
      }
    } else {
      stack[sp++] = node.left;
      stack[sp++] = node.right;
    }
  }
  return best;
}

bool Bvh::occluded(const Ray& ray) const {
  const Vec3 inv_dir{1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z};
  int stack[64];
  int sp = 0;
  stack[sp++] = 0;
  while (sp > 0) {
    const Node& node = nodes_[stack[--sp]];
    if (!ray_box(node.box, ray.origin, inv_dir, ray.t_max)) continue;
    if (node.count > 0) {
      for (int i = 0; i < node.count; ++i)
        if (intersect_triangle(*mesh_, tri_order_[node.left + i], ray)) return true;
    } else {
      stack[sp++] = node.left;
      stack[sp++] = node.right;
    }
  }
  return false;
}

GBuffer make_gbuffer(const Bvh& bvh, const Camera& cam) {
  cam.validate();
  GBuffer gb;
  gb.width = cam.width;
  gb.height = cam.height;
  const size_t n = size_t(cam.width) * cam.height;
  gb.position.assign(n, Vec3());
  gb.normal.assign(n, Vec3());
  gb.object_id.assign(n, -1);
  gb.tri.assign(n, -1);
  gb.hit_mask.assign(n, 0);
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      const Ray ray = cam.primary_ray(x + 0.5, y + 0.5);
      if (auto h = bvh.intersect(ray)) {
        const size_t i = gb.index(x, y);
        gb.position[i] = h->position;
        gb.normal[i] = h->normal;
        gb.object_id[i] = h->object_id;
        gb.tri[i] = h->tri;
        gb.hit_mask[i] = 1;
      }
    }
  }
  return gb;
}

}  // namespace iif
