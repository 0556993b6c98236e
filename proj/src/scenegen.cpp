#include "iif/scenegen.hpp"

#include <cmath>
#include <stdexcept>

namespace iif {

namespace {

// subdivided quad p00 -> p10 -> p11 -> p01 (counter-clockwise)
void add_quad(Mesh& mesh, const Vec3& p00, const Vec3& p10, const Vec3& p11, const Vec3& p01,
              int object, int subdiv, std::vector<int>* tris_out = nullptr) {
  for (int j = 0; j < subdiv; ++j)
    for (int i = 0; i < subdiv; ++i) {
      const double u0 = double(i) / subdiv, u1 = double(i + 1) / subdiv;
      const double v0 = double(j) / subdiv, v1 = double(j + 1) / subdiv;
      const auto at = [&](double u, double v) {
        const Vec3 a = p00 * (1 - u) + p10 * u;
        const Vec3 b = p01 * (1 - u) + p11 * u;
        return a * (1 - v) + b * v;
      };
      const int base = int(mesh.vertices.size());
      mesh.vertices.push_back(at(u0, v0));
      mesh.vertices.push_back(at(u1, v0));
      mesh.vertices.push_back(at(u1, v1));
      mesh.vertices.push_back(at(u0, v1));
      if (tris_out) tris_out->push_back(int(mesh.triangles.size()));
      mesh.triangles.push_back({{base, base + 1, base + 2}, object});
      if (tris_out) tris_out->push_back(int(mesh.triangles.size()));
      mesh.triangles.push_back({{base, base + 2, base + 3}, object});
    }
}

void add_box(Mesh& mesh, const Vec3& lo, const Vec3& hi, int object) {
  const Vec3 p000{lo.x, lo.y, lo.z}, p100{hi.x, lo.y, lo.z}, p010{lo.x, hi.y, lo.z},
      p110{hi.x, hi.y, lo.z}, p001{lo.x, lo.y, hi.z}, p101{hi.x, lo.y, hi.z},
      p011{lo.x, hi.y, hi.z}, p111{hi.x, hi.y, hi.z};
  add_quad(mesh, p001, p101, p111, p011, object, 1);  // front (+z)
  add_quad(mesh, p100, p000, p010, p110, object, 1);  // back (-z)
  add_quad(mesh, p000, p100, p101, p001, object, 1);  // bottom
  add_quad(mesh, p011, p111, p110, p010, object, 1);  // top
  add_quad(mesh, p000, p001, p011, p010, object, 1);  // left
  add_quad(mesh, p101, p100, p110, p111, object, 1);  // right
}

}  // namespace

Scene make_cornell_scene(const SceneSpec& spec) {
  if (spec.views < 1 || spec.width < 8 || spec.height < 8)
    throw std::runtime_error("scenegen: invalid scene spec");
  Scene scene;
  Mesh& mesh = scene.mesh;
  const int sub = std::max(1, spec.wall_subdiv);

  // box interior [0,1]^3, open at z = 1
  add_quad(mesh, {0, 0, 0}, {1, 0, 0}, {1, 0, 1}, {0, 0, 1}, 0, sub);  // floor
  add_quad(mesh, {0, 1, 0}, {0, 1, 1}, {1, 1, 1}, {1, 1, 0}, 1, sub);  // ceiling
  add_quad(mesh, {0, 0, 0}, {0, 1, 0}, {1, 1, 0}, {1, 0, 0}, 2, sub);  // back wall
  add_quad(mesh, {0, 0, 0}, {0, 0, 1}, {0, 1, 1}, {0, 1, 0}, 3, sub);  // left wall
  add_quad(mesh, {1, 0, 0}, {1, 1, 0}, {1, 1, 1}, {1, 0, 1}, 4, sub);  // right wall
  add_box(mesh, {0.12, 0.0, 0.12}, {0.42, 0.55, 0.42}, 5);             // tall box
  add_box(mesh, {0.55, 0.0, 0.45}, {0.85, 0.28, 0.75}, 6);             // short box
  add_quad(mesh, {0.35, 0.995, 0.35}, {0.35, 0.995, 0.65}, {0.65, 0.995, 0.65},
           {0.65, 0.995, 0.35}, 7, 1, &scene.light_triangles);  // light, below ceiling
  scene.light_object = 7;

  mesh.compute_normals();
  mesh.validate();

  scene.materials = {
      {{0.70, 0.70, 0.70}, 0.80, 0.00},  // floor
      {{0.75, 0.75, 0.75}, 0.90, 0.00},  // ceiling
      {{0.70, 0.68, 0.66}, 0.75, 0.00},  // back wall
      {{0.63, 0.07, 0.05}, 0.85, 0.00},  // left wall
      {{0.14, 0.45, 0.09}, 0.85, 0.00},  // right wall
      {{0.60, 0.55, 0.50}, 0.40, 0.30},  // tall box
      {{0.30, 0.35, 0.65}, 0.60, 0.10},  // short box
      {{0.90, 0.90, 0.90}, 0.90, 0.00},  // light
  };

  scene.emitters.emission.assign(mesh.triangles.size(), Vec3(0));
  for (const int t : scene.light_triangles)
    scene.emitters.emission[t] = Vec3(spec.light_radiance);

  for (int v = 0; v < spec.views; ++v) {
    const double a = spec.views == 1 ? 0.0 : (double(v) / (spec.views - 1) - 0.5) * 0.6;
    const Vec3 pos{0.5 + 1.1 * std::sin(a), 0.5 + 0.15 * std::sin(2.3 * a + 0.7),
                   0.5 + 1.9 * std::cos(a)};
    scene.cameras.push_back(
        Camera::look_at(pos, {0.5, 0.45, 0.35}, {0, 1, 0}, 0.75, spec.width, spec.height));
  }
  return scene;
}

void gt_maps_for_view(const Scene& scene, const GBuffer& gb, ImageF& albedo, ImageF& rough,
                      ImageF& metal, ImageF& instance) {
  albedo = ImageF(gb.width, gb.height, 3);
  rough = ImageF(gb.width, gb.height, 1);
  metal = ImageF(gb.width, gb.height, 1);
  instance = ImageF(gb.width, gb.height, 1);
  for (int y = 0; y < gb.height; ++y)
    for (int x = 0; x < gb.width; ++x) {
      const size_t i = gb.index(x, y);
      if (!gb.hit_mask[i]) {
        instance.at(x, y) = -1.0f;
        continue;
      }
      const int o = gb.object_id[i];
      const MaterialSample& m = scene.materials[o];
      albedo.set_rgb(x, y, m.albedo);
      rough.at(x, y) = float(m.rough);
      metal.at(x, y) = float(m.metal);
      instance.at(x, y) = float(o);
    }
}

}  // namespace iif
