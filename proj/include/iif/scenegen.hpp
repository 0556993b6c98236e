#pragma once

#include <vector>

#include "iif/brdf.hpp"
#include "iif/geom.hpp"
#include "iif/render.hpp"

namespace iif {

// Parameters for the built-in Cornell-style synthetic scene used by tests and
// the `make-scene` command.
struct SceneSpec {
  int width = 64, height = 64;
  int views = 8;
  double light_radiance = 10.0;
  int wall_subdiv = 4;  // each wall becomes subdiv^2 quads
};

struct Scene {
  Mesh mesh;
  std::vector<Camera> cameras;
  EmitterSet emitters;
  std::vector<MaterialSample> materials;  // one per object
  std::vector<int> light_triangles;
  int light_object = -1;
};

// Closed five-wall box, two interior boxes, one ceiling light. Object ids are
// contiguous; the light quad is its own object.
Scene make_cornell_scene(const SceneSpec& spec);

// Ground-truth material maps and instance map for one view.
void gt_maps_for_view(const Scene& scene, const GBuffer& gb, ImageF& albedo, ImageF& rough,
                      ImageF& metal, ImageF& instance);

}  // namespace iif
