#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "helpers.hpp"
#include "iif/geom.hpp"

using namespace iif;
using namespace iif::testing;

TEST_CASE("single triangle: ray through centroid hits with uniform barycentrics") {
  Mesh mesh;
  mesh.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  mesh.triangles = {{{0, 1, 2}, 0}};
  mesh.compute_normals();
  Bvh bvh(mesh);
  const Vec3 centroid = (mesh.vertices[0] + mesh.vertices[1] + mesh.vertices[2]) / 3.0;
  const auto hit = bvh.intersect({centroid + Vec3(0, 0, 1), {0, 0, -1}});
  REQUIRE(hit.has_value());
  CHECK(hit->tri == 0);
  CHECK(hit->b1 == doctest::Approx(1.0 / 3).epsilon(1e-6));
  CHECK(hit->b2 == doctest::Approx(1.0 / 3).epsilon(1e-6));
  CHECK(1.0 - hit->b1 - hit->b2 == doctest::Approx(1.0 / 3).epsilon(1e-6));
}

TEST_CASE("ray missing all geometry reports no hit") {
  Bvh bvh(make_two_boxes());
  CHECK_FALSE(bvh.intersect({{0, 5, 0}, {0, 1, 0}}).has_value());
}

TEST_CASE("empty mesh rejected") {
  Mesh mesh;
  CHECK_THROWS(Bvh(mesh));
}

TEST_CASE("mesh validation catches bad input") {
  Mesh mesh;
  mesh.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  mesh.triangles = {{{0, 1, 5}, 0}};  // out-of-range index
  CHECK_THROWS(mesh.validate());
  mesh.triangles = {{{0, 1, 1}, 0}};  // degenerate
  mesh.compute_normals();
  CHECK_THROWS(mesh.validate());
  mesh.triangles = {{{0, 1, 2}, 1}};  // ids not contiguous from 0
  mesh.compute_normals();
  CHECK_THROWS(mesh.validate());
}

TEST_CASE("bvh agrees with brute force on 2000 random rays") {
  const Mesh mesh = make_two_boxes();
  Bvh bvh(mesh);
  Rng rng(1234);
  int hits = 0;
  for (int i = 0; i < 2000; ++i) {
    const Vec3 origin{rng.next_double() * 4 - 1, rng.next_double() * 3 - 1,
                      rng.next_double() * 3 - 1};
    Vec3 dir{rng.next_double() * 2 - 1, rng.next_double() * 2 - 1, rng.next_double() * 2 - 1};
    if (length(dir) < 1e-6) dir = {1, 0, 0};
    const Ray ray{origin, normalize(dir)};
    const auto a = bvh.intersect(ray);
    const auto b = intersect_brute_force(mesh, ray);
    REQUIRE(a.has_value() == b.has_value());
    if (a) {
      ++hits;
      CHECK(a->tri == b->tri);
      CHECK(a->t == doctest::Approx(b->t).epsilon(1e-9));
      CHECK(a->object_id == b->object_id);
    }
  }
  CHECK(hits > 100);  // the sample actually exercises hit paths
}

TEST_CASE("shading normal is flipped toward the ray") {
  const Mesh mesh = make_two_boxes();
  Bvh bvh(mesh);
  Rng rng(99);
  for (int i = 0; i < 500; ++i) {
    const Vec3 origin{rng.next_double() * 4 - 1, rng.next_double() * 3 - 1,
                      rng.next_double() * 3 - 1};
    Vec3 dir{rng.next_double() * 2 - 1, rng.next_double() * 2 - 1, rng.next_double() * 2 - 1};
    if (length(dir) < 1e-6) continue;
    const auto hit = bvh.intersect({origin, normalize(dir)});
    if (hit) CHECK(dot(hit->normal, normalize(dir)) <= 0.0);
  }
}

TEST_CASE("gbuffer: camera inside a closed box sees only geometry") {
  Mesh mesh;
  {
    Mesh boxes = make_two_boxes();
    // keep just the unit box, faces inward visible since normals flip
    for (auto& t : boxes.triangles)
      if (t.object_id == 0) mesh.triangles.push_back({t.v, 0});
    mesh.vertices = boxes.vertices;
    mesh.compute_normals();
  }
  Bvh bvh(mesh);
  const Camera cam = Camera::look_at({0.5, 0.5, 0.5}, {0.9, 0.5, 0.5}, {0, 1, 0}, 1.0, 32, 24);
  const GBuffer gb = make_gbuffer(bvh, cam);
  for (uint8_t h : gb.hit_mask) CHECK(h == 1);
}

TEST_CASE("gbuffer: quad filling the frame lies on its plane") {
  const Mesh mesh = make_plane(100.0);
  Bvh bvh(mesh);
  const Camera cam = Camera::look_at({0, 0, 5}, {0, 0, 0}, {0, 1, 0}, 0.8, 24, 24);
  const GBuffer gb = make_gbuffer(bvh, cam);
  for (int y = 0; y < gb.height; ++y)
    for (int x = 0; x < gb.width; ++x) {
      const size_t i = gb.index(x, y);
      REQUIRE(gb.hit_mask[i] == 1);
      CHECK(std::abs(gb.position[i].z) < 1e-6);
      CHECK(gb.object_id[i] == 0);
    }
}

TEST_CASE("gbuffer equals independent pixel-center ray casts") {
  const Mesh mesh = make_two_boxes();
  Bvh bvh(mesh);
  const Camera cam = Camera::look_at({3, 2, 3}, {1, 0.5, 0.5}, {0, 1, 0}, 0.9, 20, 15);
  const GBuffer gb = make_gbuffer(bvh, cam);
  for (int y = 0; y < gb.height; ++y)
    for (int x = 0; x < gb.width; ++x) {
      const auto hit = bvh.intersect(cam.primary_ray(x + 0.5, y + 0.5));
      const size_t i = gb.index(x, y);
      REQUIRE(gb.hit_mask[i] == (hit ? 1 : 0));
      if (hit) {
        CHECK(gb.tri[i] == hit->tri);
        CHECK(length(gb.position[i] - hit->position) < 1e-12);
      }
    }
}

TEST_CASE("camera invariants") {
  const Camera cam = Camera::look_at({1, 2, 3}, {0, 0, 0}, {0, 1, 0}, 0.8, 8, 8);
  CHECK(std::abs(dot(cam.right, cam.up)) < 1e-9);
  CHECK(std::abs(dot(cam.right, cam.forward)) < 1e-9);
  CHECK(length(cam.right) == doctest::Approx(1.0));
  const Ray r = cam.primary_ray(4.0, 4.0);  // image center
  CHECK(length(r.dir - cam.forward) < 1e-9);
}
