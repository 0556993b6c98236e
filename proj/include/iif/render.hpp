#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <vector>

#include "iif/brdf.hpp"
#include "iif/geom.hpp"
#include "iif/image.hpp"
#include "iif/rng.hpp"

namespace iif {

// Returns the surface material at a hit point. Object-constant lookups and
// field-backed lookups both fit this shape.
using MaterialSource = std::function<SurfaceMaterial(const Hit&)>;

// Material source with one constant material per object id.
MaterialSource constant_materials(std::vector<MaterialSample> per_object);

// Per-triangle uniform emission plus an optional 16x32 lat-long environment
// map. Triangles not in the emissive set carry zero.
struct EmitterSet {
  std::vector<Vec3> emission;  // one entry per triangle
  ImageF env;                  // empty, or 16x32 rgb radiance

  bool has_env() const { return env.width > 0; }
  // Checks sizes and nonnegativity against the mesh.
  void validate(size_t triangle_count) const;
};

constexpr int kEnvHeight = 16;
constexpr int kEnvWidth = 32;

// Nearest-texel lat-long lookup (y-up); zero without an env map.
Vec3 env_radiance(const EmitterSet& emitters, const Vec3& dir);

// Area sampling over the emissive triangles, probability proportional to
// emitted power (luminance x area).
class LightSampler {
 public:
  LightSampler(const Mesh& mesh, const EmitterSet& emitters);

  bool empty() const { return tris_.empty(); }

  struct Sample {
    Vec3 point;
    Vec3 normal;    // geometric, double-sided emitters
    Vec3 radiance;
    double pdf_area = 0;
    int tri = -1;
  };
  Sample sample(Rng& rng) const;

 private:
  const Mesh* mesh_;
  const EmitterSet* emitters_;
  std::vector<int> tris_;
  std::vector<double> cdf_;  // cumulative selection probability
  std::vector<double> prob_;
};

// Dense voxel grid of mean outgoing diffuse radiance, built by binning path
// vertices; consulted past the explicit bounces during path tracing.
struct RadianceCache {
  Aabb bounds;
  int res = 0;
  std::vector<Vec3> sum;
  std::vector<uint32_t> count;

  size_t voxel_index(const Vec3& x) const;
  bool occupied(const Vec3& x) const;
  Vec3 lookup(const Vec3& x) const;  // zero for empty voxels
};

// Number of explicitly traced bounces before the radiance cache takes over.
constexpr int kExplicitBounces = 2;

RadianceCache build_radiance_cache(const Bvh& bvh, const EmitterSet& emitters,
                                   const MaterialSource& materials, int n_paths, int grid_res,
                                   uint64_t seed);

// Monte Carlo estimate of outgoing radiance with next-event estimation at
// every vertex. Deterministic: per-pixel streams keyed (seed, pixel, sample,
// bounce). max_bounces counts scattering events; rays that escape a scene
// without env map contribute zero.
ImageF path_trace(const Bvh& bvh, const EmitterSet& emitters, const MaterialSource& materials,
                  const Camera& camera, int spp, int max_bounces, uint64_t seed,
                  const RadianceCache* cache = nullptr);

// Per-pixel pre-integrated lighting: diffuse irradiance map and a specular
// basis in roughness, with the Schlick fresnel split so specular shading is
// affine in ks: spec = S0 + ks * S1.
struct ShadingCache {
  static constexpr std::array<double, 5> kRoughBasis{0.1, 0.3, 0.5, 0.7, 0.9};

  int width = 0, height = 0;
  ImageF dmap;                 // integral of L_i (n.w) dw
  std::array<ImageF, 5> s0;    // (1-cos)^5 fresnel part
  std::array<ImageF, 5> s1;    // ks-proportional part

  // One PFM per map plus a manifest text file in dir.
  void save(const std::filesystem::path& dir) const;
  static ShadingCache load(const std::filesystem::path& dir);
};

ShadingCache cache_shading(const Bvh& bvh, const EmitterSet& emitters,
                           const MaterialSource& materials, const Camera& camera,
                           int spp_diffuse, int spp_specular, int max_bounces, uint64_t seed,
                           const RadianceCache* cache = nullptr);

// Closed-form shading from the cache; d_* are per-channel derivatives of the
// pixel value w.r.t. (albedo channel, rough, metal). Roughness clamps to the
// basis range with zero gradient outside.
struct PixelShade {
  Vec3 value;
  Vec3 d_albedo;  // dv_c / da_c
  Vec3 d_rough;
  Vec3 d_metal;
};
PixelShade rerender_pixel(const ShadingCache& cache, int x, int y, const MaterialSample& mat,
                          const Vec3& emission);

// Image-wide rerender: albedo 3ch, rough/metal 1ch, emission 3ch.
ImageF rerender(const ShadingCache& cache, const ImageF& albedo, const ImageF& rough,
                const ImageF& metal, const ImageF& emission);

}  // namespace iif
