#include "iif/render.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "iif/imageio.hpp"

namespace iif {

MaterialSource constant_materials(std::vector<MaterialSample> per_object) {
  return [mats = std::move(per_object)](const Hit& hit) {
    if (hit.object_id < 0 || hit.object_id >= int(mats.size()))
      throw std::runtime_error("render: no material for object id " +
                               std::to_string(hit.object_id));
    return SurfaceMaterial::from_sample(mats[hit.object_id]);
  };
}

void EmitterSet::validate(size_t triangle_count) const {
  if (emission.size() != triangle_count)
    throw std::runtime_error("render: emission table size does not match triangle count");
  for (const Vec3& e : emission)
    for (int c = 0; c < 3; ++c)
      if (!std::isfinite(e[c]) || e[c] < 0)
        throw std::runtime_error("render: negative or non-finite emission");
  if (env.width > 0) {
    if (env.width != kEnvWidth || env.height != kEnvHeight || env.channels != 3)
      throw std::runtime_error("render: environment map must be 16x32 rgb");
    for (const float v : env.data)
      if (!std::isfinite(v) || v < 0)
        throw std::runtime_error("render: negative or non-finite environment radiance");
  }
}

Vec3 env_radiance(const EmitterSet& emitters, const Vec3& dir) {
  if (!emitters.has_env()) return Vec3(0);
  const double theta = std::acos(std::clamp(dir.y, -1.0, 1.0));
  double phi = std::atan2(dir.z, dir.x);
  if (phi < 0) phi += 2.0 * M_PI;
  const int row = std::min(int(theta / M_PI * kEnvHeight), kEnvHeight - 1);
  const int col = std::min(int(phi / (2.0 * M_PI) * kEnvWidth), kEnvWidth - 1);
  return emitters.env.rgb(col, row);
}

LightSampler::LightSampler(const Mesh& mesh, const EmitterSet& emitters)
    : mesh_(&mesh), emitters_(&emitters) {
  double total = 0;
  std::vector<double> power;
  for (size_t t = 0; t < mesh.triangles.size(); ++t) {
    const double lum = luminance(emitters.emission[t]);
    if (lum <= 0) continue;
    const double p = lum * mesh.triangle_area(int(t));
    tris_.push_back(int(t));
    power.push_back(p);
    total += p;
  }
  prob_.resize(power.size());
  cdf_.resize(power.size());
  double acc = 0;
  for (size_t i = 0; i < power.size(); ++i) {
    prob_[i] = power[i] / total;
    acc += prob_[i];
    cdf_[i] = acc;
  }
  if (!cdf_.empty()) cdf_.back() = 1.0;
}

LightSampler::Sample LightSampler::sample(Rng& rng) const {
  Sample s;
  if (tris_.empty()) return s;
  const double u = rng.next_double();
  const size_t i = std::lower_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin();
  const size_t j = std::min(i, tris_.size() - 1);
  s.tri = tris_[j];
  // uniform barycentrics
  const double su = std::sqrt(rng.next_double());
  const double v = rng.next_double();
  const double b1 = 1.0 - su, b2 = su * v;
  s.point = mesh_->point_on(s.tri, b1, b2);
  const Triangle& tr = mesh_->triangles[s.tri];
  s.normal = normalize(cross(mesh_->vertices[tr.v[1]] - mesh_->vertices[tr.v[0]],
                             mesh_->vertices[tr.v[2]] - mesh_->vertices[tr.v[0]]));
  s.radiance = emitters_->emission[s.tri];
  s.pdf_area = prob_[j] / mesh_->triangle_area(s.tri);
  return s;
}

size_t RadianceCache::voxel_index(const Vec3& x) const {
  const Vec3 e = bounds.extent();
  size_t idx[3];
  for (int c = 0; c < 3; ++c) {
    const double f = e[c] > 0 ? (x[c] - bounds.lo[c]) / e[c] : 0.0;
    idx[c] = size_t(std::clamp(int(f * res), 0, res - 1));
  }
  return (idx[2] * res + idx[1]) * res + idx[0];
}

bool RadianceCache::occupied(const Vec3& x) const { return count[voxel_index(x)] > 0; }

Vec3 RadianceCache::lookup(const Vec3& x) const {
  const size_t i = voxel_index(x);
  if (count[i] == 0) return Vec3(0);
  return sum[i] / double(count[i]);
}

namespace {

// Full radiance estimator shared by the renderer and the shading cache.
// Emission is picked up only at the first vertex; deeper direct lighting comes
// from next-event estimation, and the environment only from escaping rays.
// Past the explicit bounces the radiance cache (reflected component) takes
// over.
Vec3 trace_radiance(const Bvh& bvh, const EmitterSet& emitters, const MaterialSource& materials,
                    const LightSampler& lights, Ray ray, uint64_t seed, uint64_t pixel,
                    uint64_t sample, int max_bounces, const RadianceCache* cache,
                    bool count_first_emission, int start_bounce = 0) {
  Vec3 L(0), tp(1);
  const double eps = bvh.ray_epsilon();
  for (int b = start_bounce;; ++b) {
    const auto hit = bvh.intersect(ray);
    if (!hit) {
      L += tp * env_radiance(emitters, ray.dir);
      break;
    }
    if (b == start_bounce && count_first_emission) L += tp * emitters.emission[hit->tri];
    if (cache && b >= kExplicitBounces) {
      L += tp * cache->lookup(hit->position);
      break;
    }
    if (b >= max_bounces) break;

    const SurfaceMaterial mat = materials(*hit);
    const Vec3 wo = -ray.dir;
    Rng rng(seed, pixel, sample, uint64_t(b));

    if (!lights.empty()) {
      const LightSampler::Sample ls = lights.sample(rng);
      const Vec3 d = ls.point - hit->position;
      const double dist2 = dot(d, d);
      if (dist2 > 0 && ls.pdf_area > 0) {
        const double dist = std::sqrt(dist2);
        const Vec3 wi = d / dist;
        const double cos_x = dot(hit->normal, wi);
        const double cos_y = std::abs(dot(ls.normal, wi));
        if (cos_x > 0 && cos_y > 0 && dist > 3 * eps) {
          const Ray shadow{hit->position + hit->normal * eps, wi, dist - 2 * eps};
          if (!bvh.occluded(shadow)) {
            const BrdfEval f = eval_brdf(mat, hit->normal, wi, wo);
            L += tp * f.value * ls.radiance * (cos_x * cos_y / (dist2 * ls.pdf_area));
          }
        }
      }
    }

    const BrdfSample bs =
        sample_brdf(mat, hit->normal, wo, rng.next_double(), rng.next_double(), rng.next_double());
    if (bs.eval.pdf <= 0) break;
    const double cos_i = dot(hit->normal, bs.wi);
    tp = tp * bs.eval.value * (cos_i / bs.eval.pdf);
    if (tp.x <= 0 && tp.y <= 0 && tp.z <= 0) break;
    ray = Ray{hit->position + hit->normal * eps, bs.wi, 1e30};
  }
  return L;
}

}  // namespace

ImageF path_trace(const Bvh& bvh, const EmitterSet& emitters, const MaterialSource& materials,
                  const Camera& camera, int spp, int max_bounces, uint64_t seed,
                  const RadianceCache* cache) {
  if (spp < 1) throw std::runtime_error("render: spp must be >= 1");
  emitters.validate(bvh.mesh().triangles.size());
  const LightSampler lights(bvh.mesh(), emitters);
  ImageF img(camera.width, camera.height, 3);
  for (int y = 0; y < camera.height; ++y)
    for (int x = 0; x < camera.width; ++x) {
      const uint64_t pixel = uint64_t(y) * camera.width + x;
      Vec3 acc(0);
      for (int s = 0; s < spp; ++s) {
        Rng jitter(seed, pixel, uint64_t(s), 0xffffu);
        const Ray ray = camera.primary_ray(x + jitter.next_double(), y + jitter.next_double());
        acc += trace_radiance(bvh, emitters, materials, lights, ray, seed, pixel, uint64_t(s),
                              max_bounces, cache, true);
      }
      img.set_rgb(x, y, acc / double(spp));
    }
  return img;
}

RadianceCache build_radiance_cache(const Bvh& bvh, const EmitterSet& emitters,
                                   const MaterialSource& materials, int n_paths, int grid_res,
                                   uint64_t seed) {
  if (grid_res < 4) throw std::runtime_error("render: radiance cache grid_res must be >= 4");
  emitters.validate(bvh.mesh().triangles.size());
  const Mesh& mesh = bvh.mesh();
  const double eps = bvh.ray_epsilon();

  RadianceCache cache;
  cache.bounds = bvh.bounds();
  cache.res = grid_res;
  cache.sum.assign(size_t(grid_res) * grid_res * grid_res, Vec3(0));
  cache.count.assign(cache.sum.size(), 0);

  // area-uniform surface sampling
  std::vector<double> area_cdf(mesh.triangles.size());
  double total_area = 0;
  for (size_t t = 0; t < mesh.triangles.size(); ++t) {
    total_area += mesh.triangle_area(int(t));
    area_cdf[t] = total_area;
  }

  constexpr int kCacheDepth = 8;
  struct Vertex {
    size_t voxel;
    Vec3 emission;
    Vec3 kd;
  };
  std::vector<Vertex> verts;
  for (int p = 0; p < n_paths; ++p) {
    Rng rng(seed, 0xcaceu, uint64_t(p));
    verts.clear();

    const double pick = rng.next_double() * total_area;
    const int tri =
        int(std::lower_bound(area_cdf.begin(), area_cdf.end(), pick) - area_cdf.begin());
    const int t0 = std::min(tri, int(mesh.triangles.size()) - 1);
    const double su = std::sqrt(rng.next_double());
    const double v = rng.next_double();
    Hit hit;
    hit.tri = t0;
    hit.b1 = 1.0 - su;
    hit.b2 = su * v;
    hit.position = mesh.point_on(t0, hit.b1, hit.b2);
    const Triangle& tr = mesh.triangles[t0];
    hit.normal = normalize(cross(mesh.vertices[tr.v[1]] - mesh.vertices[tr.v[0]],
                                 mesh.vertices[tr.v[2]] - mesh.vertices[tr.v[0]]));
    hit.object_id = tr.object_id;

    Vec3 tail(0);  // incident radiance at the last vertex from its sampled direction
    for (int depth = 0; depth < kCacheDepth; ++depth) {
      const SurfaceMaterial mat = materials(hit);
      verts.push_back({cache.voxel_index(hit.position), emitters.emission[hit.tri], mat.kd});
      const Vec3 dir = cosine_sample_hemisphere(hit.normal, rng.next_double(), rng.next_double());
      const Ray ray{hit.position + hit.normal * eps, dir, 1e30};
      const auto next = bvh.intersect(ray);
      if (!next) {
        tail = env_radiance(emitters, dir);
        break;
      }
      hit = *next;
      tail = Vec3(0);  // truncation if the depth limit cuts the path here
    }

    // Backward sweep: with cosine sampling the diffuse reflected estimate at a
    // vertex is kd times the incident sample; emission joins only what is
    // propagated upstream, so the binned value stays the reflected component.
    Vec3 incident = tail;
    for (int j = int(verts.size()) - 1; j >= 0; --j) {
      const Vec3 reflected = verts[j].kd * incident;
      cache.sum[verts[j].voxel] += reflected;
      cache.count[verts[j].voxel] += 1;
      incident = verts[j].emission + reflected;
    }
  }
  return cache;
}

namespace {

double smith_g1(double cos_nv, double k) { return cos_nv / (cos_nv * (1.0 - k) + k); }

}  // namespace

ShadingCache cache_shading(const Bvh& bvh, const EmitterSet& emitters,
                           const MaterialSource& materials, const Camera& camera,
                           int spp_diffuse, int spp_specular, int max_bounces, uint64_t seed,
                           const RadianceCache* cache) {
  if (spp_diffuse < 1 || spp_specular < 1)
    throw std::runtime_error("render: shading cache spp must be >= 1");
  emitters.validate(bvh.mesh().triangles.size());
  const LightSampler lights(bvh.mesh(), emitters);
  const GBuffer gb = make_gbuffer(bvh, camera);
  const double eps = bvh.ray_epsilon();

  ShadingCache sc;
  sc.width = camera.width;
  sc.height = camera.height;
  sc.dmap = ImageF(sc.width, sc.height, 3);
  for (int i = 0; i < 5; ++i) {
    sc.s0[i] = ImageF(sc.width, sc.height, 3);
    sc.s1[i] = ImageF(sc.width, sc.height, 3);
  }

  for (int y = 0; y < sc.height; ++y)
    for (int x = 0; x < sc.width; ++x) {
      const size_t i = gb.index(x, y);
      if (!gb.hit_mask[i]) continue;
      const Vec3 pos = gb.position[i];
      const Vec3 n = gb.normal[i];
      const Vec3 wo = normalize(camera.position - pos);
      const double cos_o = dot(n, wo);
      const uint64_t pixel = uint64_t(i);

      // Direct light from area emitters enters every map by next-event
      // estimation here; traced rays then carry indirect light (and env on
      // escape) only, which keeps the estimate usable with small lamps.
      struct DirectSample {
        Vec3 radiance;  // L * cos_x * cos_y / (dist^2 pdf_area), i.e. L dw
        Vec3 wi;
        double cos_i = 0;
      };
      std::vector<DirectSample> direct;
      if (!lights.empty()) {
        const uint64_t nseed = hash_combine(seed, 0xd1ec7u);
        const int n_direct = std::max(spp_diffuse, spp_specular);
        direct.reserve(n_direct);
        for (int s = 0; s < n_direct; ++s) {
          Rng rng(nseed, pixel, uint64_t(s), 0xabcu);
          const LightSampler::Sample ls = lights.sample(rng);
          const Vec3 d = ls.point - pos;
          const double dist2 = dot(d, d);
          if (dist2 <= 0 || ls.pdf_area <= 0) continue;
          const double dist = std::sqrt(dist2);
          const Vec3 wi = d / dist;
          const double cos_x = dot(n, wi);
          const double cos_y = std::abs(dot(ls.normal, wi));
          if (cos_x <= 0 || cos_y <= 0 || dist <= 3 * eps) continue;
          const Ray shadow{pos + n * eps, wi, dist - 2 * eps};
          if (bvh.occluded(shadow)) continue;
          direct.push_back(
              {ls.radiance * (cos_y / (dist2 * ls.pdf_area)), wi, cos_x});
        }
      }
      const int n_direct = lights.empty() ? 0 : std::max(spp_diffuse, spp_specular);

      Vec3 dsum(0);
      const uint64_t dseed = hash_combine(seed, 0xd1fu);
      for (int s = 0; s < spp_diffuse; ++s) {
        Rng rng(dseed, pixel, uint64_t(s), 0xabcu);
        const Vec3 dir = cosine_sample_hemisphere(n, rng.next_double(), rng.next_double());
        const Ray ray{pos + n * eps, dir, 1e30};
        dsum += trace_radiance(bvh, emitters, materials, lights, ray, dseed, pixel, uint64_t(s),
                               max_bounces, cache, false, 1);
      }
      Vec3 dmap = dsum * (M_PI / spp_diffuse);
      for (const DirectSample& ds : direct) dmap += ds.radiance * (ds.cos_i / n_direct);
      sc.dmap.set_rgb(x, y, dmap);

      if (cos_o <= 0) continue;
      for (int li = 0; li < 5; ++li) {
        const double rho = ShadingCache::kRoughBasis[li];
        const double alpha = rho * rho;
        const double k = alpha / 2.0;
        const uint64_t sseed = hash_combine(seed, 0x5ec0u + li);
        Vec3 acc0(0), acc1(0);
        for (int s = 0; s < spp_specular; ++s) {
          Rng rng(sseed, pixel, uint64_t(s), 0xabcu);
          const Vec3 h = sample_ggx_half(n, rho, rng.next_double(), rng.next_double());
          const double cos_oh = dot(wo, h);
          if (cos_oh <= 0) continue;
          const Vec3 wi = normalize(h * (2.0 * cos_oh) - wo);
          const double cos_i = dot(n, wi);
          const double cos_h = dot(n, h);
          if (cos_i <= 0 || cos_h <= 0) continue;
          const double pdf = ggx_d(cos_h, alpha) * cos_h / (4.0 * cos_oh);
          if (pdf <= 0) continue;
          const double dg = ggx_d(cos_h, alpha) * smith_g1(cos_i, k) * smith_g1(cos_o, k) /
                            (4.0 * cos_i * cos_o);
          const double om = 1.0 - cos_oh;
          const double p5 = om * om * om * om * om;
          const Ray ray{pos + n * eps, wi, 1e30};
          const Vec3 Li = trace_radiance(bvh, emitters, materials, lights, ray, sseed, pixel,
                                         uint64_t(s), max_bounces, cache, false, 1);
          const double w = cos_i / pdf;
          acc0 += Li * (p5 * dg * w);
          acc1 += Li * ((1.0 - p5) * dg * w);
        }
        Vec3 s0 = acc0 / double(spp_specular), s1 = acc1 / double(spp_specular);
        for (const DirectSample& ds : direct) {
          const Vec3 h = normalize(ds.wi + wo);
          const double cos_h = dot(n, h);
          const double cos_oh = dot(wo, h);
          if (cos_h <= 0 || cos_oh <= 0) continue;
          const double dg = ggx_d(cos_h, alpha) * smith_g1(ds.cos_i, k) * smith_g1(cos_o, k) /
                            (4.0 * ds.cos_i * cos_o);
          const double om = 1.0 - cos_oh;
          const double p5 = om * om * om * om * om;
          const Vec3 c = ds.radiance * (dg * ds.cos_i / n_direct);
          s0 += c * p5;
          s1 += c * (1.0 - p5);
        }
        sc.s0[li].set_rgb(x, y, s0);
        sc.s1[li].set_rgb(x, y, s1);
      }
    }
  return sc;
}

PixelShade rerender_pixel(const ShadingCache& cache, int x, int y, const MaterialSample& mat,
                          const Vec3& emission) {
  const auto& basis = ShadingCache::kRoughBasis;
  const auto [kd, ks] = kd_ks(mat);

  double r = std::clamp(mat.rough, basis.front(), basis.back());
  const bool clamped = mat.rough < basis.front() || mat.rough > basis.back();
  int seg = std::min(int((r - basis.front()) / 0.2), 3);
  const double t = (r - basis[seg]) / 0.2;

  const Vec3 d = cache.dmap.rgb(x, y);
  const Vec3 s0a = cache.s0[seg].rgb(x, y), s0b = cache.s0[seg + 1].rgb(x, y);
  const Vec3 s1a = cache.s1[seg].rgb(x, y), s1b = cache.s1[seg + 1].rgb(x, y);
  const Vec3 s0 = s0a * (1.0 - t) + s0b * t;
  const Vec3 s1 = s1a * (1.0 - t) + s1b * t;

  PixelShade out;
  out.value = emission + kd * d / M_PI + s0 + ks * s1;
  const Vec3 dv_dkd = d / M_PI;
  const Vec3 dv_dks = s1;
  const Vec3 dv_dr = clamped ? Vec3(0) : (s0b - s0a + ks * (s1b - s1a)) / 0.2;
  const double m = mat.metal;
  out.d_albedo = dv_dkd * (1.0 - m) + dv_dks * m;
  out.d_rough = dv_dr;
  out.d_metal = dv_dkd * (-1.0) * mat.albedo + dv_dks * (mat.albedo - Vec3(0.04));
  return out;
}

ImageF rerender(const ShadingCache& cache, const ImageF& albedo, const ImageF& rough,
                const ImageF& metal, const ImageF& emission) {
  if (albedo.width != cache.width || albedo.height != cache.height)
    throw std::runtime_error("render: rerender material maps must match the cache resolution");
  ImageF out(cache.width, cache.height, 3);
  for (int y = 0; y < cache.height; ++y)
    for (int x = 0; x < cache.width; ++x) {
      MaterialSample mat{albedo.rgb(x, y), rough.at(x, y), metal.at(x, y)};
      out.set_rgb(x, y, rerender_pixel(cache, x, y, mat, emission.rgb(x, y)).value);
    }
  return out;
}

void ShadingCache::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_pfm(dmap, dir / "dmap.pfm");
  for (int i = 0; i < 5; ++i) {
    write_pfm(s0[i], dir / ("s0_" + std::to_string(i) + ".pfm"));
    write_pfm(s1[i], dir / ("s1_" + std::to_string(i) + ".pfm"));
  }
  std::ofstream man(dir / "manifest.txt");
  if (!man) throw std::runtime_error("render: cannot write shading cache manifest");
  man << "shading-cache 1\n";
  man << "size " << width << " " << height << "\n";
  man << "dmap dmap.pfm\n";
  for (int i = 0; i < 5; ++i)
    man << "s0 " << kRoughBasis[i] << " s0_" << i << ".pfm\n";
  for (int i = 0; i < 5; ++i)
    man << "s1 " << kRoughBasis[i] << " s1_" << i << ".pfm\n";
}

ShadingCache ShadingCache::load(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.txt");
  if (!man) throw std::runtime_error("render: missing shading cache manifest in " + dir.string());
  std::string magic;
  int version = 0;
  man >> magic >> version;
  if (magic != "shading-cache" || version != 1)
    throw std::runtime_error("render: unrecognized shading cache manifest");
  ShadingCache sc;
  std::string key;
  man >> key >> sc.width >> sc.height;
  if (key != "size") throw std::runtime_error("render: malformed shading cache manifest");
  sc.dmap = read_pfm(dir / "dmap.pfm");
  for (int i = 0; i < 5; ++i) {
    sc.s0[i] = read_pfm(dir / ("s0_" + std::to_string(i) + ".pfm"));
    sc.s1[i] = read_pfm(dir / ("s1_" + std::to_string(i) + ".pfm"));
  }
  const auto check = [&](const ImageF& im) {
    if (im.width != sc.width || im.height != sc.height || im.channels != 3)
      throw std::runtime_error("render: shading cache map resolution mismatch");
  };
  check(sc.dmap);
  for (int i = 0; i < 5; ++i) {
    check(sc.s0[i]);
    check(sc.s1[i]);
  }
  return sc;
}

}  // namespace iif
