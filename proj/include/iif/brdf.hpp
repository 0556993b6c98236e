#pragma once

#include <utility>

#include "iif/vec.hpp"

namespace iif {

struct MaterialSample {
  Vec3 albedo;     // rgb in [0,1]
  double rough = 1.0;
  double metal = 0.0;
};

// Cook-Torrance diffuse/specular split. k_s doubles as the Schlick F0.
// k_d = (1-m) a,  k_s = 0.04 (1-m) + a m.
std::pair<Vec3, Vec3> kd_ks(const MaterialSample& mat);

// The (k_d, k_s, r) triple is what light transport actually consumes; tests
// and caches operate on it directly.
struct SurfaceMaterial {
  Vec3 kd;
  Vec3 ks;
  double rough = 1.0;

  static SurfaceMaterial from_sample(const MaterialSample& mat);
};

struct BrdfEval {
  Vec3 value;       // 1/sr
  double pdf = 0;   // 1/sr, set by sampling
};

// Roughness is clamped to >= 0.03 during transport to bound the GGX peak.
constexpr double kMinTransportRoughness = 0.03;

// f = kd/pi + D F G / (4 (n.wi)(n.wo)); zero when n.wi <= 0.
// GGX D with alpha = r^2, Smith separable Schlick-GGX G with k = alpha/2,
// Schlick F with F0 = ks.
BrdfEval eval_brdf(const SurfaceMaterial& mat, const Vec3& n, const Vec3& wi, const Vec3& wo);

// GGX normal distribution, exposed for quadrature checks.
double ggx_d(double cos_nh, double alpha);

// Cosine-weighted hemisphere around n; pdf = cos(theta)/pi. u=(0,0) maps to n.
Vec3 cosine_sample_hemisphere(const Vec3& n, double u1, double u2);

// NDF-proportional half-vector about n for the given roughness (alpha = r^2);
// solid-angle pdf of h is D(cos_h) * cos_h.
Vec3 sample_ggx_half(const Vec3& n, double rough, double u1, double u2);

// Lobe selected by luminance of kd vs ks; returned pdf is the full mixture
// pdf of the sampled direction. pdf == 0 signals an invalid sample.
struct BrdfSample {
  Vec3 wi;
  BrdfEval eval;
};
BrdfSample sample_brdf(const SurfaceMaterial& mat, const Vec3& n, const Vec3& wo,
                       double u1, double u2, double lobe_u);

}  // namespace iif
