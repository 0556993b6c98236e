#include "iif/brdf.hpp"

#include <cassert>
#include <cmath>

namespace iif {

std::pair<Vec3, Vec3> kd_ks(const MaterialSample& mat) {
  const Vec3 a = clamp01(mat.albedo);
  const double m = clamp01(mat.metal);
  const Vec3 kd = a * (1.0 - m);
  const Vec3 ks = Vec3(0.04 * (1.0 - m)) + a * m;
  return {kd, ks};
}

SurfaceMaterial SurfaceMaterial::from_sample(const MaterialSample& mat) {
  auto [kd, ks] = kd_ks(mat);
  return {kd, ks, std::clamp(mat.rough, 0.0, 1.0)};
}

double ggx_d(double cos_nh, double alpha) {
  if (cos_nh <= 0) return 0;
  const double a2 = alpha * alpha;
  const double d = cos_nh * cos_nh * (a2 - 1.0) + 1.0;
  return a2 / (M_PI * d * d);
}

namespace {

double smith_g1(double cos_nv, double k) { return cos_nv / (cos_nv * (1.0 - k) + k); }

Vec3 schlick(const Vec3& f0, double cos_ih) {
  const double one_minus = 1.0 - cos_ih;
  const double p5 = one_minus * one_minus * one_minus * one_minus * one_minus;
  return f0 + (Vec3(1.0) - f0) * p5;
}

}  // namespace

BrdfEval eval_brdf(const SurfaceMaterial& mat, const Vec3& n, const Vec3& wi, const Vec3& wo) {
  assert(std::abs(length(wi) - 1) < 1e-6 && std::abs(length(wo) - 1) < 1e-6);
  const double cos_i = dot(n, wi);
  const double cos_o = dot(n, wo);
  if (cos_i <= 0 || cos_o <= 0) return {Vec3(0), 0};
  Vec3 f = mat.kd / M_PI;
  const Vec3 h = normalize(wi + wo);
  const double cos_h = dot(n, h);
  const double cos_ih = dot(wi, h);
  if (cos_h > 0 && cos_ih > 0) {
    const double r = std::max(mat.rough, kMinTransportRoughness);
    const double alpha = r * r;
    const double k = alpha / 2.0;
    const double d = ggx_d(cos_h, alpha);
    const double g = smith_g1(cos_i, k) * smith_g1(cos_o, k);
    const Vec3 fres = schlick(mat.ks, cos_ih);
    f += fres * (d * g / (4.0 * cos_i * cos_o));
  }
  return {f, 0};
}

Vec3 cosine_sample_hemisphere(const Vec3& n, double u1, double u2) {
  const double r = std::sqrt(u1);
  const double phi = 2.0 * M_PI * u2;
  const double x = r * std::cos(phi);
  const double y = r * std::sin(phi);
  const double z = std::sqrt(std::max(0.0, 1.0 - u1));
  Vec3 t, b;
  basis_from_normal(n, t, b);
  return normalize(t * x + b * y + n * z);
}

Vec3 sample_ggx_half(const Vec3& n, double rough, double u1, double u2) {
  const double alpha = rough * rough;
  const double phi = 2.0 * M_PI * u2;
  const double cos_h = std::sqrt((1.0 - u1) / (1.0 + (alpha * alpha - 1.0) * u1));
  const double sin_h = std::sqrt(std::max(0.0, 1.0 - cos_h * cos_h));
  Vec3 t, b;
  basis_from_normal(n, t, b);
  return normalize(t * (sin_h * std::cos(phi)) + b * (sin_h * std::sin(phi)) + n * cos_h);
}

BrdfSample sample_brdf(const SurfaceMaterial& mat, const Vec3& n, const Vec3& wo,
                       double u1, double u2, double lobe_u) {
  const double cos_o = dot(n, wo);
  if (cos_o <= 0) return {};
  const double wd = luminance(mat.kd);
  const double ws = luminance(mat.ks);
  if (wd + ws <= 0) return {};
  const double pd = wd / (wd + ws);
  const double r = std::max(mat.rough, kMinTransportRoughness);
  const double alpha = r * r;

  Vec3 wi;
  if (lobe_u < pd) {
    wi = cosine_sample_hemisphere(n, u1, u2);
  } else {
    const Vec3 h = sample_ggx_half(n, r, u1, u2);
    wi = normalize(h * (2.0 * dot(wo, h)) - wo);
  }
  const double cos_i = dot(n, wi);
  if (cos_i <= 0) return {};

  double pdf = pd * cos_i / M_PI;
  if (pd < 1.0) {
    const Vec3 h = normalize(wi + wo);
    const double cos_h = dot(n, h);
    const double cos_oh = dot(wo, h);
    if (cos_h > 0 && cos_oh > 0)
      pdf += (1.0 - pd) * ggx_d(cos_h, alpha) * cos_h / (4.0 * cos_oh);
  }
  if (pdf <= 0) return {};
  BrdfSample s;
  s.wi = wi;
  s.eval = eval_brdf(mat, n, wi, wo);
  s.eval.pdf = pdf;
  return s;
}

}  // namespace iif
