#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "iif/imageio.hpp"
#include "iif/metrics.hpp"
#include "iif/render.hpp"
#include "iif/texfield.hpp"

namespace iif {

// Per-channel exposure + gamma response: ldr = clip((exp(e) * L)^(1/gamma)).
// Invertible in closed form on (0,1).
struct CrfModel {
  Vec3 log_exposure{0, 0, 0};
  Vec3 gamma{1, 1, 1};

  void validate() const;  // gamma in [1,4], everything finite
};

Vec3 crf_apply(const CrfModel& crf, const Vec3& linear);
Vec3 crf_invert(const CrfModel& crf, const Vec3& ldr);
// A channel at (or numerically against) the clip boundary carries no gradient
// and is excluded from losses.
bool crf_saturated(const Vec3& ldr);

void save_crf(const CrfModel& crf, const std::filesystem::path& path);
CrfModel load_crf(const std::filesystem::path& path);

// Emitter candidates: triangle ids above the t-quantile of per-triangle mean
// observed radiance, env texels analogously from escaped pixels.
struct EmitterCandidates {
  std::vector<int> triangles;
  std::vector<int> env_texels;  // row * kEnvWidth + col
};

EmitterCandidates detect_emitters(const std::vector<ImageF>& views_linear,
                                  const std::vector<GBuffer>& gbuffers,
                                  const std::vector<Camera>& cameras, double quantile_tri,
                                  double quantile_env, bool with_env);

struct EmissionFitResult {
  EmitterSet emitters;
  int pruned = 0;
  std::vector<double> loss_history;
};

// Stage 1: nonnegative per-triangle emission (and env texels) by SGD on the
// photometric loss of a single-bounce differentiable estimate; the material
// source stays frozen. Candidates below 5% of the max luminance are pruned
// after the configured iteration count; throws "no emitters" if none survive.
// sat_masks (optional, per view) excludes saturated pixels from the loss.
EmissionFitResult fit_emission(const Bvh& bvh, const MaterialSource& frozen_brdf,
                               const std::vector<ImageF>& views_linear,
                               const std::vector<Camera>& cameras,
                               const std::vector<GBuffer>& gbuffers,
                               const EmitterCandidates& candidates, const PipelineConfig& cfg,
                               uint64_t seed,
                               const std::vector<PixelMask>* sat_masks = nullptr);

// Per-object affine corrections applied to the frozen field means in stage 3.
struct ObjectParams {
  int objects = 0;
  std::vector<double> t_albedo;  // O x 12 row-major [A | c]
  std::vector<double> t_rough;   // O x 2
  std::vector<double> t_metal;   // O x 2

  ObjectParams() = default;
  explicit ObjectParams(int objects);  // identity
  // Field means -> transformed material (clamped to [0,1] by the consumer).
  MaterialSample apply(int object, const FieldOutput& mu) const;
};

void save_object_params(const ObjectParams& p, const std::filesystem::path& path);
ObjectParams load_object_params(const std::filesystem::path& path);

void save_emitters(const EmitterSet& emitters, const std::filesystem::path& txt_path);
EmitterSet load_emitters(const std::filesystem::path& txt_path, size_t triangle_count);

struct BrdfFitResult {
  ObjectParams params;
  CrfModel crf;
  std::vector<int> unobserved_objects;  // coverage warning
  std::vector<double> loss_history;     // per epoch
  int saturated_masked = 0;
};

// Stage 3: SGD over (ObjectParams, CrfModel) minimizing the LDR photometric
// loss of the cached-shading rerender, plus w_rough |r|^2 + w_metal |m|^2.
// The field is frozen; per-pixel means are queried once up front. Emission
// per pixel comes from the fitted emitters.
BrdfFitResult fit_object_params(const std::vector<ShadingCache>& caches,
                                const TextureField& field, const std::vector<GBuffer>& gbuffers,
                                const std::vector<ImageF>& views_ldr,
                                const std::vector<Camera>& cameras, const EmitterSet& emitters,
                                const PipelineConfig& cfg, uint64_t seed, bool fit_crf = true);

}  // namespace iif
