#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "iif/imageio.hpp"

namespace iif {

// Perturbation ranges for the synthetic candidate generator. Scales and slopes
// are drawn log-uniformly, offsets uniformly; sigma is per-pixel Gaussian
// noise and tone_jitter bends luminance with a random monotone cubic.
struct PerturbConfig {
  double albedo_scale_lo = 0.7, albedo_scale_hi = 1.4;
  double albedo_offset_lo = -0.1, albedo_offset_hi = 0.1;
  double scalar_slope_lo = 0.8, scalar_slope_hi = 1.25;
  double scalar_offset_lo = -0.1, scalar_offset_hi = 0.1;
  double noise_sigma = 0.0;
  double tone_jitter = 0.0;
  bool channel_mixing = false;  // small off-diagonal albedo terms

  void validate() const;
};

// Exact perturbation applied to one (view, object, candidate) triple.
struct GtTransform {
  int view = 0, object = 0, cand = 0;
  std::array<double, 12> albedo{};  // 3x4 row-major [A | c]
  std::array<double, 2> rough{};    // slope, offset
  std::array<double, 2> metal{};
};

// candidate_k = clamp(A_{o,k} * gt + c_{o,k} [+ tone jitter] + noise).
// Deterministic in (seed, view, object, k); the applied transforms go to
// `log` so recovery can be checked against them. clamp_warnings counts
// clamped output values.
PredictionSet simulate_predictions(const ImageF& gt_albedo, const ImageF& gt_rough,
                                   const ImageF& gt_metal, const ImageF& instance, int view_id,
                                   int k, const PerturbConfig& cfg, uint64_t seed,
                                   std::vector<GtTransform>* log = nullptr);

void write_transform_log(const std::vector<GtTransform>& log, const std::filesystem::path& path);
std::vector<GtTransform> read_transform_log(const std::filesystem::path& path);

}  // namespace iif
