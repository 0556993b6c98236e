#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "iif/geom.hpp"
#include "iif/imageio.hpp"
#include "iif/optim.hpp"
#include "iif/texfield.hpp"

namespace iif {

// Channel layout used throughout fusion: 0..2 albedo rgb, 3 rough, 4 metal.
// Channel groups (albedo / rough / metal) share assignment logits and affine
// transform shapes.
constexpr int kChannels = 5;

// Affine solution-space transforms T^a (3x4), T^r (1x2), T^m (1x2) and
// assignment logits z, one of each per (view, object, candidate), identity /
// zero initialized.
struct FusionParams {
  int views = 0, objects = 0, k = 0;

  std::vector<double> t_albedo;  // V*O*K x 12, row-major [A | c]
  std::vector<double> t_rough;   // V*O*K x 2, [slope, offset]
  std::vector<double> t_metal;   // V*O*K x 2
  std::vector<double> z_albedo, z_rough, z_metal;  // V*O*K

  std::vector<double> g_t_albedo, g_t_rough, g_t_metal;
  std::vector<double> g_z_albedo, g_z_rough, g_z_metal;

  FusionParams() = default;
  FusionParams(int views, int objects, int k);

  size_t index(int v, int o, int kk) const { return (size_t(v) * objects + o) * k + kk; }
  double* albedo_t(int v, int o, int kk) { return &t_albedo[index(v, o, kk) * 12]; }
  const double* albedo_t(int v, int o, int kk) const { return &t_albedo[index(v, o, kk) * 12]; }

  void register_params(ParamRegistry& registry, bool transforms, bool logits);
};

Vec3 apply_affine_albedo(const double* t12, const Vec3& a);
double apply_affine_scalar(const double* t2, double v);

// Softmax with temperature; numerically stabilized by max subtraction.
std::vector<double> mixture_weights(std::span<const double> z, double tau_logit);

// Median of values; even counts average the two middle entries. The indices
// and weights of the contributing entries are reported for backward.
struct MedianResult {
  double value = 0;
  int idx_lo = 0, idx_hi = 0;
  double w_lo = 1.0, w_hi = 0.0;
};
MedianResult median_with_subgradient(std::span<const double> values);

// Closed-form KL divergence between Laplace(mu1,b1) and Laplace(mu2,b2).
// Throws on non-positive scales.
double kl_laplace(double mu1, double b1, double mu2, double b2);
struct KlGrad {
  double d_mu1, d_b1, d_mu2, d_b2;
};
KlGrad kl_laplace_grad(double mu1, double b1, double mu2, double b2);

// One sampled pixel with its raw (untransformed) candidate values.
struct PixelSample {
  int view = 0;
  int object = 0;
  Vec3 position;
  std::vector<Vec3> cand_albedo;   // K
  std::vector<double> cand_rough;  // K
  std::vector<double> cand_metal;  // K
};
using PixelBatch = std::vector<PixelSample>;

enum class AggregationMode {
  kPerObjectMean,  // single mean material per object, no optimization
  kPerTexelMean,   // field L2-fit to raw candidate means, transforms frozen
  kParametric,     // field + transforms, L2 data term, uniform weights
  kFull,           // Laplace distribution matching + assignment logits
};

struct LossBreakdown {
  double data = 0, label = 0, reg = 0;
  double total() const { return data + label + reg; }
};

// Joint loss evaluation over one batch. Gradients (when requested) accumulate
// into the field and FusionParams gradient buffers. The softmin responsibilities
// q are treated as constants.
class FusionObjective {
 public:
  FusionObjective(TextureField& field, FusionParams& params, double b_min)
      : field_(&field), params_(&params), b_min_(b_min) {}

  double w_data = 1.0, w_label = 1.0, w_reg = 1e2;
  double tau_logit = 1.0, tau_err = 1.0;
  AggregationMode mode = AggregationMode::kFull;

  LossBreakdown evaluate(const PixelBatch& batch, bool with_grad);

  // Individual terms, exposed for gradient verification.
  double data_loss(const PixelBatch& batch, bool with_grad);
  double label_loss(const PixelBatch& batch, bool with_grad);
  double reg_loss(bool with_grad);

 private:
  TextureField* field_;
  FusionParams* params_;
  double b_min_;

  LossBreakdown evaluate_impl(const PixelBatch& batch, bool with_grad, bool use_data,
                              bool use_label, bool use_reg);
};

struct AggregationInputs {
  const std::vector<GBuffer>* gbuffers = nullptr;
  const std::vector<PredictionSet>* predictions = nullptr;  // aligned with gbuffers
  Aabb domain;
  FieldConfig field_config;
};

struct AggregationResult {
  TextureField field;
  FusionParams params;
  AggregationMode mode = AggregationMode::kFull;
  std::vector<std::array<double, 5>> per_object_mean;  // kPerObjectMean only
  std::vector<double> loss_history;                    // every 100 iterations
};

// The distribution-matching optimization: Adam over (field, transforms,
// logits) with the annealed temperatures and lr schedule from the config.
AggregationResult run_aggregation(const AggregationInputs& inputs, const PipelineConfig& cfg,
                                  uint64_t seed, AggregationMode mode = AggregationMode::kFull,
                                  bool verbose = false);

// Assemble one pixel's candidate values from a prediction set.
PixelSample make_pixel_sample(const GBuffer& gb, const PredictionSet& preds, int view, int x, int y);

void save_fusion_params(const FusionParams& params, const std::filesystem::path& path);
FusionParams load_fusion_params(const std::filesystem::path& path);

}  // namespace iif
