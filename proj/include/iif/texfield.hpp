#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "iif/image.hpp"
#include "iif/optim.hpp"
#include "iif/vec.hpp"

namespace iif {

struct FieldConfig {
  int levels = 8;
  int features = 2;
  int hashmap_log2 = 15;  // table size T = 1 << hashmap_log2
  int base_res = 4;
  int top_res = 128;
  int hidden = 64;
  double b_min = 1e-3;

  // Paper-scale preset: 32 levels, 2 features, 2^19 table.
  static FieldConfig paper_preset();
  void validate() const;
};

// Per-point output: 5 material channels (albedo rgb, rough, metal).
struct FieldOutput {
  std::array<double, 5> mu;  // sigmoid-bounded means in [0,1]
  std::array<double, 5> b;   // softplus scales >= b_min
};

// Saved activations of a forward pass, consumed by the matching backward pass.
struct FieldTape {
  size_t n = 0;
  std::vector<Vec3> unit_points;
  std::vector<uint8_t> clamped;
  std::vector<double> feats;      // n x (levels*features)
  std::vector<double> h1, h2;     // n x hidden, post-ReLU
  std::vector<double> out;        // n x 10, pre-activation
  std::vector<uint32_t> corner_index;  // n x levels x 8
  std::vector<double> corner_weight;   // n x levels x 8
};

// Multi-resolution hash-grid encoding with a small ReLU MLP head producing
// Laplace means and scales for the five material channels.
class TextureField {
 public:
  TextureField(const FieldConfig& cfg, const Aabb& domain, uint64_t seed);

  const FieldConfig& config() const { return cfg_; }
  const Aabb& domain() const { return domain_; }
  size_t parameter_count() const;

  FieldOutput query(const Vec3& x) const;
  // Batched forward retaining activations for backward.
  std::vector<FieldOutput> forward(const std::vector<Vec3>& points, FieldTape& tape) const;
  // Accumulates parameter gradients; upstream is (dL/dmu, dL/db) per point.
  // Throws if the tape does not match this field's shapes.
  void backward(const FieldTape& tape,
                const std::vector<std::array<double, 5>>& dmu,
                const std::vector<std::array<double, 5>>& db);

  // Registers grid + MLP blocks (with their gradient buffers) for optimization.
  void register_params(ParamRegistry& registry);

  void save(const std::filesystem::path& path) const;
  static TextureField load(const std::filesystem::path& path);

  // raw access for tests
  std::vector<double>& grid() { return grid_; }
  std::vector<std::vector<double>*> all_param_blocks();
  std::vector<std::vector<double>*> all_grad_blocks();

 private:
  FieldConfig cfg_;
  Aabb domain_;
  std::vector<int> level_res_;
  std::vector<size_t> level_offset_;  // into grid_, in feature vectors
  std::vector<size_t> level_size_;    // table entries per level
  size_t input_dim_ = 0;

  std::vector<double> grid_;
  std::vector<double> w1_, b1_, w2_, b2_, w3_, b3_;
  std::vector<double> g_grid_, g_w1_, g_b1_, g_w2_, g_b2_, g_w3_, g_b3_;

  size_t table_index(int level, int ix, int iy, int iz) const;
  void encode_point(const Vec3& x, double* feats, uint32_t* idx, double* w, bool* clamped) const;
  void head_forward(const double* feats, double* h1, double* h2, double* out) const;
  static FieldOutput activate(const double* out, double b_min);
};

struct Mesh;

// One baked atlas per object: every triangle owns a tile x tile block; texel
// (i, j) of tile t samples the field at a fixed barycentric point, optionally
// composed with a per-object material transform. texel_position records the
// surface point of each texel for verification; texel_valid marks texels whose
// barycentric point lies inside the triangle.
struct TextureAtlas {
  int object_id = 0;
  int tile = 0;
  int tiles_x = 0, tiles_y = 0;
  std::vector<int> triangles;  // global triangle index per tile
  ImageF albedo, rough, metal;
  std::vector<Vec3> texel_position;
  std::vector<uint8_t> texel_valid;
};

// Applied per object after querying the field, before writing the atlas.
using MaterialTransform = std::function<void(int object, Vec3& albedo, double& rough, double& metal)>;

// texel_density = texels per unit of surface length; tile sizes adapt per
// object from the mean triangle area.
std::vector<TextureAtlas> export_texture(const TextureField& field, const Mesh& mesh,
                                         double texel_density,
                                         const MaterialTransform& transform = nullptr);

}  // namespace iif
