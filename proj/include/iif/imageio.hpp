#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "iif/geom.hpp"
#include "iif/image.hpp"

namespace iif {

// PFM, little-endian, bottom-up on disk, converted to top-left in memory.
// Readers reject NaN/Inf payloads; writers refuse to emit them.
ImageF read_pfm(const std::filesystem::path& path);
void write_pfm(const ImageF& image, const std::filesystem::path& path);

// 8-bit PNG; bytes are raw CRF output, no extra gamma applied here.
ImageF read_png(const std::filesystem::path& path);
void write_png(const ImageF& image, const std::filesystem::path& path);

// OBJ with `o`/`g` statements delimiting objects; quads are fan-triangulated.
// Without any object statement every face gets object id 0.
Mesh read_obj_with_objects(const std::filesystem::path& path);
void write_obj_with_objects(const Mesh& mesh, const std::filesystem::path& path);

// One camera per line: px py pz lx ly lz ux uy uz fov_deg. Resolution is
// supplied by the caller (shared across views).
std::vector<Camera> read_cameras(const std::filesystem::path& path, int width, int height);
void write_cameras(const std::vector<Camera>& cams, const std::filesystem::path& path);

struct PredictionSet {
  int view_id = 0;
  int k = 0;
  std::vector<ImageF> albedo;  // K entries, 3ch
  std::vector<ImageF> rough;   // K entries, 1ch
  std::vector<ImageF> metal;   // K entries, 1ch
  ImageF instance;             // 1ch, integral values, -1 background
  std::string source = "external";
  int clamp_warnings = 0;  // out-of-range input values clamped on load
};

// Layout: dir/view_{v:03}/pred_{k}/{albedo,rough,metal}.pfm + view_{v:03}/instance.pfm
PredictionSet load_prediction_set(const std::filesystem::path& dir, int view_id);
void save_prediction_set(const PredictionSet& set, const std::filesystem::path& dir);

struct PipelineConfig {
  // fusion (distribution matching)
  int fusion_k = 16;
  int fusion_batch = 65536;
  double fusion_lr = 1e-2;
  int fusion_epochs = 10;
  double fusion_w_data = 1.0;
  double fusion_w_label = 1.0;
  double fusion_w_reg = 1e2;
  double fusion_tau = 1.0;
  double fusion_anneal_factor = 0.85;
  int fusion_anneal_every = 100;
  double fusion_lr_decay = 0.5;      // applied every fusion_lr_decay_epochs
  int fusion_lr_decay_epochs = 2;

  // texture field
  int field_levels = 8;
  int field_features = 2;
  int field_hashmap_log2 = 15;
  int field_base_res = 4;
  int field_top_res = 128;
  int field_hidden = 64;
  double field_b_min = 1e-3;

  // forward rendering
  int render_spp = 64;
  int render_max_bounces = 4;

  // lighting optimization (stage 1)
  double light_quantile = 0.99;
  double light_env_quantile = 0.85;
  double light_lr = 1e2;
  int light_batch = 8192;
  int light_epochs = 1;
  int light_spp = 128;
  int light_prune_after = 1000;
  double light_prune_fraction = 0.05;

  // light transport caching (stage 2)
  int cache_spp_diffuse = 256;
  int cache_spp_specular = 128;

  // BRDF parameter fitting (stage 3)
  int brdf_epochs = 3;
  int brdf_batch = 32768;
  double brdf_lr = 1e1;
  double brdf_lr_decay = 0.2;
  double brdf_crf_lr = 1e-1;
  double brdf_w_rough = 1e-3;
  double brdf_w_metal = 5e-3;

  bool operator==(const PipelineConfig&) const = default;
};

// Line-oriented `key = value` file; '#' starts a comment. Unknown keys,
// duplicate keys and type mismatches are errors. Absent keys keep defaults.
PipelineConfig load_config(const std::filesystem::path& path);
void dump_config(const PipelineConfig& cfg, const std::filesystem::path& path);
// Apply a single `key = value` override (CLI --set).
void apply_config_override(PipelineConfig& cfg, const std::string& key, const std::string& value);

}  // namespace iif
