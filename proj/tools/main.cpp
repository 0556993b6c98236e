// Pipeline driver: wires scene IO, the aggregation stage and the three
// inverse-rendering stages into subcommands with manifests and deterministic
// seeding.
#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iif/fusion.hpp"
#include "iif/invrender.hpp"
#include "iif/metrics.hpp"
#include "iif/scenegen.hpp"
#include "iif/simpreds.hpp"

namespace fs = std::filesystem;
using namespace iif;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::string sha256_bytes(const void* data, size_t n) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data, n, digest, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string sha256_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string s = ss.str();
  return sha256_bytes(s.data(), s.size());
}

std::string config_hash(const PipelineConfig& cfg) {
  const fs::path tmp = fs::temp_directory_path() / "iif_cfg_hash.cfg";
  dump_config(cfg, tmp);
  std::string h = sha256_file(tmp);
  fs::remove(tmp);
  return h;
}

struct StageIo {
  fs::path dir;
  std::string stage;
  uint64_t seed = 0;
  std::string cfg_hash;
  std::vector<fs::path> inputs, outputs;
};

void write_manifest(const StageIo& io) {
  std::ofstream out(io.dir / "manifest.txt");
  if (!out) throw std::runtime_error("cannot write manifest in " + io.dir.string());
  out << "stage " << io.stage << "\n";
  out << "seed " << io.seed << "\n";
  out << "config_sha256 " << io.cfg_hash << "\n";
  // inputs are recorded relative to the run root so that identical reruns in
  // different directories produce identical manifests
  for (const fs::path& p : io.inputs)
    out << "input " << fs::proximate(p, io.dir.parent_path()).generic_string() << " "
        << sha256_file(p) << "\n";
  for (const fs::path& p : io.outputs)
    out << "output " << p.filename().string() << " " << sha256_file(p) << "\n";
}

void require_manifest(const fs::path& dir, const std::string& producer) {
  if (!fs::exists(dir / "manifest.txt"))
    throw std::runtime_error("stage-order violation: run '" + producer + "' first (missing " +
                             (dir / "manifest.txt").string() + ")");
}

// ---- scene directory layout -------------------------------------------------

struct CliScene {
  Mesh mesh;
  std::vector<Camera> cameras;
  std::vector<MaterialSample> materials;  // ground truth, may be empty
  EmitterSet emitters_gt;                 // may be empty
  int width = 0, height = 0;
};

void save_materials(const std::vector<MaterialSample>& mats, const fs::path& path) {
  std::ofstream out(path);
  out.precision(17);
  out << "objects " << mats.size() << "\n";
  for (size_t o = 0; o < mats.size(); ++o)
    out << o << " " << mats[o].albedo.x << " " << mats[o].albedo.y << " " << mats[o].albedo.z
        << " " << mats[o].rough << " " << mats[o].metal << "\n";
}

std::vector<MaterialSample> load_materials(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string key;
  size_t n = 0;
  in >> key >> n;
  if (key != "objects") throw std::runtime_error("malformed materials file " + path.string());
  std::vector<MaterialSample> mats(n);
  for (size_t i = 0; i < n; ++i) {
    size_t o;
    in >> o;
    in >> mats[o].albedo.x >> mats[o].albedo.y >> mats[o].albedo.z >> mats[o].rough >>
        mats[o].metal;
  }
  if (!in) throw std::runtime_error("malformed materials file " + path.string());
  return mats;
}

CliScene load_scene(const fs::path& scene_dir) {
  CliScene s;
  s.mesh = read_obj_with_objects(scene_dir / "scene.obj");
  s.mesh.compute_normals();
  s.mesh.validate();
  std::ifstream meta(scene_dir / "meta.txt");
  std::string key;
  if (!(meta >> key >> s.width >> s.height) || key != "size")
    throw std::runtime_error("missing or malformed " + (scene_dir / "meta.txt").string());
  s.cameras = read_cameras(scene_dir / "cameras.txt", s.width, s.height);
  if (fs::exists(scene_dir / "materials_gt.txt"))
    s.materials = load_materials(scene_dir / "materials_gt.txt");
  if (fs::exists(scene_dir / "emitters_gt.txt"))
    s.emitters_gt = load_emitters(scene_dir / "emitters_gt.txt", s.mesh.triangles.size());
  else
    s.emitters_gt.emission.assign(s.mesh.triangles.size(), Vec3(0));
  return s;
}

std::string view_name(int v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "view_%03d", v);
  return buf;
}

std::vector<GBuffer> make_gbuffers(const Bvh& bvh, const std::vector<Camera>& cams) {
  std::vector<GBuffer> out;
  for (const Camera& c : cams) out.push_back(make_gbuffer(bvh, c));
  return out;
}

// Observed views: prefers HDR PFMs; falls back to LDR PNGs.
struct Observations {
  std::vector<ImageF> linear;  // CRF-inverted (identity CRF for HDR/PNG load)
  std::vector<ImageF> ldr;     // clipped/encoded
  std::vector<PixelMask> saturated;
  bool from_ldr = false;
};

Observations load_observations(const fs::path& scene_dir, int views) {
  Observations obs;
  for (int v = 0; v < views; ++v) {
    const fs::path pfm = scene_dir / "views" / (view_name(v) + ".pfm");
    const fs::path png = scene_dir / "views_ldr" / (view_name(v) + ".png");
    ImageF lin, ldr;
    if (fs::exists(pfm)) {
      lin = read_pfm(pfm);
      ldr = lin;
      for (float& f : ldr.data) f = std::min(f, 1.0f);
    } else if (fs::exists(png)) {
      obs.from_ldr = true;
      ldr = read_png(png);
      // linearized with the identity response until the CRF is fitted
      lin = ldr;
    } else {
      throw std::runtime_error("missing observation for " + view_name(v) + " in " +
                               scene_dir.string());
    }
    PixelMask sat(size_t(ldr.width) * ldr.height, 0);
    for (int y = 0; y < ldr.height; ++y)
      for (int x = 0; x < ldr.width; ++x)
        if (crf_saturated(ldr.rgb(x, y))) sat[size_t(y) * ldr.width + x] = 1;
    obs.linear.push_back(std::move(lin));
    obs.ldr.push_back(std::move(ldr));
    obs.saturated.push_back(std::move(sat));
  }
  return obs;
}

FieldConfig field_config_from(const PipelineConfig& cfg) {
  FieldConfig fc;
  fc.levels = cfg.field_levels;
  fc.features = cfg.field_features;
  fc.hashmap_log2 = cfg.field_hashmap_log2;
  fc.base_res = cfg.field_base_res;
  fc.top_res = cfg.field_top_res;
  fc.hidden = cfg.field_hidden;
  fc.b_min = cfg.field_b_min;
  return fc;
}

MaterialSource field_materials(const TextureField& field) {
  return [&field](const Hit& hit) {
    const FieldOutput out = field.query(hit.position);
    return SurfaceMaterial::from_sample(
        {{out.mu[0], out.mu[1], out.mu[2]}, out.mu[3], out.mu[4]});
  };
}

MaterialSource field_materials_transformed(const TextureField& field, const ObjectParams& params) {
  return [&field, &params](const Hit& hit) {
    const FieldOutput out = field.query(hit.position);
    MaterialSample m = params.apply(hit.object_id, out);
    m.albedo = clamp01(m.albedo);
    m.rough = clamp01(m.rough);
    m.metal = clamp01(m.metal);
    return SurfaceMaterial::from_sample(m);
  };
}

Aabb field_domain(const Mesh& mesh) {
  Aabb box = mesh.bounds();
  const Vec3 pad = box.extent() * 0.01 + Vec3(1e-6);
  box.lo -= pad;
  box.hi += pad;
  return box;
}

// ---- shared CLI state -------------------------------------------------------

struct Common {
  fs::path scene, out;
  std::string config_file;
  uint64_t seed = 1;
  int threads = 1;
  std::vector<std::string> overrides;

  PipelineConfig cfg;
  void finalize() {
    if (!config_file.empty()) cfg = load_config(config_file);
    for (const std::string& kv : overrides) {
      const size_t eq = kv.find('=');
      if (eq == std::string::npos) throw CLI::ValidationError("--set expects key=value");
      apply_config_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (threads < 1) throw CLI::ValidationError("--threads must be >= 1");
  }
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
  cmd->add_option("--scene", c.scene, "scene directory")->required();
  if (needs_out) cmd->add_option("--out", c.out, "output directory")->required();
  cmd->add_option("--config", c.config_file, "pipeline config file");
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--threads", c.threads, "worker cap (render/fusion)");
  cmd->add_option("--set", c.overrides, "config override key=value")->take_all();
}

// ---- stages -----------------------------------------------------------------

void stage_make_scene(const Common& c, int views, int size, double light, int spp, bool ldr) {
  SceneSpec spec;
  spec.views = views;
  spec.width = spec.height = size;
  spec.light_radiance = light;
  Scene scene = make_cornell_scene(spec);

  fs::create_directories(c.scene / "views");
  fs::create_directories(c.scene / "gt");
  write_obj_with_objects(scene.mesh, c.scene / "scene.obj");
  write_cameras(scene.cameras, c.scene / "cameras.txt");
  {
    std::ofstream meta(c.scene / "meta.txt");
    meta << "size " << spec.width << " " << spec.height << "\n";
    meta << "views " << spec.views << "\n";
  }
  save_materials(scene.materials, c.scene / "materials_gt.txt");
  save_emitters(scene.emitters, c.scene / "emitters_gt.txt");

  const Bvh bvh(scene.mesh);
  const MaterialSource mats = constant_materials(scene.materials);
  CrfModel crf;
  crf.gamma = Vec3(2.2);
  if (ldr) fs::create_directories(c.scene / "views_ldr");
  for (int v = 0; v < spec.views; ++v) {
    const ImageF hdr = path_trace(bvh, scene.emitters, mats, scene.cameras[v], spp,
                                  c.cfg.render_max_bounces, c.seed + v);
    write_pfm(hdr, c.scene / "views" / (view_name(v) + ".pfm"));
    if (ldr) {
      ImageF enc(hdr.width, hdr.height, 3);
      for (int y = 0; y < hdr.height; ++y)
        for (int x = 0; x < hdr.width; ++x) enc.set_rgb(x, y, crf_apply(crf, hdr.rgb(x, y)));
      write_png(enc, c.scene / "views_ldr" / (view_name(v) + ".png"));
    }
    const GBuffer gb = make_gbuffer(bvh, scene.cameras[v]);
    ImageF a, r, m, inst;
    gt_maps_for_view(scene, gb, a, r, m, inst);
    const fs::path gd = c.scene / "gt" / view_name(v);
    fs::create_directories(gd);
    write_pfm(a, gd / "albedo.pfm");
    write_pfm(r, gd / "rough.pfm");
    write_pfm(m, gd / "metal.pfm");
    write_pfm(inst, gd / "instance.pfm");
  }
  std::printf("wrote scene '%s': %zu triangles, %d views\n", c.scene.string().c_str(),
              scene.mesh.triangles.size(), spec.views);
}

void stage_render(const Common& c) {
  const CliScene s = load_scene(c.scene);
  if (s.materials.empty()) throw std::runtime_error("render needs materials_gt.txt");
  const Bvh bvh(s.mesh);
  const fs::path dir = c.out / "render";
  fs::create_directories(dir);
  StageIo io{dir, "render", c.seed, config_hash(c.cfg)};
  const MaterialSource mats = constant_materials(s.materials);
  for (size_t v = 0; v < s.cameras.size(); ++v) {
    const ImageF im = path_trace(bvh, s.emitters_gt, mats, s.cameras[v], c.cfg.render_spp,
                                 c.cfg.render_max_bounces, c.seed + v);
    const fs::path p = dir / (view_name(int(v)) + ".pfm");
    write_pfm(im, p);
    io.outputs.push_back(p);
  }
  write_manifest(io);
}

void stage_simulate_preds(const Common& c, int k, const PerturbConfig& pc) {
  const CliScene s = load_scene(c.scene);
  const fs::path dir = c.out / "preds";
  fs::create_directories(dir);
  StageIo io{dir, "simulate-preds", c.seed, config_hash(c.cfg)};
  std::vector<GtTransform> log;
  for (size_t v = 0; v < s.cameras.size(); ++v) {
    const fs::path gd = c.scene / "gt" / view_name(int(v));
    const ImageF a = read_pfm(gd / "albedo.pfm");
    const ImageF r = read_pfm(gd / "rough.pfm");
    const ImageF m = read_pfm(gd / "metal.pfm");
    const ImageF inst = read_pfm(gd / "instance.pfm");
    PredictionSet set = simulate_predictions(a, r, m, inst, int(v), k, pc, c.seed, &log);
    save_prediction_set(set, dir);
    if (set.clamp_warnings > 0)
      std::printf("  %s: %d values clamped\n", view_name(int(v)).c_str(), set.clamp_warnings);
  }
  write_transform_log(log, dir / "transforms_gt.txt");
  io.outputs.push_back(dir / "transforms_gt.txt");
  write_manifest(io);
}

AggregationMode parse_mode(const std::string& m) {
  if (m == "full") return AggregationMode::kFull;
  if (m == "parametric") return AggregationMode::kParametric;
  if (m == "per-texel") return AggregationMode::kPerTexelMean;
  if (m == "per-object") return AggregationMode::kPerObjectMean;
  throw CLI::ValidationError("unknown aggregation mode '" + m + "'");
}

void stage_aggregate(const Common& c, const std::string& mode_name) {
  require_manifest(c.out / "preds", "simulate-preds");
  const CliScene s = load_scene(c.scene);
  const Bvh bvh(s.mesh);
  const std::vector<GBuffer> gbuffers = make_gbuffers(bvh, s.cameras);
  std::vector<PredictionSet> preds;
  for (size_t v = 0; v < s.cameras.size(); ++v)
    preds.push_back(load_prediction_set(c.out / "preds", int(v)));

  AggregationInputs in;
  in.gbuffers = &gbuffers;
  in.predictions = &preds;
  in.domain = field_domain(s.mesh);
  in.field_config = field_config_from(c.cfg);
  const AggregationResult res =
      run_aggregation(in, c.cfg, c.seed, parse_mode(mode_name), true);

  const fs::path dir = c.out / "aggregate";
  fs::create_directories(dir);
  StageIo io{dir, "aggregate", c.seed, config_hash(c.cfg)};
  io.inputs.push_back(c.out / "preds" / "manifest.txt");
  res.field.save(dir / "field.bin");
  save_fusion_params(res.params, dir / "fusion_params.txt");
  {
    std::ofstream mode(dir / "mode.txt");
    mode << mode_name << "\n";
    if (res.mode == AggregationMode::kPerObjectMean) {
      std::ofstream pm(dir / "per_object_mean.txt");
      pm.precision(17);
      for (size_t o = 0; o < res.per_object_mean.size(); ++o) {
        pm << o;
        for (double v : res.per_object_mean[o]) pm << " " << v;
        pm << "\n";
      }
      io.outputs.push_back(dir / "per_object_mean.txt");
    }
  }
  io.outputs.push_back(dir / "field.bin");
  io.outputs.push_back(dir / "fusion_params.txt");
  write_manifest(io);
}

void stage_fit_light(const Common& c) {
  require_manifest(c.out / "aggregate", "aggregate");
  const CliScene s = load_scene(c.scene);
  const Bvh bvh(s.mesh);
  const std::vector<GBuffer> gbuffers = make_gbuffers(bvh, s.cameras);
  const Observations obs = load_observations(c.scene, int(s.cameras.size()));
  const TextureField field = TextureField::load(c.out / "aggregate" / "field.bin");
  const MaterialSource mats = field_materials(field);

  const EmitterCandidates cands =
      detect_emitters(obs.linear, gbuffers, s.cameras, c.cfg.light_quantile,
                      c.cfg.light_env_quantile, /*with_env=*/true);
  std::printf("  emitter candidates: %zu triangles, %zu env texels\n", cands.triangles.size(),
              cands.env_texels.size());
  const EmissionFitResult fit = fit_emission(bvh, mats, obs.linear, s.cameras, gbuffers, cands,
                                             c.cfg, c.seed, &obs.saturated);
  std::printf("  pruned %d candidates\n", fit.pruned);

  const fs::path dir = c.out / "light";
  fs::create_directories(dir);
  StageIo io{dir, "fit-light", c.seed, config_hash(c.cfg)};
  io.inputs.push_back(c.out / "aggregate" / "manifest.txt");
  save_emitters(fit.emitters, dir / "emitters.txt");
  io.outputs.push_back(dir / "emitters.txt");
  if (fit.emitters.has_env()) {
    write_pfm(fit.emitters.env, dir / "envmap.pfm");
    io.outputs.push_back(dir / "envmap.pfm");
  }
  write_manifest(io);
}

EmitterSet load_fitted_emitters(const Common& c, size_t tri_count) {
  EmitterSet em = load_emitters(c.out / "light" / "emitters.txt", tri_count);
  if (fs::exists(c.out / "light" / "envmap.pfm")) em.env = read_pfm(c.out / "light" / "envmap.pfm");
  return em;
}

void stage_cache_shading(const Common& c) {
  require_manifest(c.out / "light", "fit-light");
  const CliScene s = load_scene(c.scene);
  const Bvh bvh(s.mesh);
  const TextureField field = TextureField::load(c.out / "aggregate" / "field.bin");
  const MaterialSource mats = field_materials(field);
  const EmitterSet em = load_fitted_emitters(c, s.mesh.triangles.size());

  const RadianceCache rcache = build_radiance_cache(bvh, em, mats, 100000, 16, c.seed);
  const fs::path dir = c.out / "cache";
  fs::create_directories(dir);
  StageIo io{dir, "cache-shading", c.seed, config_hash(c.cfg)};
  io.inputs.push_back(c.out / "light" / "manifest.txt");
  for (size_t v = 0; v < s.cameras.size(); ++v) {
    const ShadingCache sc =
        cache_shading(bvh, em, mats, s.cameras[v], c.cfg.cache_spp_diffuse,
                      c.cfg.cache_spp_specular, c.cfg.render_max_bounces, c.seed + v, &rcache);
    sc.save(dir / view_name(int(v)));
    io.outputs.push_back(dir / view_name(int(v)) / "manifest.txt");
  }
  write_manifest(io);
}

void stage_fit_brdf(const Common& c) {
  require_manifest(c.out / "cache", "cache-shading");
  const CliScene s = load_scene(c.scene);
  const Bvh bvh(s.mesh);
  const std::vector<GBuffer> gbuffers = make_gbuffers(bvh, s.cameras);
  const Observations obs = load_observations(c.scene, int(s.cameras.size()));
  const TextureField field = TextureField::load(c.out / "aggregate" / "field.bin");
  const EmitterSet em = load_fitted_emitters(c, s.mesh.triangles.size());
  std::vector<ShadingCache> caches;
  for (size_t v = 0; v < s.cameras.size(); ++v)
    caches.push_back(ShadingCache::load(c.out / "cache" / view_name(int(v))));

  const BrdfFitResult fit = fit_object_params(caches, field, gbuffers, obs.ldr, s.cameras, em,
                                              c.cfg, c.seed, /*fit_crf=*/true);
  for (const int o : fit.unobserved_objects)
    std::printf("  warning: object %d never observed; parameters stay identity\n", o);
  std::printf("  masked %d saturated pixels\n", fit.saturated_masked);

  const fs::path dir = c.out / "brdf";
  fs::create_directories(dir);
  StageIo io{dir, "fit-brdf", c.seed, config_hash(c.cfg)};
  io.inputs.push_back(c.out / "cache" / "manifest.txt");
  save_object_params(fit.params, dir / "object_params.txt");
  save_crf(fit.crf, dir / "crf.txt");
  io.outputs.push_back(dir / "object_params.txt");
  io.outputs.push_back(dir / "crf.txt");
  write_manifest(io);
}

void add_emissive_sphere(Mesh& mesh, EmitterSet& em, const Vec3& center, double radius,
                         double radiance) {
  const int object = mesh.object_count();
  const int rings = 8, segs = 16;
  const int base = int(mesh.vertices.size());
  for (int i = 0; i <= rings; ++i) {
    const double th = M_PI * i / rings;
    for (int j = 0; j < segs; ++j) {
      const double ph = 2.0 * M_PI * j / segs;
      mesh.vertices.push_back(center + Vec3(std::sin(th) * std::cos(ph), std::cos(th),
                                            std::sin(th) * std::sin(ph)) *
                                           radius);
    }
  }
  const auto idx = [&](int i, int j) { return base + i * segs + (j % segs); };
  for (int i = 0; i < rings; ++i)
    for (int j = 0; j < segs; ++j) {
      if (i > 0) mesh.triangles.push_back({{idx(i, j), idx(i + 1, j), idx(i, j + 1)}, object});
      if (i < rings - 1)
        mesh.triangles.push_back({{idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)}, object});
    }
  mesh.compute_normals();
  em.emission.resize(mesh.triangles.size(), Vec3(radiance));
}

void stage_relight(const Common& c, const std::vector<double>& sphere) {
  require_manifest(c.out / "brdf", "fit-brdf");
  CliScene s = load_scene(c.scene);
  const TextureField field = TextureField::load(c.out / "aggregate" / "field.bin");
  const ObjectParams params = load_object_params(c.out / "brdf" / "object_params.txt");
  EmitterSet em = load_fitted_emitters(c, s.mesh.triangles.size());
  if (!sphere.empty()) {
    if (sphere.size() != 5)
      throw CLI::ValidationError("--add-sphere expects x y z radius radiance");
    add_emissive_sphere(s.mesh, em, {sphere[0], sphere[1], sphere[2]}, sphere[3], sphere[4]);
  }
  const Bvh bvh(s.mesh);

  // Points on the inserted sphere fall outside the trained field; its material
  // is matte grey via the transform fallback.
  const int trained_objects = params.objects;
  MaterialSource mats = [&field, &params, trained_objects](const Hit& hit) {
    if (hit.object_id >= trained_objects)
      return SurfaceMaterial::from_sample({{0.5, 0.5, 0.5}, 0.8, 0.0});
    const FieldOutput out = field.query(hit.position);
    MaterialSample m = params.apply(hit.object_id, out);
    m.albedo = clamp01(m.albedo);
    m.rough = clamp01(m.rough);
    m.metal = clamp01(m.metal);
    return SurfaceMaterial::from_sample(m);
  };

  const fs::path dir = c.out / "relight";
  fs::create_directories(dir);
  StageIo io{dir, "relight", c.seed, config_hash(c.cfg)};
  io.inputs.push_back(c.out / "brdf" / "manifest.txt");
  for (size_t v = 0; v < s.cameras.size(); ++v) {
    const ImageF im = path_trace(bvh, em, mats, s.cameras[v], c.cfg.render_spp,
                                 c.cfg.render_max_bounces, c.seed + v);
    const fs::path p = dir / (view_name(int(v)) + ".pfm");
    write_pfm(im, p);
    io.outputs.push_back(p);
  }
  write_manifest(io);
}

void stage_eval(const Common& c) {
  require_manifest(c.out / "brdf", "fit-brdf");
  const CliScene s = load_scene(c.scene);
  const Bvh bvh(s.mesh);
  const std::vector<GBuffer> gbuffers = make_gbuffers(bvh, s.cameras);
  const TextureField field = TextureField::load(c.out / "aggregate" / "field.bin");
  const ObjectParams params = load_object_params(c.out / "brdf" / "object_params.txt");
  const EmitterSet em = load_fitted_emitters(c, s.mesh.triangles.size());

  const fs::path dir = c.out / "eval";
  fs::create_directories(dir);
  StageIo io{dir, "eval", c.seed, config_hash(c.cfg)};
  io.inputs.push_back(c.out / "brdf" / "manifest.txt");
  std::ofstream report(dir / "report.txt");
  report << "view  albedo_psnr  albedo_ssim  rough_l2  metal_l2  render_psnr\n";

  double sum_ap = 0, sum_as = 0, sum_rl = 0, sum_ml = 0, sum_rp = 0;
  int counted = 0;
  for (size_t v = 0; v < s.cameras.size(); ++v) {
    const GBuffer& gb = gbuffers[v];
    const fs::path gd = c.scene / "gt" / view_name(int(v));
    if (!fs::exists(gd / "albedo.pfm")) continue;
    const ImageF gt_a = read_pfm(gd / "albedo.pfm");
    const ImageF gt_r = read_pfm(gd / "rough.pfm");
    const ImageF gt_m = read_pfm(gd / "metal.pfm");

    ImageF pa(gb.width, gb.height, 3), pr(gb.width, gb.height, 1), pm(gb.width, gb.height, 1);
    PixelMask mask(size_t(gb.width) * gb.height, 0);
    for (int y = 0; y < gb.height; ++y)
      for (int x = 0; x < gb.width; ++x) {
        const size_t i = gb.index(x, y);
        if (!gb.hit_mask[i]) continue;
        const Vec3& e = em.emission.empty() ? Vec3(0) : em.emission[gb.tri[i]];
        const bool emitter = e.x > 0 || e.y > 0 || e.z > 0;
        MaterialSample m = params.apply(gb.object_id[i], field.query(gb.position[i]));
        pa.set_rgb(x, y, clamp01(m.albedo));
        pr.at(x, y) = float(clamp01(m.rough));
        pm.at(x, y) = float(clamp01(m.metal));
        if (!emitter && !(gt_r.at(x, y) < 0.05f && gt_m.at(x, y) > 0.95f)) mask[i] = 1;
      }

    const double ap = psnr(pa, gt_a, mask);
    const double as = ssim(pa, gt_a, mask);
    const double rl = l2(pr, gt_r, mask);
    const double ml = l2(pm, gt_m, mask);

    double rp = 0;
    const fs::path view_pfm = c.scene / "views" / (view_name(int(v)) + ".pfm");
    if (fs::exists(view_pfm) && fs::exists(c.out / "cache" / view_name(int(v)) / "manifest.txt")) {
      const ShadingCache sc = ShadingCache::load(c.out / "cache" / view_name(int(v)));
      ImageF rerendered(gb.width, gb.height, 3);
      for (int y = 0; y < gb.height; ++y)
        for (int x = 0; x < gb.width; ++x) {
          const size_t i = gb.index(x, y);
          Vec3 emission(0);
          MaterialSample m{{0, 0, 0}, 1, 0};
          if (gb.hit_mask[i]) {
            emission = em.emission[gb.tri[i]];
            m = params.apply(gb.object_id[i], field.query(gb.position[i]));
            m.albedo = clamp01(m.albedo);
            m.rough = clamp01(m.rough);
            m.metal = clamp01(m.metal);
          } else {
            emission = env_radiance(em, s.cameras[v].primary_ray(x + 0.5, y + 0.5).dir);
          }
          rerendered.set_rgb(x, y, rerender_pixel(sc, x, y, m, emission).value);
        }
      ImageF gt_view = read_pfm(view_pfm);
      // PSNR over radiance clipped at 1 keeps peak semantics
      for (float& f : gt_view.data) f = std::min(f, 1.0f);
      ImageF rr = rerendered;
      for (float& f : rr.data) f = std::min(f, 1.0f);
      rp = psnr(rr, gt_view);
      write_pfm(rerendered, dir / (view_name(int(v)) + "_rerender.pfm"));
    }

    report << view_name(int(v)) << "  " << ap << "  " << as << "  " << rl << "  " << ml << "  "
           << rp << "\n";
    sum_ap += ap;
    sum_as += as;
    sum_rl += rl;
    sum_ml += ml;
    sum_rp += rp;
    ++counted;
  }
  if (counted > 0)
    report << "mean  " << sum_ap / counted << "  " << sum_as / counted << "  " << sum_rl / counted
           << "  " << sum_ml / counted << "  " << sum_rp / counted << "\n";
  report.close();
  io.outputs.push_back(dir / "report.txt");
  write_manifest(io);
  std::printf("eval report: %s\n", (dir / "report.txt").string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "desk-scale inverse rendering: candidate-material fusion, emission fitting and "
      "per-object BRDF recovery"};
  app.require_subcommand(1);

  Common c;

  auto* mk = app.add_subcommand("make-scene", "generate the built-in synthetic box scene");
  int mk_views = 8, mk_size = 64, mk_spp = 256;
  double mk_light = 10.0;
  bool mk_ldr = false;
  mk->add_option("--scene", c.scene, "scene directory to create")->required();
  mk->add_option("--config", c.config_file, "pipeline config file");
  mk->add_option("--seed", c.seed, "random seed");
  mk->add_option("--set", c.overrides, "config override key=value")->take_all();
  mk->add_option("--views", mk_views, "camera count");
  mk->add_option("--size", mk_size, "image width/height");
  mk->add_option("--spp", mk_spp, "samples per pixel for the reference renders");
  mk->add_option("--light", mk_light, "light radiance");
  mk->add_flag("--ldr", mk_ldr, "also write gamma-2.2 LDR PNG views");

  auto* rd = app.add_subcommand("render", "path trace the scene with ground-truth materials");
  add_common(rd, c);

  auto* sp = app.add_subcommand("simulate-preds", "generate K inconsistent candidate materials");
  add_common(sp, c);
  int sp_k = -1;
  PerturbConfig pc;
  sp->add_option("--k", sp_k, "candidates per view (default: fusion.k)");
  sp->add_option("--scale-lo", pc.albedo_scale_lo, "albedo scale range lower bound");
  sp->add_option("--scale-hi", pc.albedo_scale_hi, "albedo scale range upper bound");
  sp->add_option("--offset", pc.albedo_offset_hi, "albedo offset magnitude");
  sp->add_option("--sigma", pc.noise_sigma, "pixel noise sigma");
  sp->add_option("--tone-jitter", pc.tone_jitter, "monotone tone jitter strength");

  auto* ag = app.add_subcommand("aggregate", "fuse candidates into the texture field");
  add_common(ag, c);
  std::string ag_mode = "full";
  ag->add_option("--mode", ag_mode, "full | parametric | per-texel | per-object");

  auto* fl = app.add_subcommand("fit-light", "detect emitters and fit emission (stage 1)");
  add_common(fl, c);

  auto* cs = app.add_subcommand("cache-shading", "precompute shading maps (stage 2)");
  add_common(cs, c);

  auto* fb = app.add_subcommand("fit-brdf", "fit per-object parameters and CRF (stage 3)");
  add_common(fb, c);

  auto* rl = app.add_subcommand("relight", "re-render with fitted materials and lights");
  add_common(rl, c);
  std::vector<double> rl_sphere;
  rl->add_option("--add-sphere", rl_sphere, "x y z radius radiance: insert an emissive sphere")
      ->expected(5);

  auto* ev = app.add_subcommand("eval", "metric report against ground truth");
  add_common(ev, c);

  auto* pl = app.add_subcommand(
      "pipeline", "simulate-preds -> aggregate -> fit-light -> cache-shading -> fit-brdf -> eval");
  add_common(pl, c);
  int pl_k = -1;
  pl->add_option("--k", pl_k, "candidates per view (default: fusion.k)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    c.finalize();
    if (mk->parsed()) {
      stage_make_scene(c, mk_views, mk_size, mk_light, mk_spp, mk_ldr);
    } else if (rd->parsed()) {
      stage_render(c);
    } else if (sp->parsed()) {
      pc.albedo_offset_lo = -pc.albedo_offset_hi;
      stage_simulate_preds(c, sp_k > 0 ? sp_k : c.cfg.fusion_k, pc);
    } else if (ag->parsed()) {
      stage_aggregate(c, ag_mode);
    } else if (fl->parsed()) {
      stage_fit_light(c);
    } else if (cs->parsed()) {
      stage_cache_shading(c);
    } else if (fb->parsed()) {
      stage_fit_brdf(c);
    } else if (rl->parsed()) {
      stage_relight(c, rl_sphere);
    } else if (ev->parsed()) {
      stage_eval(c);
    } else if (pl->parsed()) {
      PerturbConfig ppc;
      stage_simulate_preds(c, pl_k > 0 ? pl_k : c.cfg.fusion_k, ppc);
      stage_aggregate(c, "full");
      stage_fit_light(c);
      stage_cache_shading(c);
      stage_fit_brdf(c);
      stage_eval(c);
    }
  } catch (const CLI::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    if (msg.find("non-finite") != std::string::npos || msg.find("NaN") != std::string::npos)
      return kExitNumeric;
    return kExitData;
  }
  return kExitOk;
}
