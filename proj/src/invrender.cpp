#include "iif/invrender.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "iif/optim.hpp"
#include "iif/rng.hpp"

namespace iif {

void CrfModel::validate() const {
  for (int c = 0; c < 3; ++c) {
    if (!std::isfinite(log_exposure[c])) throw std::runtime_error("crf: non-finite exposure");
    if (!(gamma[c] >= 1.0 && gamma[c] <= 4.0))
      throw std::runtime_error("crf: gamma must lie in [1,4]");
  }
}

Vec3 crf_apply(const CrfModel& crf, const Vec3& linear) {
  Vec3 out;
  for (int c = 0; c < 3; ++c) {
    const double v = std::exp(crf.log_exposure[c]) * std::max(linear[c], 0.0);
    out[c] = clamp01(std::pow(v, 1.0 / crf.gamma[c]));
  }
  return out;
}

Vec3 crf_invert(const CrfModel& crf, const Vec3& ldr) {
  Vec3 out;
  for (int c = 0; c < 3; ++c)
    out[c] = std::pow(clamp01(ldr[c]), crf.gamma[c]) / std::exp(crf.log_exposure[c]);
  return out;
}

bool crf_saturated(const Vec3& ldr) {
  return ldr.x >= 1.0 - 1e-6 || ldr.y >= 1.0 - 1e-6 || ldr.z >= 1.0 - 1e-6;
}

void save_crf(const CrfModel& crf, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("crf: cannot write " + path.string());
  out.precision(17);
  out << "log_exposure " << crf.log_exposure.x << " " << crf.log_exposure.y << " "
      << crf.log_exposure.z << "\n";
  out << "gamma " << crf.gamma.x << " " << crf.gamma.y << " " << crf.gamma.z << "\n";
}

CrfModel load_crf(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("crf: cannot read " + path.string());
  CrfModel crf;
  std::string key;
  in >> key >> crf.log_exposure.x >> crf.log_exposure.y >> crf.log_exposure.z;
  if (key != "log_exposure") throw std::runtime_error("crf: malformed file " + path.string());
  in >> key >> crf.gamma.x >> crf.gamma.y >> crf.gamma.z;
  if (!in || key != "gamma") throw std::runtime_error("crf: malformed file " + path.string());
  crf.validate();
  return crf;
}

namespace {

// Interpolated quantile; selection is value >= quantile (ties included), which
// keeps equal-radiance emitter triangles together.
double quantile_threshold(std::vector<double> values, double t) {
  std::sort(values.begin(), values.end());
  const double pos = t * double(values.size() - 1);
  const size_t lo = size_t(pos);
  const size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - double(lo);
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

int env_texel_of(const Vec3& dir) {
  const double theta = std::acos(std::clamp(dir.y, -1.0, 1.0));
  double phi = std::atan2(dir.z, dir.x);
  if (phi < 0) phi += 2.0 * M_PI;
  const int row = std::min(int(theta / M_PI * kEnvHeight), kEnvHeight - 1);
  const int col = std::min(int(phi / (2.0 * M_PI) * kEnvWidth), kEnvWidth - 1);
  return row * kEnvWidth + col;
}

}  // namespace

EmitterCandidates detect_emitters(const std::vector<ImageF>& views_linear,
                                  const std::vector<GBuffer>& gbuffers,
                                  const std::vector<Camera>& cameras, double quantile_tri,
                                  double quantile_env, bool with_env) {
  if (views_linear.size() != gbuffers.size() || views_linear.size() != cameras.size())
    throw std::runtime_error("invrender: views, gbuffers and cameras must align");

  std::vector<double> tri_sum, env_sum(kEnvWidth * kEnvHeight, 0.0);
  std::vector<int> tri_count, env_count(kEnvWidth * kEnvHeight, 0);
  size_t hits = 0;
  for (size_t v = 0; v < views_linear.size(); ++v) {
    const GBuffer& gb = gbuffers[v];
    const ImageF& im = views_linear[v];
    for (int y = 0; y < gb.height; ++y)
      for (int x = 0; x < gb.width; ++x) {
        const size_t i = gb.index(x, y);
        if (gb.hit_mask[i]) {
          const int tri = gb.tri[i];
          if (tri >= int(tri_sum.size())) {
            tri_sum.resize(tri + 1, 0.0);
            tri_count.resize(tri + 1, 0);
          }
          tri_sum[tri] += luminance(im.rgb(x, y));
          tri_count[tri] += 1;
          ++hits;
        } else if (with_env) {
          const int t = env_texel_of(cameras[v].primary_ray(x + 0.5, y + 0.5).dir);
          env_sum[t] += luminance(im.rgb(x, y));
          env_count[t] += 1;
        }
      }
  }
  if (hits == 0) throw std::runtime_error("invrender: no view observes any geometry");

  EmitterCandidates out;
  std::vector<double> means;
  std::vector<int> ids;
  for (size_t t = 0; t < tri_sum.size(); ++t)
    if (tri_count[t] > 0) {
      ids.push_back(int(t));
      means.push_back(tri_sum[t] / tri_count[t]);
    }
  const double thr = quantile_threshold(means, quantile_tri);
  for (size_t j = 0; j < ids.size(); ++j)
    if (means[j] >= thr - 1e-12) out.triangles.push_back(ids[j]);

  if (with_env) {
    std::vector<double> emeans;
    std::vector<int> eids;
    for (int t = 0; t < kEnvWidth * kEnvHeight; ++t)
      if (env_count[t] > 0) {
        eids.push_back(t);
        emeans.push_back(env_sum[t] / env_count[t]);
      }
    if (!emeans.empty()) {
      const double ethr = quantile_threshold(emeans, quantile_env);
      for (size_t j = 0; j < eids.size(); ++j)
        if (emeans[j] >= ethr - 1e-12) out.env_texels.push_back(eids[j]);
    }
  }
  return out;
}

namespace {

// Sparse single-bounce transport row of one pixel: L(p) is linear in the
// candidate emissions, L(p) = sum_j weight_j * E_{cand_j} (+ the pixel's own
// triangle emission with weight 1 when it is a candidate).
struct PixelRow {
  Vec3 observed;
  std::vector<std::pair<int, double>> weights;  // candidate index -> scalar weight
};

}  // namespace

EmissionFitResult fit_emission(const Bvh& bvh, const MaterialSource& frozen_brdf,
                               const std::vector<ImageF>& views_linear,
                               const std::vector<Camera>& cameras,
                               const std::vector<GBuffer>& gbuffers,
                               const EmitterCandidates& candidates, const PipelineConfig& cfg,
                               uint64_t seed, const std::vector<PixelMask>* sat_masks) {
  const Mesh& mesh = bvh.mesh();
  const size_t n_tri_cand = candidates.triangles.size();
  const size_t n_cand = n_tri_cand + candidates.env_texels.size();
  if (n_cand == 0) throw std::runtime_error("no emitters");

  std::vector<int> cand_of_tri(mesh.triangles.size(), -1);
  for (size_t j = 0; j < candidates.triangles.size(); ++j)
    cand_of_tri[candidates.triangles[j]] = int(j);
  std::vector<int> cand_of_texel(kEnvWidth * kEnvHeight, -1);
  for (size_t j = 0; j < candidates.env_texels.size(); ++j)
    cand_of_texel[candidates.env_texels[j]] = int(j + n_tri_cand);

  // Area-uniform sampling over candidate triangles for next-event estimation.
  std::vector<double> cand_area_cdf(n_tri_cand);
  double cand_area = 0;
  for (size_t j = 0; j < n_tri_cand; ++j) {
    cand_area += mesh.triangle_area(candidates.triangles[j]);
    cand_area_cdf[j] = cand_area;
  }

  const double eps = bvh.ray_epsilon();
  const int spp = std::max(1, cfg.light_spp);

  // Precompute the transport rows once; the optimization is then a linear
  // least-squares problem solved by projected SGD per the stage-1 schedule.
  std::vector<PixelRow> rows;
  for (size_t v = 0; v < views_linear.size(); ++v) {
    const GBuffer& gb = gbuffers[v];
    const ImageF& im = views_linear[v];
    for (int y = 0; y < gb.height; ++y)
      for (int x = 0; x < gb.width; ++x) {
        const size_t i = gb.index(x, y);
        if (sat_masks && !(*sat_masks)[v].empty() && (*sat_masks)[v][i]) continue;
        PixelRow row;
        row.observed = im.rgb(x, y);
        if (!gb.hit_mask[i]) {
          const int cj =
              cand_of_texel[env_texel_of(cameras[v].primary_ray(x + 0.5, y + 0.5).dir)];
          if (cj < 0) continue;  // background texel not under optimization
          row.weights.push_back({cj, 1.0});
          rows.push_back(std::move(row));
          continue;
        }
        Hit hit;
        hit.tri = gb.tri[i];
        hit.position = gb.position[i];
        hit.normal = gb.normal[i];
        hit.object_id = gb.object_id[i];
        const SurfaceMaterial mat = frozen_brdf(hit);
        const Vec3 wo = normalize(cameras[v].position - hit.position);

        std::vector<double> w(n_cand, 0.0);
        if (cand_of_tri[hit.tri] >= 0) w[cand_of_tri[hit.tri]] += 1.0;  // direct emission

        Rng rng(seed, 0xe317u, uint64_t(v), uint64_t(i));
        for (int s = 0; s < spp; ++s) {
          if (n_tri_cand > 0) {
            const double pick = rng.next_double() * cand_area;
            const size_t j = std::min(
                size_t(std::lower_bound(cand_area_cdf.begin(), cand_area_cdf.end(), pick) -
                       cand_area_cdf.begin()),
                n_tri_cand - 1);
            const int tri = candidates.triangles[j];
            const double su = std::sqrt(rng.next_double());
            const double b2 = su * rng.next_double();
            const Vec3 yp = mesh.point_on(tri, 1.0 - su, b2);
            const Vec3 d = yp - hit.position;
            const double dist2 = dot(d, d);
            if (dist2 > 0) {
              const double dist = std::sqrt(dist2);
              const Vec3 wi = d / dist;
              const double cos_x = dot(hit.normal, wi);
              const Triangle& tr = mesh.triangles[tri];
              const Vec3 ln = normalize(cross(mesh.vertices[tr.v[1]] - mesh.vertices[tr.v[0]],
                                              mesh.vertices[tr.v[2]] - mesh.vertices[tr.v[0]]));
              const double cos_y = std::abs(dot(ln, wi));
              if (cos_x > 0 && cos_y > 0 && dist > 3 * eps) {
                const Ray shadow{hit.position + hit.normal * eps, wi, dist - 2 * eps};
                if (!bvh.occluded(shadow)) {
                  const double f = luminance(eval_brdf(mat, hit.normal, wi, wo).value);
                  // pdf_area = 1 / cand_area (area-uniform over all candidates)
                  w[j] += f * cos_x * cos_y / dist2 * cand_area / double(spp);
                }
              }
            }
          }
          if (!candidates.env_texels.empty()) {
            const Vec3 dir =
                cosine_sample_hemisphere(hit.normal, rng.next_double(), rng.next_double());
            const Ray esc{hit.position + hit.normal * eps, dir, 1e30};
            if (!bvh.occluded(esc)) {
              const int cj = cand_of_texel[env_texel_of(dir)];
              if (cj >= 0) {
                const double f = luminance(eval_brdf(mat, hit.normal, dir, wo).value);
                w[cj] += f * M_PI / double(spp);  // cosine pdf cancels the cosine
              }
            }
          }
        }
        for (size_t j = 0; j < n_cand; ++j)
          if (w[j] != 0) row.weights.push_back({int(j), w[j]});
        if (!row.weights.empty()) rows.push_back(std::move(row));
      }
  }
  if (rows.empty()) throw std::runtime_error("invrender: no pixel constrains any emitter");

  // rgb emission per candidate
  std::vector<double> E(n_cand * 3, 0.0), g(n_cand * 3, 0.0);
  std::vector<uint8_t> active(n_cand, 1);

  ParamRegistry registry;
  ParamBlock blk;
  blk.name = "emission";
  blk.params = &E;
  blk.grads = &g;
  blk.projection = [](std::vector<double>& p) {
    for (double& v : p) v = std::max(v, 0.0);
  };
  registry.add(std::move(blk));
  SgdOptimizer sgd(registry);

  EmissionFitResult result;
  const int batch = std::min<int>(cfg.light_batch, int(rows.size()));
  const int iters_per_epoch = std::max<size_t>(1, rows.size() / size_t(batch));
  const int total_iters = cfg.light_epochs * iters_per_epoch;

  const auto prune = [&]() {
    double max_lum = 0;
    for (size_t j = 0; j < n_cand; ++j)
      if (active[j]) max_lum = std::max(max_lum, luminance({E[j * 3], E[j * 3 + 1], E[j * 3 + 2]}));
    for (size_t j = 0; j < n_cand; ++j) {
      if (!active[j]) continue;
      const double lum = luminance({E[j * 3], E[j * 3 + 1], E[j * 3 + 2]});
      if (lum <= cfg.light_prune_fraction * max_lum + 1e-300 &&
          (max_lum == 0 || lum < cfg.light_prune_fraction * max_lum)) {
        active[j] = 0;
        E[j * 3] = E[j * 3 + 1] = E[j * 3 + 2] = 0;
        ++result.pruned;
      }
    }
    if (max_lum == 0) {  // nothing carries light at all
      for (size_t j = 0; j < n_cand; ++j)
        if (active[j]) {
          active[j] = 0;
          ++result.pruned;
        }
    }
  };

  bool pruned_once = false;
  for (int iter = 0; iter < total_iters; ++iter) {
    registry.zero_grads();
    Rng rng(seed, 0x6a7cu, uint64_t(iter));
    double loss = 0;
    for (int b = 0; b < batch; ++b) {
      const PixelRow& row = rows[rng.next_below(rows.size())];
      Vec3 pred(0);
      for (const auto& [j, wgt] : row.weights)
        pred += Vec3(E[j * 3], E[j * 3 + 1], E[j * 3 + 2]) * wgt;
      const Vec3 r = pred - row.observed;
      loss += dot(r, r);
      for (const auto& [j, wgt] : row.weights) {
        if (!active[j]) continue;
        for (int c = 0; c < 3; ++c) g[j * 3 + c] += 2.0 * r[c] * wgt / double(batch);
      }
    }
    result.loss_history.push_back(loss / batch);
    sgd.step(cfg.light_lr);
    for (size_t j = 0; j < n_cand; ++j)
      if (!active[j]) E[j * 3] = E[j * 3 + 1] = E[j * 3 + 2] = 0;
    if (!pruned_once && iter + 1 >= cfg.light_prune_after) {
      prune();
      pruned_once = true;
    }
  }
  if (!pruned_once) prune();
  if (std::none_of(active.begin(), active.end(), [](uint8_t a) { return a != 0; }))
    throw std::runtime_error("no emitters");

  result.emitters.emission.assign(mesh.triangles.size(), Vec3(0));
  for (size_t j = 0; j < n_tri_cand; ++j)
    if (active[j])
      result.emitters.emission[candidates.triangles[j]] = {E[j * 3], E[j * 3 + 1], E[j * 3 + 2]};
  if (!candidates.env_texels.empty()) {
    result.emitters.env = ImageF(kEnvWidth, kEnvHeight, 3);
    for (size_t j = 0; j < candidates.env_texels.size(); ++j) {
      const size_t cj = n_tri_cand + j;
      if (!active[cj]) continue;
      const int t = candidates.env_texels[j];
      result.emitters.env.set_rgb(t % kEnvWidth, t / kEnvWidth,
                                  {E[cj * 3], E[cj * 3 + 1], E[cj * 3 + 2]});
    }
  }
  return result;
}

ObjectParams::ObjectParams(int objects_) : objects(objects_) {
  t_albedo.assign(size_t(objects) * 12, 0.0);
  for (int o = 0; o < objects; ++o)
    for (int r = 0; r < 3; ++r) t_albedo[size_t(o) * 12 + r * 4 + r] = 1.0;
  t_rough.assign(size_t(objects) * 2, 0.0);
  t_metal.assign(size_t(objects) * 2, 0.0);
  for (int o = 0; o < objects; ++o) {
    t_rough[size_t(o) * 2] = 1.0;
    t_metal[size_t(o) * 2] = 1.0;
  }
}

MaterialSample ObjectParams::apply(int object, const FieldOutput& mu) const {
  const double* ta = &t_albedo[size_t(object) * 12];
  MaterialSample m;
  for (int r = 0; r < 3; ++r)
    m.albedo[r] =
        ta[r * 4] * mu.mu[0] + ta[r * 4 + 1] * mu.mu[1] + ta[r * 4 + 2] * mu.mu[2] + ta[r * 4 + 3];
  m.rough = t_rough[size_t(object) * 2] * mu.mu[3] + t_rough[size_t(object) * 2 + 1];
  m.metal = t_metal[size_t(object) * 2] * mu.mu[4] + t_metal[size_t(object) * 2 + 1];
  return m;
}

void save_object_params(const ObjectParams& p, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("invrender: cannot write " + path.string());
  out.precision(17);
  out << "objects " << p.objects << "\n";
  for (int o = 0; o < p.objects; ++o) {
    for (int j = 0; j < 12; ++j) out << p.t_albedo[size_t(o) * 12 + j] << " ";
    out << p.t_rough[size_t(o) * 2] << " " << p.t_rough[size_t(o) * 2 + 1] << " ";
    out << p.t_metal[size_t(o) * 2] << " " << p.t_metal[size_t(o) * 2 + 1] << "\n";
  }
}

ObjectParams load_object_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("invrender: cannot read " + path.string());
  std::string key;
  int o = 0;
  in >> key >> o;
  if (key != "objects" || o < 0) throw std::runtime_error("invrender: malformed " + path.string());
  ObjectParams p(o);
  for (int i = 0; i < o; ++i) {
    for (int j = 0; j < 12; ++j) in >> p.t_albedo[size_t(i) * 12 + j];
    in >> p.t_rough[size_t(i) * 2] >> p.t_rough[size_t(i) * 2 + 1];
    in >> p.t_metal[size_t(i) * 2] >> p.t_metal[size_t(i) * 2 + 1];
  }
  if (!in) throw std::runtime_error("invrender: malformed " + path.string());
  return p;
}

void save_emitters(const EmitterSet& emitters, const std::filesystem::path& txt_path) {
  std::ofstream out(txt_path);
  if (!out) throw std::runtime_error("invrender: cannot write " + txt_path.string());
  out.precision(17);
  out << "triangles " << emitters.emission.size() << "\n";
  for (size_t t = 0; t < emitters.emission.size(); ++t) {
    const Vec3& e = emitters.emission[t];
    if (e.x > 0 || e.y > 0 || e.z > 0)
      out << t << " " << e.x << " " << e.y << " " << e.z << "\n";
  }
}

EmitterSet load_emitters(const std::filesystem::path& txt_path, size_t triangle_count) {
  std::ifstream in(txt_path);
  if (!in) throw std::runtime_error("invrender: cannot read " + txt_path.string());
  std::string key;
  size_t n = 0;
  in >> key >> n;
  if (key != "triangles" || n != triangle_count)
    throw std::runtime_error("invrender: emitter table does not match the mesh");
  EmitterSet set;
  set.emission.assign(triangle_count, Vec3(0));
  size_t t;
  while (in >> t) {
    if (t >= triangle_count) throw std::runtime_error("invrender: emitter triangle out of range");
    in >> set.emission[t].x >> set.emission[t].y >> set.emission[t].z;
  }
  return set;
}

BrdfFitResult fit_object_params(const std::vector<ShadingCache>& caches,
                                const TextureField& field, const std::vector<GBuffer>& gbuffers,
                                const std::vector<ImageF>& views_ldr,
                                const std::vector<Camera>& cameras, const EmitterSet& emitters,
                                const PipelineConfig& cfg, uint64_t seed, bool fit_crf) {
  const size_t V = views_ldr.size();
  if (caches.size() != V || gbuffers.size() != V || cameras.size() != V)
    throw std::runtime_error("invrender: caches, gbuffers, views and cameras must align");

  // Cache per-pixel frozen field means, emission and observations up front.
  struct PixelData {
    int view, x, y, object;
    FieldOutput mu;
    Vec3 emission;
    Vec3 observed;
  };
  std::vector<PixelData> pixels;
  int objects = 0;
  int saturated = 0;
  for (size_t v = 0; v < V; ++v) {
    const GBuffer& gb = gbuffers[v];
    for (int y = 0; y < gb.height; ++y)
      for (int x = 0; x < gb.width; ++x) {
        const size_t i = gb.index(x, y);
        if (!gb.hit_mask[i]) continue;
        objects = std::max(objects, gb.object_id[i] + 1);
        const Vec3 obs = views_ldr[v].rgb(x, y);
        if (crf_saturated(obs)) {
          ++saturated;
          continue;
        }
        PixelData pd;
        pd.view = int(v);
        pd.x = x;
        pd.y = y;
        pd.object = gb.object_id[i];
        pd.mu = field.query(gb.position[i]);
        pd.emission = emitters.emission.empty() ? Vec3(0) : emitters.emission[gb.tri[i]];
        pd.observed = obs;
        pixels.push_back(pd);
      }
  }
  if (pixels.empty()) throw std::runtime_error("invrender: no usable pixels for stage 3");

  BrdfFitResult result;
  result.saturated_masked = saturated;
  result.params = ObjectParams(objects);
  ObjectParams& P = result.params;

  std::vector<double> g_ta(P.t_albedo.size(), 0.0), g_tr(P.t_rough.size(), 0.0),
      g_tm(P.t_metal.size(), 0.0);
  std::vector<double> crf_params(6, 0.0), g_crf(6, 0.0);
  crf_params[3] = crf_params[4] = crf_params[5] = 1.0;  // gamma

  ParamRegistry registry;
  const auto add = [&](const char* name, std::vector<double>& p, std::vector<double>& g) {
    ParamBlock b;
    b.name = name;
    b.params = &p;
    b.grads = &g;
    registry.add(std::move(b));
  };
  add("object.albedo", P.t_albedo, g_ta);
  add("object.rough", P.t_rough, g_tr);
  add("object.metal", P.t_metal, g_tm);
  if (fit_crf) {
    ParamBlock b;
    b.name = "crf";
    b.params = &crf_params;
    b.grads = &g_crf;
    b.lr_scale = cfg.brdf_crf_lr / cfg.brdf_lr;
    b.projection = [](std::vector<double>& p) {
      for (int c = 0; c < 3; ++c) p[3 + c] = std::clamp(p[3 + c], 1.0, 4.0);
    };
    registry.add(std::move(b));
  }
  SgdOptimizer sgd(registry);

  std::vector<size_t> seen(objects, 0);
  for (const PixelData& pd : pixels) seen[pd.object]++;
  for (int o = 0; o < objects; ++o)
    if (seen[o] == 0) result.unobserved_objects.push_back(o);

  const int batch = std::min<int>(cfg.brdf_batch, int(pixels.size()));
  const int iters_per_epoch = std::max<size_t>(1, pixels.size() / size_t(batch));

  for (int epoch = 0; epoch < cfg.brdf_epochs; ++epoch) {
    const double lr = cfg.brdf_lr * std::pow(cfg.brdf_lr_decay, epoch);
    double epoch_loss = 0;
    for (int it = 0; it < iters_per_epoch; ++it) {
      registry.zero_grads();
      Rng rng(seed, 0xb4d9u, uint64_t(epoch) * iters_per_epoch + it);
      double loss = 0;
      for (int b = 0; b < batch; ++b) {
        const PixelData& pd = pixels[rng.next_below(pixels.size())];
        const MaterialSample raw = P.apply(pd.object, pd.mu);

        // clamp into [0,1] for rerender; clamped values carry no gradient
        MaterialSample mat{clamp01(raw.albedo), std::clamp(raw.rough, 0.0, 1.0),
                           std::clamp(raw.metal, 0.0, 1.0)};
        const bool gate_a[3] = {raw.albedo.x == mat.albedo.x, raw.albedo.y == mat.albedo.y,
                                raw.albedo.z == mat.albedo.z};
        const bool gate_r = raw.rough == mat.rough;
        const bool gate_m = raw.metal == mat.metal;

        const PixelShade shade =
            rerender_pixel(caches[pd.view], pd.x, pd.y, mat, pd.emission);

        Vec3 d_a(0), dv(0);
        double d_r = 0, d_m = 0;
        for (int c = 0; c < 3; ++c) {
          const double e = crf_params[c], gam = crf_params[3 + c];
          const double vlin = std::exp(e) * std::max(shade.value[c], 0.0);
          const double ldr = clamp01(std::pow(vlin, 1.0 / gam));
          const double r = ldr - pd.observed[c];
          loss += r * r;
          // clipped output or zero radiance: no gradient through this channel
          if (vlin <= 0 || ldr >= 1.0) continue;
          const double gscale = 2.0 * r / double(batch);
          const double dldr_dv = ldr / (gam * vlin) * std::exp(e);  // wrt linear value
          dv[c] = gscale * dldr_dv;
          if (fit_crf) {
            g_crf[c] += gscale * ldr / gam;                                 // d/d e
            g_crf[3 + c] += gscale * (-ldr * std::log(vlin) / (gam * gam));  // d/d gamma
          }
        }
        for (int c = 0; c < 3; ++c) {
          if (gate_a[c]) d_a[c] += dv[c] * shade.d_albedo[c];
          d_r += dv[c] * shade.d_rough[c];
          d_m += dv[c] * shade.d_metal[c];
        }
        if (!gate_r) d_r = 0;
        if (!gate_m) d_m = 0;

        // regularizers on the transformed scalars
        loss += cfg.brdf_w_rough * mat.rough * mat.rough +
                cfg.brdf_w_metal * mat.metal * mat.metal;
        if (gate_r) d_r += 2.0 * cfg.brdf_w_rough * mat.rough / double(batch);
        if (gate_m) d_m += 2.0 * cfg.brdf_w_metal * mat.metal / double(batch);

        double* ta = &g_ta[size_t(pd.object) * 12];
        for (int r = 0; r < 3; ++r) {
          if (d_a[r] == 0) continue;
          ta[r * 4 + 0] += d_a[r] * pd.mu.mu[0];
          ta[r * 4 + 1] += d_a[r] * pd.mu.mu[1];
          ta[r * 4 + 2] += d_a[r] * pd.mu.mu[2];
          ta[r * 4 + 3] += d_a[r];
        }
        g_tr[size_t(pd.object) * 2 + 0] += d_r * pd.mu.mu[3];
        g_tr[size_t(pd.object) * 2 + 1] += d_r;
        g_tm[size_t(pd.object) * 2 + 0] += d_m * pd.mu.mu[4];
        g_tm[size_t(pd.object) * 2 + 1] += d_m;
      }
      epoch_loss += loss / batch;
      sgd.step(lr);
    }
    result.loss_history.push_back(epoch_loss / iters_per_epoch);
  }

  result.crf.log_exposure = {crf_params[0], crf_params[1], crf_params[2]};
  result.crf.gamma = {crf_params[3], crf_params[4], crf_params[5]};
  return result;
}

}  // namespace iif
