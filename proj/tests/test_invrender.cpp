#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "helpers.hpp"
#include "iif/invrender.hpp"
#include "iif/texfield.hpp"

using namespace iif;
using namespace iif::testing;

namespace {

// Floor quad (object 0) with a small downward-facing light quad above it
// (object 1, triangles 2 and 3).
Mesh floor_and_lamp() {
  Mesh mesh;
  mesh.vertices = {{-2, 0, -2}, {2, 0, -2},     {2, 0, 2},     {-2, 0, 2},
                   {-0.5, 2, -0.5}, {0.5, 2, -0.5}, {0.5, 2, 0.5}, {-0.5, 2, 0.5}};
  mesh.triangles = {{{0, 2, 1}, 0}, {{0, 3, 2}, 0}, {{4, 5, 6}, 1}, {{4, 6, 7}, 1}};
  mesh.compute_normals();
  return mesh;
}

FieldConfig small_field_config() {
  FieldConfig cfg;
  cfg.levels = 4;
  cfg.features = 2;
  cfg.hashmap_log2 = 10;
  cfg.base_res = 2;
  cfg.top_res = 16;
  cfg.hidden = 16;
  return cfg;
}

Aabb unit_box() {
  Aabb box;
  box.expand({0, 0, 0});
  box.expand({1, 1, 1});
  return box;
}

// Flat-screen gbuffer: every pixel hits triangle 0 of the given object at a
// distinct position inside the unit box. No geometry involved.
GBuffer synthetic_gbuffer(int w, int h, int object = 0) {
  GBuffer gb;
  gb.width = w;
  gb.height = h;
  const size_t n = size_t(w) * h;
  gb.position.resize(n);
  gb.normal.assign(n, Vec3(0, 0, 1));
  gb.object_id.assign(n, object);
  gb.tri.assign(n, 0);
  gb.hit_mask.assign(n, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      gb.position[gb.index(x, y)] = {(x + 0.5) / w, (y + 0.5) / h, 0.5};
  return gb;
}

// Lighting with a wide dynamic range and near-negligible specular response:
// the tone curve is then identifiable, since only the true gamma matches the
// observation across the whole radiance range.
ShadingCache synthetic_cache(int w, int h) {
  ShadingCache cache;
  cache.width = w;
  cache.height = h;
  cache.dmap = ImageF(w, h, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double t = double(x + y) / double(w + h - 2);
      const double d = 0.05 + 2.95 * t * t;
      cache.dmap.set_rgb(x, y, {d, 0.9 * d, 0.8 * d});
    }
  for (int i = 0; i < 5; ++i) {
    cache.s0[i] = ImageF(w, h, 3);
    cache.s1[i] = ImageF(w, h, 3);
    for (float& f : cache.s0[i].data) f = 0.001f * float(i);
    for (float& f : cache.s1[i].data) f = 0.01f;
  }
  return cache;
}

ImageF observe(const ShadingCache& cache, const TextureField& field, const GBuffer& gb,
               const ObjectParams& gt, const CrfModel& crf) {
  ImageF im(gb.width, gb.height, 3);
  for (int y = 0; y < gb.height; ++y)
    for (int x = 0; x < gb.width; ++x) {
      const FieldOutput mu = field.query(gb.position[gb.index(x, y)]);
      const MaterialSample raw = gt.apply(gb.object_id[gb.index(x, y)], mu);
      const MaterialSample mat{clamp01(raw.albedo), std::clamp(raw.rough, 0.0, 1.0),
                               std::clamp(raw.metal, 0.0, 1.0)};
      const Vec3 lin = rerender_pixel(cache, x, y, mat, Vec3(0)).value;
      im.set_rgb(x, y, crf_apply(crf, lin));
    }
  return im;
}

}  // namespace

TEST_CASE("crf: apply/invert closed forms") {
  CrfModel identity;
  const Vec3 v{0.1, 0.5, 0.9};
  const Vec3 out = crf_apply(identity, v);
  CHECK(out.x == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(out.y == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(out.z == doctest::Approx(0.9).epsilon(1e-12));

  CrfModel gamma22;
  gamma22.gamma = {2.2, 2.2, 2.2};
  CHECK(crf_apply(gamma22, {0.5, 0.5, 0.5}).x ==
        doctest::Approx(std::pow(0.5, 1.0 / 2.2)).epsilon(1e-12));

  CrfModel mixed;
  mixed.log_exposure = {0.3, -0.2, 0.0};
  mixed.gamma = {1.8, 2.4, 3.1};
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    const Vec3 lin{0.01 + 0.5 * rng.next_double(), 0.01 + 0.5 * rng.next_double(),
                   0.01 + 0.5 * rng.next_double()};
    const Vec3 back = crf_invert(mixed, crf_apply(mixed, lin));
    for (int c = 0; c < 3; ++c) CHECK(std::abs(back[c] - lin[c]) < 1e-9);
  }

  // values past the clip are flattened to 1 and cannot round trip
  CHECK(crf_apply(identity, {2.0, 2.0, 2.0}).x == 1.0);
}

TEST_CASE("crf: validation and saturation flag") {
  CrfModel ok;
  ok.gamma = {1.0, 2.2, 4.0};
  CHECK_NOTHROW(ok.validate());
  CrfModel low = ok;
  low.gamma.y = 0.5;
  CHECK_THROWS_WITH_AS(low.validate(), doctest::Contains("gamma"), std::runtime_error);
  CrfModel high = ok;
  high.gamma.z = 4.5;
  CHECK_THROWS(high.validate());
  CrfModel inf = ok;
  inf.log_exposure.x = std::numeric_limits<double>::infinity();
  CHECK_THROWS(inf.validate());

  CHECK(crf_saturated({1.0, 0.2, 0.2}));
  CHECK(crf_saturated({0.2, 0.2, 1.0 - 1e-9}));
  CHECK(!crf_saturated({0.99, 0.99, 0.99}));
}

TEST_CASE("crf file round trip") {
  TempDir tmp("crf");
  CrfModel crf;
  crf.log_exposure = {0.123456789012345, -0.5, 0.25};
  crf.gamma = {2.2, 1.0, 3.7};
  save_crf(crf, tmp.path / "crf.txt");
  const CrfModel back = load_crf(tmp.path / "crf.txt");
  for (int c = 0; c < 3; ++c) {
    CHECK(back.log_exposure[c] == crf.log_exposure[c]);
    CHECK(back.gamma[c] == crf.gamma[c]);
  }
  CHECK_THROWS(load_crf(tmp.path / "missing.txt"));
}

TEST_CASE("detect_emitters: bright triangle above the quantile is selected") {
  const Mesh mesh = make_two_boxes();
  const Bvh bvh(mesh);
  const Camera cam = Camera::look_at({1.1, 2.5, 3.0}, {1.1, 0.5, 0.5}, {0, 1, 0}, 0.9, 32, 32);
  const GBuffer gb = make_gbuffer(bvh, cam);

  // most frequently seen triangle becomes the "lamp"
  std::vector<int> count(mesh.triangles.size(), 0);
  for (size_t i = 0; i < gb.hit_mask.size(); ++i)
    if (gb.hit_mask[i]) count[gb.tri[i]]++;
  const int lamp = int(std::max_element(count.begin(), count.end()) - count.begin());
  REQUIRE(count[lamp] > 0);

  ImageF im(32, 32, 3);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const size_t i = gb.index(x, y);
      const double v = gb.hit_mask[i] ? (gb.tri[i] == lamp ? 10.0 : 0.1) : 0.0;
      im.set_rgb(x, y, {v, v, v});
    }

  const EmitterCandidates c = detect_emitters({im}, {gb}, {cam}, 0.99, 0.85, false);
  REQUIRE(c.triangles.size() >= 1);
  CHECK(std::find(c.triangles.begin(), c.triangles.end(), lamp) != c.triangles.end());
  // the 0.99 quantile sits far above the dim triangles
  CHECK(c.triangles.size() <= 2);
  CHECK(c.env_texels.empty());
}

TEST_CASE("detect_emitters: uniform radiance keeps all visible triangles") {
  const Mesh mesh = make_two_boxes();
  const Bvh bvh(mesh);
  const Camera cam = Camera::look_at({1.1, 2.5, 3.0}, {1.1, 0.5, 0.5}, {0, 1, 0}, 0.9, 24, 24);
  const GBuffer gb = make_gbuffer(bvh, cam);
  ImageF im(24, 24, 3);
  for (float& f : im.data) f = 1.0f;

  size_t visible = 0;
  std::vector<uint8_t> seen(mesh.triangles.size(), 0);
  for (size_t i = 0; i < gb.hit_mask.size(); ++i)
    if (gb.hit_mask[i] && !seen[gb.tri[i]]) {
      seen[gb.tri[i]] = 1;
      ++visible;
    }
  const EmitterCandidates c = detect_emitters({im}, {gb}, {cam}, 0.99, 0.85, false);
  CHECK(c.triangles.size() == visible);  // exact ties all pass the threshold
}

TEST_CASE("detect_emitters: bright background feeds env candidates") {
  const Mesh mesh = make_two_boxes();
  const Bvh bvh(mesh);
  const Camera cam = Camera::look_at({1.1, 1.5, 4.0}, {1.1, 0.5, 0.5}, {0, 1, 0}, 1.1, 32, 32);
  const GBuffer gb = make_gbuffer(bvh, cam);
  size_t misses = 0;
  ImageF im(32, 32, 3);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const bool hit = gb.hit_mask[gb.index(x, y)];
      if (!hit) ++misses;
      const double v = hit ? 0.05 : 3.0;
      im.set_rgb(x, y, {v, v, v});
    }
  REQUIRE(misses > 0);
  const EmitterCandidates with = detect_emitters({im}, {gb}, {cam}, 0.99, 0.85, true);
  CHECK(!with.env_texels.empty());
  for (const int t : with.env_texels) {
    CHECK(t >= 0);
    CHECK(t < kEnvWidth * kEnvHeight);
  }
  const EmitterCandidates without = detect_emitters({im}, {gb}, {cam}, 0.99, 0.85, false);
  CHECK(without.env_texels.empty());
}

TEST_CASE("detect_emitters: no visible geometry is an error") {
  const Mesh mesh = make_two_boxes();
  const Bvh bvh(mesh);
  // looking straight away from the boxes
  const Camera cam = Camera::look_at({1.1, 0.5, 10.0}, {1.1, 0.5, 20.0}, {0, 1, 0}, 0.9, 8, 8);
  const GBuffer gb = make_gbuffer(bvh, cam);
  ImageF im(8, 8, 3);
  CHECK_THROWS(detect_emitters({im}, {gb}, {cam}, 0.99, 0.85, false));
}

TEST_CASE("fit_emission recovers the lamp and prunes a spurious candidate") {
  const Mesh mesh = floor_and_lamp();
  const Bvh bvh(mesh);
  EmitterSet gt;
  gt.emission.assign(mesh.triangles.size(), Vec3(0));
  gt.emission[2] = gt.emission[3] = Vec3(4.0, 4.0, 4.0);

  const MaterialSource mats =
      constant_materials({MaterialSample{{0.6, 0.6, 0.6}, 0.6, 0.0},
                          MaterialSample{{0.6, 0.6, 0.6}, 0.6, 0.0}});
  const std::vector<Camera> cams{
      Camera::look_at({0, 1.2, 3.5}, {0, 0.6, 0}, {0, 1, 0}, 0.9, 32, 32),
      Camera::look_at({3.0, 1.5, 0.5}, {0, 0.6, 0}, {0, 1, 0}, 0.9, 32, 32)};
  std::vector<ImageF> views;
  std::vector<GBuffer> gbs;
  for (const Camera& cam : cams) {
    // single bounce matches the transport model used by the fit
    views.push_back(path_trace(bvh, gt, mats, cam, 256, 1, 7));
    gbs.push_back(make_gbuffer(bvh, cam));
  }

  EmitterCandidates cand;
  cand.triangles = {0, 2, 3};  // floor triangle 0 is spurious
  PipelineConfig cfg;
  cfg.light_spp = 64;
  cfg.light_batch = 1024;
  cfg.light_epochs = 200;
  cfg.light_lr = 20.0;
  cfg.light_prune_after = 1 << 30;  // prune once, at the end

  const EmissionFitResult fit =
      fit_emission(bvh, mats, views, cams, gbs, cand, cfg, 13);
  CHECK(fit.pruned >= 1);
  CHECK(fit.emitters.emission[0].x == 0.0);  // spurious candidate zeroed
  for (const int t : {2, 3})
    for (int c = 0; c < 3; ++c)
      CHECK(fit.emitters.emission[t][c] == doctest::Approx(4.0).epsilon(0.05));
  REQUIRE(!fit.loss_history.empty());
  CHECK(fit.loss_history.back() < fit.loss_history.front());
}

TEST_CASE("fit_emission: black observations leave no emitters") {
  const Mesh mesh = floor_and_lamp();
  const Bvh bvh(mesh);
  const MaterialSource mats =
      constant_materials({MaterialSample{{0.6, 0.6, 0.6}, 0.6, 0.0},
                          MaterialSample{{0.6, 0.6, 0.6}, 0.6, 0.0}});
  const Camera cam = Camera::look_at({0, 1.2, 3.5}, {0, 0.6, 0}, {0, 1, 0}, 0.9, 16, 16);
  const std::vector<ImageF> views{ImageF(16, 16, 3)};  // all zero
  const std::vector<GBuffer> gbs{make_gbuffer(bvh, cam)};
  EmitterCandidates cand;
  cand.triangles = {2, 3};
  PipelineConfig cfg;
  cfg.light_spp = 8;
  cfg.light_epochs = 4;
  cfg.light_batch = 128;
  CHECK_THROWS_WITH_AS(fit_emission(bvh, mats, views, {cam}, gbs, cand, cfg, 3),
                       doctest::Contains("no emitters"), std::runtime_error);

  EmitterCandidates none;
  CHECK_THROWS_WITH_AS(fit_emission(bvh, mats, views, {cam}, gbs, none, cfg, 3),
                       doctest::Contains("no emitters"), std::runtime_error);
}

TEST_CASE("object params: identity construction and affine apply") {
  const ObjectParams p(3);
  FieldOutput mu;
  mu.mu = {0.2, 0.4, 0.6, 0.3, 0.7};
  for (int o = 0; o < 3; ++o) {
    const MaterialSample m = p.apply(o, mu);
    CHECK(m.albedo.x == doctest::Approx(0.2));
    CHECK(m.albedo.y == doctest::Approx(0.4));
    CHECK(m.albedo.z == doctest::Approx(0.6));
    CHECK(m.rough == doctest::Approx(0.3));
    CHECK(m.metal == doctest::Approx(0.7));
  }

  ObjectParams q(1);
  // row 0 mixes all channels plus an offset
  q.t_albedo = {0.5, 0.25, 0.1, 0.05, /**/ 0, 1, 0, 0, /**/ 0, 0, 1, 0};
  q.t_rough = {2.0, -0.1};
  q.t_metal = {0.5, 0.2};
  const MaterialSample m = q.apply(0, mu);
  CHECK(m.albedo.x == doctest::Approx(0.5 * 0.2 + 0.25 * 0.4 + 0.1 * 0.6 + 0.05));
  CHECK(m.albedo.y == doctest::Approx(0.4));
  CHECK(m.rough == doctest::Approx(2.0 * 0.3 - 0.1));
  CHECK(m.metal == doctest::Approx(0.5 * 0.7 + 0.2));
}

TEST_CASE("object params and emitters round trip through disk") {
  TempDir tmp("invrender_io");
  ObjectParams p(2);
  Rng rng(5);
  for (double& v : p.t_albedo) v = rng.next_double() * 2 - 1;
  for (double& v : p.t_rough) v = rng.next_double() * 2 - 1;
  for (double& v : p.t_metal) v = rng.next_double() * 2 - 1;
  save_object_params(p, tmp.path / "objects.txt");
  const ObjectParams back = load_object_params(tmp.path / "objects.txt");
  REQUIRE(back.objects == 2);
  for (size_t i = 0; i < p.t_albedo.size(); ++i) CHECK(back.t_albedo[i] == p.t_albedo[i]);
  for (size_t i = 0; i < p.t_rough.size(); ++i) CHECK(back.t_rough[i] == p.t_rough[i]);
  for (size_t i = 0; i < p.t_metal.size(); ++i) CHECK(back.t_metal[i] == p.t_metal[i]);

  EmitterSet set;
  set.emission.assign(6, Vec3(0));
  set.emission[4] = {1.25, 2.5, 0.125};
  save_emitters(set, tmp.path / "emitters.txt");
  const EmitterSet eback = load_emitters(tmp.path / "emitters.txt", 6);
  for (size_t t = 0; t < 6; ++t)
    for (int c = 0; c < 3; ++c) CHECK(eback.emission[t][c] == set.emission[t][c]);
  CHECK_THROWS(load_emitters(tmp.path / "emitters.txt", 7));  // wrong mesh
}

TEST_CASE("fit_object_params recovers an albedo scale and the gamma curve") {
  const int w = 16, h = 16;
  const ShadingCache cache = synthetic_cache(w, h);
  const TextureField field(small_field_config(), unit_box(), 31);
  const GBuffer gb = synthetic_gbuffer(w, h);

  ObjectParams gt(1);
  for (int r = 0; r < 3; ++r) gt.t_albedo[r * 4 + r] = 0.8;
  CrfModel gt_crf;
  gt_crf.gamma = {2.2, 2.2, 2.2};

  EmitterSet emitters;
  emitters.emission.assign(1, Vec3(0));
  const ImageF obs = observe(cache, field, gb, gt, gt_crf);
  for (const float v : obs.data) REQUIRE(v < 1.0f);  // nothing saturates

  PipelineConfig cfg;
  cfg.brdf_batch = w * h;
  cfg.brdf_epochs = 4000;
  cfg.brdf_lr = 2.0;
  cfg.brdf_lr_decay = 0.99885;  // ~1% of the initial rate by the last epoch
  cfg.brdf_crf_lr = 5.0;
  cfg.brdf_w_rough = 0;
  cfg.brdf_w_metal = 0;

  const BrdfFitResult fit = fit_object_params({cache}, field, {gb}, {obs}, {Camera{}},
                                              emitters, cfg, 17);
  CHECK(fit.unobserved_objects.empty());
  CHECK(fit.saturated_masked == 0);
  REQUIRE(!fit.loss_history.empty());
  CHECK(fit.loss_history.back() < fit.loss_history.front());
  CHECK(fit.loss_history.back() < 1e-4);
  for (int c = 0; c < 3; ++c) CHECK(std::abs(fit.crf.gamma[c] - 2.2) < 0.1);

  // the fitted model reproduces the observations
  const ImageF re = observe(cache, field, gb, fit.params, fit.crf);
  double err = 0;
  for (size_t i = 0; i < re.data.size(); ++i) err += std::abs(re.data[i] - obs.data[i]);
  CHECK(err / double(re.data.size()) < 5e-3);
}

TEST_CASE("fit_object_params: saturation mask and unobserved objects reported") {
  const int w = 8, h = 8;
  const ShadingCache cache = synthetic_cache(w, h);
  const TextureField field(small_field_config(), unit_box(), 9);
  GBuffer gb = synthetic_gbuffer(w, h, 0);
  // a corner patch belongs to object 2; object 1 never appears
  gb.object_id[gb.index(0, 0)] = 2;
  gb.object_id[gb.index(1, 0)] = 2;

  ImageF obs = observe(cache, field, gb, ObjectParams(3), CrfModel{});
  obs.set_rgb(3, 3, {1.0, 1.0, 1.0});
  obs.set_rgb(4, 4, {0.5, 1.0, 0.5});  // one clipped channel is enough

  EmitterSet emitters;
  emitters.emission.assign(1, Vec3(0));
  PipelineConfig cfg;
  cfg.brdf_batch = 16;
  cfg.brdf_epochs = 1;
  cfg.brdf_lr = 0.01;

  const BrdfFitResult fit = fit_object_params({cache}, field, {gb}, {obs}, {Camera{}},
                                              emitters, cfg, 21);
  CHECK(fit.saturated_masked == 2);
  REQUIRE(fit.unobserved_objects.size() == 1);
  CHECK(fit.unobserved_objects[0] == 1);
}

TEST_CASE("roughness regularizer pulls the transformed roughness down") {
  const int w = 12, h = 12;
  const ShadingCache cache = synthetic_cache(w, h);
  const TextureField field(small_field_config(), unit_box(), 3);
  const GBuffer gb = synthetic_gbuffer(w, h);
  const ImageF obs = observe(cache, field, gb, ObjectParams(1), CrfModel{});
  EmitterSet emitters;
  emitters.emission.assign(1, Vec3(0));

  const auto fitted_rough = [&](double w_rough) {
    PipelineConfig cfg;
    cfg.brdf_batch = w * h;
    cfg.brdf_epochs = 100;
    cfg.brdf_lr = 1.0;
    cfg.brdf_lr_decay = 1.0;
    cfg.brdf_w_rough = w_rough;
    cfg.brdf_w_metal = 0;
    const BrdfFitResult fit = fit_object_params({cache}, field, {gb}, {obs}, {Camera{}},
                                                emitters, cfg, 29, /*fit_crf=*/false);
    const FieldOutput mu = field.query(gb.position[gb.index(w / 2, h / 2)]);
    return fit.params.t_rough[0] * mu.mu[3] + fit.params.t_rough[1];
  };

  const double free_rough = fitted_rough(0.0);
  const double reg_rough = fitted_rough(0.5);
  CHECK(reg_rough < free_rough - 1e-4);
}
