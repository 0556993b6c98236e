#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "iif/fusion.hpp"
#include "iif/scenegen.hpp"

using namespace iif;
using namespace iif::testing;

namespace {

FieldConfig tiny_field() {
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

// K candidates with fixed values at one pixel of one (view=0, object=0).
PixelBatch one_pixel_batch(const std::vector<Vec3>& albedo, const std::vector<double>& rough,
                           const std::vector<double>& metal) {
  PixelSample px;
  px.view = 0;
  px.object = 0;
  px.position = {0.4, 0.6, 0.3};
  px.cand_albedo = albedo;
  px.cand_rough = rough;
  px.cand_metal = metal;
  return {px};
}

PixelBatch random_batch(int n, int k, uint64_t seed, int views = 1, int objects = 1) {
  Rng rng(seed);
  PixelBatch batch(n);
  for (auto& px : batch) {
    px.view = int(rng.next_below(views));
    px.object = int(rng.next_below(objects));
    px.position = {rng.next_double(), rng.next_double(), rng.next_double()};
    for (int kk = 0; kk < k; ++kk) {
      px.cand_albedo.push_back({rng.next_double(), rng.next_double(), rng.next_double()});
      px.cand_rough.push_back(rng.next_double());
      px.cand_metal.push_back(rng.next_double());
    }
  }
  return batch;
}

void zero_all_grads(TextureField& field, FusionParams& params) {
  for (auto* g : field.all_grad_blocks()) std::fill(g->begin(), g->end(), 0.0);
  for (auto* g : {&params.g_t_albedo, &params.g_t_rough, &params.g_t_metal, &params.g_z_albedo,
                  &params.g_z_rough, &params.g_z_metal})
    std::fill(g->begin(), g->end(), 0.0);
}

double kl_numeric(double mu1, double b1, double mu2, double b2) {
  // Simpson integration split at both density kinks.
  const auto logp = [](double x, double mu, double b) {
    return -std::abs(x - mu) / b - std::log(2.0 * b);
  };
  const double lo = std::min(mu1, mu2) - 60.0 * std::max(b1, b2);
  const double hi = std::max(mu1, mu2) + 60.0 * std::max(b1, b2);
  std::vector<double> knots{lo, std::min(mu1, mu2), std::max(mu1, mu2), hi};
  double total = 0;
  for (int seg = 0; seg < 3; ++seg) {
    const double a = knots[seg], b = knots[seg + 1];
    if (b - a < 1e-300) continue;
    const int n = 20000;  // even
    const double h = (b - a) / n;
    double s = 0;
    for (int i = 0; i <= n; ++i) {
      const double x = a + i * h;
      const double p1 = std::exp(logp(x, mu1, b1));
      const double f = p1 * (logp(x, mu1, b1) - logp(x, mu2, b2));
      const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
      s += w * f;
    }
    total += s * h / 3.0;
  }
  return total;
}

}  // namespace

TEST_CASE("affine transforms: identity, scalar arithmetic, inverse round trip") {
  FusionParams params(1, 1, 1);
  const Vec3 a{0.2, 0.5, 0.9};
  const Vec3 same = apply_affine_albedo(params.albedo_t(0, 0, 0), a);
  CHECK(length(same - a) < 1e-15);

  const double tr[2] = {2.0, 0.1};
  CHECK(apply_affine_scalar(tr, 0.3) == doctest::Approx(0.7));

  // random invertible T, composed with its explicit inverse
  std::mt19937 gen(3);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  double t[12] = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
  for (int i = 0; i < 12; ++i) t[i] += u(gen);
  // invert the 3x3 block by cofactors
  const double m[9] = {t[0], t[1], t[2], t[4], t[5], t[6], t[8], t[9], t[10]};
  const double det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
                     m[2] * (m[3] * m[7] - m[4] * m[6]);
  REQUIRE(std::abs(det) > 1e-3);
  const double inv[9] = {(m[4] * m[8] - m[5] * m[7]) / det, (m[2] * m[7] - m[1] * m[8]) / det,
                         (m[1] * m[5] - m[2] * m[4]) / det, (m[5] * m[6] - m[3] * m[8]) / det,
                         (m[0] * m[8] - m[2] * m[6]) / det, (m[2] * m[3] - m[0] * m[5]) / det,
                         (m[3] * m[7] - m[4] * m[6]) / det, (m[1] * m[6] - m[0] * m[7]) / det,
                         (m[0] * m[4] - m[1] * m[3]) / det};
  const Vec3 c{t[3], t[7], t[11]};
  double tinv[12];
  for (int r = 0; r < 3; ++r) {
    for (int j = 0; j < 3; ++j) tinv[r * 4 + j] = inv[r * 3 + j];
    tinv[r * 4 + 3] = -(inv[r * 3 + 0] * c.x + inv[r * 3 + 1] * c.y + inv[r * 3 + 2] * c.z);
  }
  const Vec3 round = apply_affine_albedo(tinv, apply_affine_albedo(t, a));
  CHECK(length(round - a) < 1e-6);
}

TEST_CASE("mixture weights: uniform, arithmetic, sharp limit, bad tau") {
  {
    const std::vector<double> z(4, 1.3);
    const auto a = mixture_weights(z, 1.0);
    for (const double v : a) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  }
  {
    const std::vector<double> z{std::log(2.0), 0.0};
    const auto a = mixture_weights(z, 1.0);
    CHECK(a[0] == doctest::Approx(2.0 / 3).epsilon(1e-12));
    CHECK(a[1] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  }
  {
    const std::vector<double> z{0.1, 0.3, 0.2};
    const auto a = mixture_weights(z, 1e-6);
    CHECK(std::abs(a[1] - 1.0) < 1e-9);
  }
  CHECK_THROWS(mixture_weights(std::vector<double>{0.0}, 0.0));
  // simplex property on random logits
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> z(6);
    for (double& v : z) v = rng.next_double() * 20 - 10;
    const auto a = mixture_weights(z, 0.5);
    double sum = 0;
    for (const double v : a) {
      CHECK(v > 0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("median: odd, even, and ties") {
  {
    const std::vector<double> v{0.1, 0.2, 0.7};
    CHECK(median_with_subgradient(v).value == doctest::Approx(0.2));
  }
  {
    const std::vector<double> v{0.4, 0.1, 0.2, 0.3};
    CHECK(median_with_subgradient(v).value == doctest::Approx(0.25));
  }
  {
    const std::vector<double> v{0.5, 0.5, 0.5, 0.5};
    const MedianResult r = median_with_subgradient(v);
    CHECK(r.value == doctest::Approx(0.5));
    CHECK(r.w_lo + r.w_hi == doctest::Approx(1.0));
  }
}

TEST_CASE("kl_laplace: closed-form values and positivity") {
  CHECK(kl_laplace(0.3, 0.7, 0.3, 0.7) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(kl_laplace(0, 1, 1, 1) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  CHECK(kl_laplace(0.5, 1, 0.5, 2) == doctest::Approx(std::log(2.0) - 0.5).epsilon(1e-12));
  CHECK_THROWS(kl_laplace(0, 0, 0, 1));
  CHECK_THROWS(kl_laplace(0, 1, 0, -1));
  Rng rng(9);
  for (int i = 0; i < 300; ++i) {
    const double kl = kl_laplace(rng.next_double() * 4 - 2, 0.01 + rng.next_double(),
                                 rng.next_double() * 4 - 2, 0.01 + rng.next_double());
    CHECK(kl >= 0.0);
  }
}

TEST_CASE("kl_laplace matches numeric integration") {
  Rng rng(77);
  for (int i = 0; i < 50; ++i) {
    const double mu1 = rng.next_double() * 2 - 1;
    const double b1 = 0.05 + rng.next_double();
    const double mu2 = rng.next_double() * 2 - 1;
    const double b2 = 0.05 + rng.next_double();
    CHECK(std::abs(kl_laplace(mu1, b1, mu2, b2) - kl_numeric(mu1, b1, mu2, b2)) < 1e-6);
  }
}

TEST_CASE("kl_laplace_grad matches finite differences") {
  Rng rng(13);
  for (int i = 0; i < 30; ++i) {
    double p[4] = {rng.next_double() * 2 - 1, 0.1 + rng.next_double(), rng.next_double() * 2 - 1,
                   0.1 + rng.next_double()};
    const auto f = [&] { return kl_laplace(p[0], p[1], p[2], p[3]); };
    const KlGrad g = kl_laplace_grad(p[0], p[1], p[2], p[3]);
    const double analytic[4] = {g.d_mu1, g.d_b1, g.d_mu2, g.d_b2};
    for (int j = 0; j < 4; ++j) {
      const double fd = central_diff(&p[j], f, 1e-6);
      CHECK(rel_err(analytic[j], fd) < 1e-5);
    }
  }
}

TEST_CASE("reference distribution cases via the data loss") {
  // K identical candidates: b^ref clamps to b_min, so a field matching the
  // candidate exactly (in mean and scale) would reach zero loss; verify the
  // clamp indirectly: loss equals KL((mu, b_min) || field output).
  TextureField field(tiny_field(), unit_box(), 3);
  FusionParams params(1, 1, 3);
  FusionObjective obj(field, params, tiny_field().b_min);
  const Vec3 cand{0.3, 0.6, 0.9};
  const PixelBatch batch = one_pixel_batch({cand, cand, cand}, {0.5, 0.5, 0.5}, {0.2, 0.2, 0.2});
  const double loss = obj.data_loss(batch, false);
  const FieldOutput out = field.query(batch[0].position);
  double expect = kl_laplace(cand.x, 1e-3, out.mu[0], out.b[0]) +
                  kl_laplace(cand.y, 1e-3, out.mu[1], out.b[1]) +
                  kl_laplace(cand.z, 1e-3, out.mu[2], out.b[2]) +
                  kl_laplace(0.5, 1e-3, out.mu[3], out.b[3]) +
                  kl_laplace(0.2, 1e-3, out.mu[4], out.b[4]);
  CHECK(loss == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("data loss increases when the reference moves away from the field mean") {
  TextureField field(tiny_field(), unit_box(), 3);
  FusionParams params(1, 1, 1);
  FusionObjective obj(field, params, tiny_field().b_min);
  const FieldOutput out = field.query(Vec3{0.4, 0.6, 0.3});
  const Vec3 near{out.mu[0], out.mu[1], out.mu[2]};
  const double l0 =
      obj.data_loss(one_pixel_batch({near}, {out.mu[3]}, {out.mu[4]}), false);
  const double l1 = obj.data_loss(
      one_pixel_batch({near + Vec3(0.2, 0, 0)}, {out.mu[3]}, {out.mu[4]}), false);
  CHECK(l1 > l0);
}

TEST_CASE("data loss invariant under batch reordering") {
  TextureField field(tiny_field(), unit_box(), 4);
  FusionParams params(2, 3, 4);
  FusionObjective obj(field, params, tiny_field().b_min);
  PixelBatch batch = random_batch(40, 4, 21, 2, 3);
  const double a = obj.data_loss(batch, false);
  std::reverse(batch.begin(), batch.end());
  const double b = obj.data_loss(batch, false);
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("label loss: one-hot and symmetric cases") {
  TextureField field(tiny_field(), unit_box(), 3);
  FusionParams params(1, 1, 3);
  FusionObjective obj(field, params, tiny_field().b_min);
  const FieldOutput out = field.query(Vec3{0.4, 0.6, 0.3});
  const Vec3 mu{out.mu[0], out.mu[1], out.mu[2]};

  SUBCASE("field equals candidate 1, sharp softmin -> -log alpha_1 per group") {
    obj.tau_err = 1e-9;
    const PixelBatch batch = one_pixel_batch({mu + Vec3(0.3, 0, 0), mu, mu + Vec3(0, 0.4, 0)},
                                             {out.mu[3] + 0.2, out.mu[3], out.mu[3] - 0.2},
                                             {out.mu[4] + 0.1, out.mu[4], out.mu[4] - 0.3});
    // identity logits: alpha uniform over K=3 in every group
    CHECK(obj.label_loss(batch, false) == doctest::Approx(3.0 * std::log(3.0)).epsilon(1e-9));
  }

  SUBCASE("equidistant candidates -> uniform q, loss = mean cross entropy") {
    obj.tau_err = 1.0;
    const PixelBatch batch = one_pixel_batch({mu + Vec3(0.2, 0, 0), mu - Vec3(0.2, 0, 0), mu + Vec3(0, 0, 0.2)},
                                             {out.mu[3] + 0.1, out.mu[3] - 0.1, out.mu[3] + 0.1},
                                             {out.mu[4] + 0.1, out.mu[4] - 0.1, out.mu[4] + 0.1});
    CHECK(obj.label_loss(batch, false) == doctest::Approx(3.0 * std::log(3.0)).epsilon(1e-9));
    // tilt the logits: uniform q means the loss is minimized by uniform alpha
    params.z_albedo[0] = 1.0;
    CHECK(obj.label_loss(batch, false) > 3.0 * std::log(3.0) - 1e-12);
  }
}

TEST_CASE("reg loss: zero at identity, quadratic away, gradient 2(T - I)") {
  TextureField field(tiny_field(), unit_box(), 3);
  FusionParams params(1, 2, 2);
  FusionObjective obj(field, params, tiny_field().b_min);
  CHECK(obj.reg_loss(false) == doctest::Approx(0.0));
  params.t_rough[0] = 2.0;  // slope 2 on one transform
  CHECK(obj.reg_loss(false) == doctest::Approx(1.0));
  zero_all_grads(field, params);
  obj.reg_loss(true);
  CHECK(params.g_t_rough[0] == doctest::Approx(2.0));  // 2 (2 - 1)
  CHECK(params.g_t_rough[1] == doctest::Approx(0.0));
}

TEST_CASE("fusion gradients match finite differences across all parameter kinds") {
  TextureField field(tiny_field(), unit_box(), 31);
  FusionParams params(2, 2, 3);
  FusionObjective obj(field, params, tiny_field().b_min);
  const PixelBatch batch = random_batch(6, 3, 41, 2, 2);

  // The label loss routes gradient only through the logits: its softmin
  // weights are a stop-gradient, so transforms and field parameters must get
  // exactly zero even though the loss value depends on them.
  const auto check_grads = [&](const char* tag, auto&& lossfn, bool through_errors) {
    CAPTURE(tag);
    zero_all_grads(field, params);
    lossfn(true);
    Rng rng(7);
    std::vector<std::pair<std::vector<double>*, std::vector<double>*>> t_blocks = {
        {&params.t_albedo, &params.g_t_albedo},
        {&params.t_rough, &params.g_t_rough},
        {&params.t_metal, &params.g_t_metal}};
    std::vector<std::pair<std::vector<double>*, std::vector<double>*>> z_blocks = {
        {&params.z_albedo, &params.g_z_albedo},
        {&params.z_rough, &params.g_z_rough},
        {&params.z_metal, &params.g_z_metal}};
    const auto fd_check = [&](std::vector<double>* p, std::vector<double>* g) {
      for (int trial = 0; trial < 4; ++trial) {
        const size_t idx = rng.next_below(p->size());
        const double fd = central_diff(&(*p)[idx], [&] { return lossfn(false); }, 1e-6);
        const double an = (*g)[idx];
        if (std::abs(an) < 1e-9 && std::abs(fd) < 1e-6) continue;
        CHECK(rel_err(an, fd) < 1e-3);
      }
    };
    for (auto& [p, g] : z_blocks) fd_check(p, g);
    if (through_errors) {
      for (auto& [p, g] : t_blocks) fd_check(p, g);
      const auto fparams = field.all_param_blocks();
      const auto fgrads = field.all_grad_blocks();
      int checked = 0;
      while (checked < 12) {
        const size_t blk = rng.next_below(fparams.size());
        if (fparams[blk]->empty()) continue;
        const size_t idx = rng.next_below(fparams[blk]->size());
        const double an = (*fgrads[blk])[idx];
        const double fd =
            central_diff(&(*fparams[blk])[idx], [&] { return lossfn(false); }, 1e-6);
        ++checked;
        if (std::abs(an) < 1e-10 && std::abs(fd) < 1e-7) continue;
        // absolute floor: central differences bottom out around 1e-10 here,
        // which swamps the relative error of O(1e-8) gradients
        CHECK((rel_err(an, fd) < 1e-3 || std::abs(an - fd) < 1e-8));
      }
    } else {
      for (auto& [p, g] : t_blocks)
        for (const double v : *g) CHECK(v == 0.0);
      for (const auto* g : field.all_grad_blocks())
        for (const double v : *g) CHECK(v == 0.0);
    }
  };

  // perturb transforms/logits so gradients are generic
  Rng prng(3);
  for (double& t : params.t_albedo) t += 0.05 * (prng.next_double() - 0.5);
  for (double& t : params.t_rough) t += 0.05 * (prng.next_double() - 0.5);
  for (double& t : params.t_metal) t += 0.05 * (prng.next_double() - 0.5);
  for (double& z : params.z_albedo) z += prng.next_double() - 0.5;
  for (double& z : params.z_rough) z += prng.next_double() - 0.5;
  for (double& z : params.z_metal) z += prng.next_double() - 0.5;

  check_grads("data", [&](bool g) { return obj.data_loss(batch, g); }, true);
  check_grads("label", [&](bool g) { return obj.label_loss(batch, g); }, false);
  check_grads("reg", [&](bool g) { return obj.reg_loss(g); }, true);
}

TEST_CASE("run_aggregation: K=1 identity candidates converge to the ground truth maps") {
  // two-box scene, 4 views, last view held out
  const Mesh mesh = make_two_boxes();
  const Bvh bvh(mesh);
  const std::vector<MaterialSample> gt = {{{0.8, 0.3, 0.2}, 0.7, 0.1}, {{0.2, 0.5, 0.9}, 0.3, 0.6}};
  std::vector<Camera> cams;
  for (int v = 0; v < 4; ++v) {
    const double a = v * 1.1;
    cams.push_back(Camera::look_at({1.1 + 2.3 * std::sin(a), 1.6, 2.5 * std::cos(a) + 0.4},
                                   {1.1, 0.5, 0.5}, {0, 1, 0}, 0.9, 48, 48));
  }
  std::vector<GBuffer> gbuffers;
  std::vector<PredictionSet> preds;
  for (int v = 0; v < 3; ++v) {
    gbuffers.push_back(make_gbuffer(bvh, cams[v]));
    const GBuffer& gb = gbuffers.back();
    PredictionSet set;
    set.view_id = v;
    set.k = 1;
    ImageF a(48, 48, 3), r(48, 48, 1), m(48, 48, 1), inst(48, 48, 1);
    for (int i = 0; i < 48 * 48; ++i) {
      const int o = gb.object_id[i];
      inst.data[i] = float(o);
      if (o >= 0) {
        a.data[i * 3 + 0] = float(gt[o].albedo.x);
        a.data[i * 3 + 1] = float(gt[o].albedo.y);
        a.data[i * 3 + 2] = float(gt[o].albedo.z);
        r.data[i] = float(gt[o].rough);
        m.data[i] = float(gt[o].metal);
      }
    }
    set.albedo = {a};
    set.rough = {r};
    set.metal = {m};
    set.instance = inst;
    preds.push_back(std::move(set));
  }

  AggregationInputs in;
  in.gbuffers = &gbuffers;
  in.predictions = &preds;
  in.domain = mesh.bounds();
  in.field_config = tiny_field();
  in.field_config.top_res = 32;
  PipelineConfig cfg;
  cfg.fusion_batch = 1024;
  cfg.fusion_lr = 3e-2;
  cfg.fusion_epochs = 80;
  cfg.fusion_lr_decay_epochs = 40;
  const AggregationResult res = run_aggregation(in, cfg, 3);

  const GBuffer held = make_gbuffer(bvh, cams[3]);
  double err[5] = {0, 0, 0, 0, 0};
  int n = 0;
  for (size_t i = 0; i < held.hit_mask.size(); ++i) {
    if (!held.hit_mask[i]) continue;
    const FieldOutput out = res.field.query(held.position[i]);
    const MaterialSample& g = gt[held.object_id[i]];
    const double target[5] = {g.albedo.x, g.albedo.y, g.albedo.z, g.rough, g.metal};
    for (int c = 0; c < 5; ++c) err[c] += (out.mu[c] - target[c]) * (out.mu[c] - target[c]);
    ++n;
  }
  REQUIRE(n > 0);
  for (int c = 0; c < 5; ++c) CHECK(err[c] / n < 1e-3);
}

TEST_CASE("run_aggregation: identical candidates keep logits near uniform") {
  const Mesh mesh = make_two_boxes();
  const Bvh bvh(mesh);
  const Camera cam = Camera::look_at({3, 2, 3}, {1, 0.5, 0.5}, {0, 1, 0}, 0.9, 24, 24);
  std::vector<GBuffer> gbuffers{make_gbuffer(bvh, cam)};
  PredictionSet set;
  set.view_id = 0;
  set.k = 3;
  const ImageF a = random_image(24, 24, 3, 1);
  const ImageF r = random_image(24, 24, 1, 2);
  const ImageF m = random_image(24, 24, 1, 3);
  ImageF inst(24, 24, 1);
  for (int i = 0; i < 24 * 24; ++i) inst.data[i] = float(gbuffers[0].object_id[i]);
  set.albedo = {a, a, a};
  set.rough = {r, r, r};
  set.metal = {m, m, m};
  set.instance = inst;
  std::vector<PredictionSet> preds{set};

  AggregationInputs in;
  in.gbuffers = &gbuffers;
  in.predictions = &preds;
  in.domain = mesh.bounds();
  in.field_config = tiny_field();
  PipelineConfig cfg;
  cfg.fusion_batch = 256;
  cfg.fusion_epochs = 2;
  const AggregationResult res = run_aggregation(in, cfg, 5);
  for (size_t i = 0; i + 2 < res.params.z_albedo.size(); i += 3) {
    const auto alpha = mixture_weights(std::span(res.params.z_albedo.data() + i, 3), 1.0);
    for (const double v : alpha) CHECK(std::abs(v - 1.0 / 3) < 0.02);
  }
}

TEST_CASE("run_aggregation: huge w_reg pins transforms to identity") {
  const Mesh mesh = make_two_boxes();
  const Bvh bvh(mesh);
  const Camera cam = Camera::look_at({3, 2, 3}, {1, 0.5, 0.5}, {0, 1, 0}, 0.9, 24, 24);
  std::vector<GBuffer> gbuffers{make_gbuffer(bvh, cam)};
  PredictionSet set;
  set.view_id = 0;
  set.k = 2;
  set.albedo = {random_image(24, 24, 3, 4), random_image(24, 24, 3, 5)};
  set.rough = {random_image(24, 24, 1, 6), random_image(24, 24, 1, 7)};
  set.metal = {random_image(24, 24, 1, 8), random_image(24, 24, 1, 9)};
  set.instance = ImageF(24, 24, 1);
  for (int i = 0; i < 24 * 24; ++i) set.instance.data[i] = float(gbuffers[0].object_id[i]);
  std::vector<PredictionSet> preds{set};

  AggregationInputs in;
  in.gbuffers = &gbuffers;
  in.predictions = &preds;
  in.domain = mesh.bounds();
  in.field_config = tiny_field();
  PipelineConfig cfg;
  cfg.fusion_batch = 256;
  cfg.fusion_epochs = 60;
  cfg.fusion_w_reg = 1e8;
  // decay the step size slowly enough that Adam settles onto the pinned
  // optimum instead of freezing one step away from it (the small view yields
  // only ~one iteration per epoch)
  cfg.fusion_lr_decay = 0.5;
  cfg.fusion_lr_decay_epochs = 8;
  const AggregationResult res = run_aggregation(in, cfg, 6);
  FusionParams identity(res.params.views, res.params.objects, res.params.k);
  double dev = 0;
  for (size_t i = 0; i < res.params.t_albedo.size(); ++i)
    dev = std::max(dev, std::abs(res.params.t_albedo[i] - identity.t_albedo[i]));
  for (size_t i = 0; i < res.params.t_rough.size(); ++i)
    dev = std::max(dev, std::abs(res.params.t_rough[i] - identity.t_rough[i]));
  CHECK(dev < 1e-3);
}

TEST_CASE("run_aggregation is deterministic for a fixed seed") {
  const Mesh mesh = make_two_boxes();
  const Bvh bvh(mesh);
  const Camera cam = Camera::look_at({3, 2, 3}, {1, 0.5, 0.5}, {0, 1, 0}, 0.9, 16, 16);
  std::vector<GBuffer> gbuffers{make_gbuffer(bvh, cam)};
  PredictionSet set;
  set.view_id = 0;
  set.k = 2;
  set.albedo = {random_image(16, 16, 3, 4), random_image(16, 16, 3, 5)};
  set.rough = {random_image(16, 16, 1, 6), random_image(16, 16, 1, 7)};
  set.metal = {random_image(16, 16, 1, 8), random_image(16, 16, 1, 9)};
  set.instance = ImageF(16, 16, 1);
  for (int i = 0; i < 16 * 16; ++i) set.instance.data[i] = float(gbuffers[0].object_id[i]);
  std::vector<PredictionSet> preds{set};

  AggregationInputs in;
  in.gbuffers = &gbuffers;
  in.predictions = &preds;
  in.domain = mesh.bounds();
  in.field_config = tiny_field();
  PipelineConfig cfg;
  cfg.fusion_batch = 128;
  cfg.fusion_epochs = 2;
  AggregationResult a = run_aggregation(in, cfg, 11);
  AggregationResult b = run_aggregation(in, cfg, 11);
  CHECK(a.loss_history == b.loss_history);
  CHECK(a.field.grid() == b.field.grid());
  CHECK(a.params.t_albedo == b.params.t_albedo);
}

TEST_CASE("run_aggregation input validation") {
  const Mesh mesh = make_two_boxes();
  const Bvh bvh(mesh);
  const Camera cam = Camera::look_at({3, 2, 3}, {1, 0.5, 0.5}, {0, 1, 0}, 0.9, 8, 8);
  std::vector<GBuffer> gbuffers{make_gbuffer(bvh, cam), make_gbuffer(bvh, cam)};
  std::vector<PredictionSet> one(1);  // fewer prediction sets than views
  AggregationInputs in;
  in.gbuffers = &gbuffers;
  in.predictions = &one;
  in.domain = mesh.bounds();
  in.field_config = tiny_field();
  PipelineConfig cfg;
  CHECK_THROWS_WITH_AS(run_aggregation(in, cfg, 1), doctest::Contains("view without predictions"),
                       std::runtime_error);
}

TEST_CASE("fusion params save/load round trip") {
  TempDir tmp("fusion_params");
  FusionParams p(2, 3, 2);
  Rng rng(8);
  for (double& v : p.t_albedo) v += rng.next_double() - 0.5;
  for (double& v : p.z_rough) v += rng.next_double() - 0.5;
  save_fusion_params(p, tmp.path / "params.txt");
  const FusionParams back = load_fusion_params(tmp.path / "params.txt");
  CHECK(back.views == 2);
  CHECK(back.objects == 3);
  CHECK(back.k == 2);
  for (size_t i = 0; i < p.t_albedo.size(); ++i)
    CHECK(back.t_albedo[i] == doctest::Approx(p.t_albedo[i]).epsilon(1e-15));
  for (size_t i = 0; i < p.z_rough.size(); ++i)
    CHECK(back.z_rough[i] == doctest::Approx(p.z_rough[i]).epsilon(1e-15));
}
