#include "iif/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "iif/rng.hpp"

namespace iif {

FusionParams::FusionParams(int views_, int objects_, int k_)
    : views(views_), objects(objects_), k(k_) {
  const size_t n = size_t(views) * objects * k;
  t_albedo.assign(n * 12, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (int r = 0; r < 3; ++r) t_albedo[i * 12 + r * 4 + r] = 1.0;  // [I | 0]
  t_rough.assign(n * 2, 0.0);
  t_metal.assign(n * 2, 0.0);
  for (size_t i = 0; i < n; ++i) {
    t_rough[i * 2] = 1.0;
    t_metal[i * 2] = 1.0;
  }
  z_albedo.assign(n, 0.0);
  z_rough.assign(n, 0.0);
  z_metal.assign(n, 0.0);
  g_t_albedo.assign(t_albedo.size(), 0.0);
  g_t_rough.assign(t_rough.size(), 0.0);
  g_t_metal.assign(t_metal.size(), 0.0);
  g_z_albedo.assign(n, 0.0);
  g_z_rough.assign(n, 0.0);
  g_z_metal.assign(n, 0.0);
}

void FusionParams::register_params(ParamRegistry& registry, bool transforms, bool logits) {
  auto add = [&](const char* name, std::vector<double>& p, std::vector<double>& g) {
    ParamBlock b;
    b.name = name;
    b.params = &p;
    b.grads = &g;
    registry.add(std::move(b));
  };
  if (transforms) {
    add("affine.albedo", t_albedo, g_t_albedo);
    add("affine.rough", t_rough, g_t_rough);
    add("affine.metal", t_metal, g_t_metal);
  }
  if (logits) {
    add("logits.albedo", z_albedo, g_z_albedo);
    add("logits.rough", z_rough, g_z_rough);
    add("logits.metal", z_metal, g_z_metal);
  }
}

Vec3 apply_affine_albedo(const double* t, const Vec3& a) {
  Vec3 out;
  for (int r = 0; r < 3; ++r)
    out[r] = t[r * 4 + 0] * a.x + t[r * 4 + 1] * a.y + t[r * 4 + 2] * a.z + t[r * 4 + 3];
  return out;
}

double apply_affine_scalar(const double* t, double v) { return t[0] * v + t[1]; }

std::vector<double> mixture_weights(std::span<const double> z, double tau_logit) {
  if (tau_logit <= 0) throw std::runtime_error("fusion: tau_logit must be positive");
  const double zmax = *std::max_element(z.begin(), z.end());
  std::vector<double> alpha(z.size());
  double sum = 0;
  for (size_t i = 0; i < z.size(); ++i) {
    alpha[i] = std::exp((z[i] - zmax) / tau_logit);
    sum += alpha[i];
  }
  for (double& a : alpha) a /= sum;
  return alpha;
}

MedianResult median_with_subgradient(std::span<const double> values) {
  const int n = int(values.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return values[a] < values[b]; });
  MedianResult r;
  if (n % 2 == 1) {
    r.idx_lo = r.idx_hi = order[n / 2];
    r.value = values[r.idx_lo];
    r.w_lo = 1.0;
    r.w_hi = 0.0;
  } else {
    r.idx_lo = order[n / 2 - 1];
    r.idx_hi = order[n / 2];
    r.value = 0.5 * (values[r.idx_lo] + values[r.idx_hi]);
    r.w_lo = r.w_hi = 0.5;
  }
  return r;
}

double kl_laplace(double mu1, double b1, double mu2, double b2) {
  if (b1 <= 0 || b2 <= 0) throw std::runtime_error("fusion: kl_laplace requires positive scales");
  const double d = std::abs(mu1 - mu2);
  return std::log(b2 / b1) + (b1 * std::exp(-d / b1) + d) / b2 - 1.0;
}

KlGrad kl_laplace_grad(double mu1, double b1, double mu2, double b2) {
  if (b1 <= 0 || b2 <= 0) throw std::runtime_error("fusion: kl_laplace requires positive scales");
  const double diff = mu1 - mu2;
  const double d = std::abs(diff);
  const double s = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
  const double e = std::exp(-d / b1);
  KlGrad g;
  g.d_mu1 = s * (1.0 - e) / b2;
  g.d_mu2 = -g.d_mu1;
  g.d_b1 = -1.0 / b1 + e * (1.0 + d / b1) / b2;
  g.d_b2 = 1.0 / b2 - (b1 * e + d) / (b2 * b2);
  return g;
}

namespace {

double sgn(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

}  // namespace

LossBreakdown FusionObjective::evaluate(const PixelBatch& batch, bool with_grad) {
  return evaluate_impl(batch, with_grad, true, true, true);
}

double FusionObjective::data_loss(const PixelBatch& batch, bool with_grad) {
  const double wd = w_data, wl = w_label, wr = w_reg;
  w_data = 1.0;
  auto out = evaluate_impl(batch, with_grad, true, false, false);
  w_data = wd;
  w_label = wl;
  w_reg = wr;
  return out.data;
}

double FusionObjective::label_loss(const PixelBatch& batch, bool with_grad) {
  const double wd = w_data, wl = w_label, wr = w_reg;
  w_label = 1.0;
  auto out = evaluate_impl(batch, with_grad, false, true, false);
  w_data = wd;
  w_label = wl;
  w_reg = wr;
  return out.label;
}

double FusionObjective::reg_loss(bool with_grad) {
  const double wd = w_data, wl = w_label, wr = w_reg;
  w_reg = 1.0;
  auto out = evaluate_impl({}, with_grad, false, false, true);
  w_data = wd;
  w_label = wl;
  w_reg = wr;
  return out.reg;
}

LossBreakdown FusionObjective::evaluate_impl(const PixelBatch& batch, bool with_grad,
                                             bool use_data, bool use_label, bool use_reg) {
  LossBreakdown out;
  FusionParams& P = *params_;
  const int K = P.k;
  const size_t N = batch.size();
  const bool use_transforms =
      mode == AggregationMode::kFull || mode == AggregationMode::kParametric;
  const bool use_logits = mode == AggregationMode::kFull;
  const bool laplace_matching = mode == AggregationMode::kFull;

  std::vector<std::array<double, 5>> dmu, dbs;
  std::vector<FieldOutput> preds;
  FieldTape tape;
  if (N > 0 && (use_data || use_label)) {
    std::vector<Vec3> points(N);
    for (size_t i = 0; i < N; ++i) points[i] = batch[i].position;
    preds = field_->forward(points, tape);
    if (with_grad) {
      dmu.assign(N, {});
      dbs.assign(N, {});
    }
  }

  std::vector<double> bar(size_t(K) * kChannels);   // transformed candidates
  std::vector<double> dev(K);
  std::vector<std::vector<double>> alpha(3);
  std::vector<std::vector<double>> d_alpha(3);

  for (size_t n = 0; n < N && (use_data || use_label); ++n) {
    const PixelSample& px = batch[n];
    const size_t vok0 = P.index(px.view, px.object, 0);

    for (int kk = 0; kk < K; ++kk) {
      Vec3 a = px.cand_albedo[kk];
      double r = px.cand_rough[kk];
      double m = px.cand_metal[kk];
      if (use_transforms) {
        a = apply_affine_albedo(P.albedo_t(px.view, px.object, kk), a);
        r = apply_affine_scalar(&P.t_rough[(vok0 + kk) * 2], r);
        m = apply_affine_scalar(&P.t_metal[(vok0 + kk) * 2], m);
      }
      bar[kk * kChannels + 0] = a.x;
      bar[kk * kChannels + 1] = a.y;
      bar[kk * kChannels + 2] = a.z;
      bar[kk * kChannels + 3] = r;
      bar[kk * kChannels + 4] = m;
    }

    const std::vector<double>* zs[3] = {&P.z_albedo, &P.z_rough, &P.z_metal};
    for (int g = 0; g < 3; ++g) {
      if (use_logits) {
        alpha[g] = mixture_weights(std::span(zs[g]->data() + vok0, size_t(K)), tau_logit);
      } else {
        alpha[g].assign(K, 1.0 / K);
      }
      d_alpha[g].assign(K, 0.0);
    }

    // Reference distribution per channel.
    double muref[kChannels], bref[kChannels];
    MedianResult med[kChannels];
    bool bref_clamped[kChannels];
    for (int c = 0; c < kChannels; ++c) {
      const int g = c < 3 ? 0 : (c == 3 ? 1 : 2);
      double mu = 0;
      for (int kk = 0; kk < K; ++kk) mu += alpha[g][kk] * bar[kk * kChannels + c];
      muref[c] = mu;
      for (int kk = 0; kk < K; ++kk) dev[kk] = std::abs(mu - bar[kk * kChannels + c]);
      med[c] = median_with_subgradient(dev);
      bref_clamped[c] = med[c].value < b_min_;
      bref[c] = std::max(med[c].value, b_min_);
    }

    std::vector<double> d_bar(size_t(K) * kChannels, 0.0);

    if (use_data) {
      const double scale = w_data / double(N);
      for (int c = 0; c < kChannels; ++c) {
        const int g = c < 3 ? 0 : (c == 3 ? 1 : 2);
        double d_muref = 0, d_bref = 0;
        if (laplace_matching) {
          out.data += kl_laplace(muref[c], bref[c], preds[n].mu[c], preds[n].b[c]) / double(N);
          if (with_grad) {
            const KlGrad kg = kl_laplace_grad(muref[c], bref[c], preds[n].mu[c], preds[n].b[c]);
            dmu[n][c] += scale * kg.d_mu2;
            dbs[n][c] += scale * kg.d_b2;
            d_muref = scale * kg.d_mu1;
            d_bref = bref_clamped[c] ? 0.0 : scale * kg.d_b1;
          }
        } else {
          const double r = preds[n].mu[c] - muref[c];
          out.data += r * r / double(N);
          if (with_grad) {
            dmu[n][c] += scale * 2.0 * r;
            d_muref = -scale * 2.0 * r;
          }
        }
        if (!with_grad) continue;

        // b^ref depends on mu^ref through the selected deviations.
        if (d_bref != 0) {
          const int js[2] = {med[c].idx_lo, med[c].idx_hi};
          const double ws[2] = {med[c].w_lo, med[c].w_hi};
          for (int t = 0; t < 2; ++t) {
            if (ws[t] == 0) continue;
            const double s = sgn(muref[c] - bar[js[t] * kChannels + c]);
            d_muref += d_bref * ws[t] * s;
            d_bar[js[t] * kChannels + c] -= d_bref * ws[t] * s;
          }
        }
        // mu^ref = sum_k alpha_k bar_k
        for (int kk = 0; kk < K; ++kk) {
          d_bar[kk * kChannels + c] += d_muref * alpha[g][kk];
          d_alpha[g][kk] += d_muref * bar[kk * kChannels + c];
        }
      }
    }

    if (use_label && laplace_matching) {
      // E_{n,k}: mean squared error per channel group; q is a stop-gradient.
      const double scale = w_label / double(N);
      for (int g = 0; g < 3; ++g) {
        const int c0 = g == 0 ? 0 : (g == 1 ? 3 : 4);
        const int nc = g == 0 ? 3 : 1;
        std::vector<double> energy(K, 0.0);
        for (int kk = 0; kk < K; ++kk) {
          double e = 0;
          for (int c = c0; c < c0 + nc; ++c) {
            const double r = preds[n].mu[c] - bar[kk * kChannels + c];
            e += r * r;
          }
          energy[kk] = e / nc;
        }
        const double emin = *std::min_element(energy.begin(), energy.end());
        std::vector<double> q(K);
        double qsum = 0;
        for (int kk = 0; kk < K; ++kk) {
          q[kk] = std::exp(-(energy[kk] - emin) / tau_err);
          qsum += q[kk];
        }
        for (int kk = 0; kk < K; ++kk) {
          q[kk] /= qsum;
          out.label -= q[kk] * std::log(std::max(alpha[g][kk], 1e-300)) / double(N);
        }
        if (with_grad && use_logits) {
          std::vector<double>* gz = g == 0 ? &P.g_z_albedo : (g == 1 ? &P.g_z_rough : &P.g_z_metal);
          for (int kk = 0; kk < K; ++kk)
            (*gz)[vok0 + kk] += scale * (alpha[g][kk] - q[kk]) / tau_logit;
        }
      }
    }

    if (!with_grad) continue;

    // alpha -> z through the softmax.
    if (use_logits) {
      std::vector<double>* gzs[3] = {&P.g_z_albedo, &P.g_z_rough, &P.g_z_metal};
      for (int g = 0; g < 3; ++g) {
        double t = 0;
        for (int kk = 0; kk < K; ++kk) t += d_alpha[g][kk] * alpha[g][kk];
        for (int kk = 0; kk < K; ++kk)
          (*gzs[g])[vok0 + kk] += alpha[g][kk] * (d_alpha[g][kk] - t) / tau_logit;
      }
    }
    // bar -> transforms.
    if (use_transforms) {
      for (int kk = 0; kk < K; ++kk) {
        double* gta = &P.g_t_albedo[(vok0 + kk) * 12];
        const Vec3 a = px.cand_albedo[kk];
        for (int r = 0; r < 3; ++r) {
          const double g = d_bar[kk * kChannels + r];
          if (g == 0) continue;
          gta[r * 4 + 0] += g * a.x;
          gta[r * 4 + 1] += g * a.y;
          gta[r * 4 + 2] += g * a.z;
          gta[r * 4 + 3] += g;
        }
        const double gr = d_bar[kk * kChannels + 3];
        P.g_t_rough[(vok0 + kk) * 2 + 0] += gr * px.cand_rough[kk];
        P.g_t_rough[(vok0 + kk) * 2 + 1] += gr;
        const double gm = d_bar[kk * kChannels + 4];
        P.g_t_metal[(vok0 + kk) * 2 + 0] += gm * px.cand_metal[kk];
        P.g_t_metal[(vok0 + kk) * 2 + 1] += gm;
      }
    }
  }

  if (N > 0 && with_grad && (use_data || use_label)) field_->backward(tape, dmu, dbs);

  if (use_reg) {
    const size_t nt = size_t(P.views) * P.objects * P.k;
    double reg = 0;
    for (size_t i = 0; i < nt; ++i) {
      for (int r = 0; r < 3; ++r)
        for (int col = 0; col < 4; ++col) {
          const double id = (r == col) ? 1.0 : 0.0;
          const double d = P.t_albedo[i * 12 + r * 4 + col] - id;
          reg += d * d;
          if (with_grad && use_transforms) P.g_t_albedo[i * 12 + r * 4 + col] += w_reg * 2.0 * d;
        }
      for (int j = 0; j < 2; ++j) {
        const double id = j == 0 ? 1.0 : 0.0;
        const double dr = P.t_rough[i * 2 + j] - id;
        const double dm = P.t_metal[i * 2 + j] - id;
        reg += dr * dr + dm * dm;
        if (with_grad && use_transforms) {
          P.g_t_rough[i * 2 + j] += w_reg * 2.0 * dr;
          P.g_t_metal[i * 2 + j] += w_reg * 2.0 * dm;
        }
      }
    }
    out.reg = reg;
  }
  return out;
}

PixelSample make_pixel_sample(const GBuffer& gb, const PredictionSet& preds, int view, int x,
                              int y) {
  PixelSample px;
  px.view = view;
  const size_t i = gb.index(x, y);
  px.object = gb.object_id[i];
  px.position = gb.position[i];
  px.cand_albedo.resize(preds.k);
  px.cand_rough.resize(preds.k);
  px.cand_metal.resize(preds.k);
  for (int kk = 0; kk < preds.k; ++kk) {
    px.cand_albedo[kk] = preds.albedo[kk].rgb(x, y);
    px.cand_rough[kk] = preds.rough[kk].at(x, y);
    px.cand_metal[kk] = preds.metal[kk].at(x, y);
  }
  return px;
}

AggregationResult run_aggregation(const AggregationInputs& inputs, const PipelineConfig& cfg,
                                  uint64_t seed, AggregationMode mode, bool verbose) {
  const auto& gbuffers = *inputs.gbuffers;
  const auto& predictions = *inputs.predictions;
  const int V = int(gbuffers.size());
  if (V == 0) throw std::runtime_error("fusion: no views");
  if (int(predictions.size()) != V)
    throw std::runtime_error("fusion: view without predictions");
  const int K = predictions[0].k;
  for (const auto& p : predictions)
    if (p.k != K) throw std::runtime_error("fusion: candidate count differs across views");

  int O = 0;
  for (const auto& gb : gbuffers)
    for (const int id : gb.object_id) O = std::max(O, id + 1);
  if (O == 0) throw std::runtime_error("fusion: no geometry visible in any view");

  // (view, pixel) pairs that hit geometry; background excluded.
  std::vector<std::pair<int, int>> valid;
  for (int v = 0; v < V; ++v) {
    const GBuffer& gb = gbuffers[v];
    for (int i = 0; i < gb.width * gb.height; ++i)
      if (gb.hit_mask[i] && gb.object_id[i] >= 0) valid.emplace_back(v, i);
  }
  if (valid.empty()) throw std::runtime_error("fusion: no valid pixels");

  AggregationResult result{TextureField(inputs.field_config, inputs.domain, seed),
                           FusionParams(V, O, K), mode};

  if (mode == AggregationMode::kPerObjectMean) {
    result.per_object_mean.assign(O, {});
    std::vector<double> count(O, 0.0);
    for (const auto& [v, i] : valid) {
      const GBuffer& gb = gbuffers[v];
      const int x = i % gb.width, y = i / gb.width;
      const int o = gb.object_id[i];
      for (int kk = 0; kk < K; ++kk) {
        const Vec3 a = predictions[v].albedo[kk].rgb(x, y);
        result.per_object_mean[o][0] += a.x;
        result.per_object_mean[o][1] += a.y;
        result.per_object_mean[o][2] += a.z;
        result.per_object_mean[o][3] += predictions[v].rough[kk].at(x, y);
        result.per_object_mean[o][4] += predictions[v].metal[kk].at(x, y);
      }
      count[o] += K;
    }
    for (int o = 0; o < O; ++o)
      if (count[o] > 0)
        for (int c = 0; c < 5; ++c) result.per_object_mean[o][c] /= count[o];
    return result;
  }

  const bool use_transforms =
      mode == AggregationMode::kFull || mode == AggregationMode::kParametric;
  const bool use_logits = mode == AggregationMode::kFull;

  ParamRegistry registry;
  result.field.register_params(registry);
  result.params.register_params(registry, use_transforms, use_logits);
  AdamOptimizer adam(registry);

  FusionObjective objective(result.field, result.params, inputs.field_config.b_min);
  objective.mode = mode;
  objective.w_data = cfg.fusion_w_data;
  objective.w_label = cfg.fusion_w_label;
  objective.w_reg = cfg.fusion_w_reg;

  const int batch_size = std::min<int>(cfg.fusion_batch, int(valid.size()));
  const int iters_per_epoch = std::max<size_t>(1, valid.size() / size_t(batch_size));
  const int total_iters = cfg.fusion_epochs * iters_per_epoch;

  PixelBatch batch(batch_size);
  for (int iter = 0; iter < total_iters; ++iter) {
    const double tau =
        cfg.fusion_tau * std::pow(cfg.fusion_anneal_factor, iter / cfg.fusion_anneal_every);
    objective.tau_logit = objective.tau_err = tau;
    const int epoch = iter / iters_per_epoch;
    const double lr =
        cfg.fusion_lr * std::pow(cfg.fusion_lr_decay, epoch / cfg.fusion_lr_decay_epochs);

    Rng rng(seed, 0xba7c4, uint64_t(iter));
    for (int b = 0; b < batch_size; ++b) {
      const auto& [v, i] = valid[rng.next_below(valid.size())];
      const GBuffer& gb = gbuffers[v];
      batch[b] = make_pixel_sample(gb, predictions[v], v, i % gb.width, i / gb.width);
    }

    registry.zero_grads();
    const LossBreakdown loss = objective.evaluate(batch, true);
    adam.step(lr);

    if (iter % 100 == 0) {
      result.loss_history.push_back(loss.total());
      if (verbose)
        std::printf("  iter %5d  data %.5f  label %.5f  reg %.5f  lr %.2e  tau %.3f\n", iter,
                    loss.data, loss.label, loss.reg, lr, tau);
    }
  }
  return result;
}

void save_fusion_params(const FusionParams& p, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("fusion: cannot write params: " + path.string());
  out.precision(17);
  out << p.views << " " << p.objects << " " << p.k << "\n";
  const size_t n = size_t(p.views) * p.objects * p.k;
  for (size_t i = 0; i < n; ++i) {
    for (int j = 0; j < 12; ++j) out << p.t_albedo[i * 12 + j] << " ";
    for (int j = 0; j < 2; ++j) out << p.t_rough[i * 2 + j] << " ";
    for (int j = 0; j < 2; ++j) out << p.t_metal[i * 2 + j] << " ";
    out << p.z_albedo[i] << " " << p.z_rough[i] << " " << p.z_metal[i] << "\n";
  }
}

FusionParams load_fusion_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("fusion: cannot read params: " + path.string());
  int v, o, k;
  in >> v >> o >> k;
  FusionParams p(v, o, k);
  const size_t n = size_t(v) * o * k;
  for (size_t i = 0; i < n; ++i) {
    for (int j = 0; j < 12; ++j) in >> p.t_albedo[i * 12 + j];
    for (int j = 0; j < 2; ++j) in >> p.t_rough[i * 2 + j];
    for (int j = 0; j < 2; ++j) in >> p.t_metal[i * 2 + j];
    in >> p.z_albedo[i] >> p.z_rough[i] >> p.z_metal[i];
  }
  if (!in) throw std::runtime_error("fusion: truncated params file: " + path.string());
  return p;
}

}  // namespace iif
