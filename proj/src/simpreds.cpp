#include "iif/simpreds.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "iif/rng.hpp"

namespace iif {

void PerturbConfig::validate() const {
  if (albedo_scale_lo <= 0 || albedo_scale_hi < albedo_scale_lo)
    throw std::runtime_error("simpreds: invalid albedo scale range");
  if (scalar_slope_lo <= 0 || scalar_slope_hi < scalar_slope_lo)
    throw std::runtime_error("simpreds: invalid slope range");
  if (albedo_offset_hi < albedo_offset_lo || scalar_offset_hi < scalar_offset_lo)
    throw std::runtime_error("simpreds: invalid offset range");
  if (noise_sigma < 0 || tone_jitter < 0)
    throw std::runtime_error("simpreds: sigma and tone_jitter must be >= 0");
}

namespace {

double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(std::log(lo) + rng.next_double() * (std::log(hi) - std::log(lo)));
}

double uniform(Rng& rng, double lo, double hi) { return lo + rng.next_double() * (hi - lo); }

double gaussian(Rng& rng) {
  const double u1 = std::max(rng.next_double(), 1e-300);
  const double u2 = rng.next_double();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

// Monotone cubic h(t) = t + s t(1-t)(t-phi); s is shrunk until h' stays
// positive on [0,1].
struct ToneCurve {
  double s = 0, phi = 0;

  static ToneCurve draw(Rng& rng, double strength) {
    ToneCurve c;
    if (strength <= 0) return c;
    c.phi = rng.next_double();
    double max_q = 1e-9;
    for (int i = 0; i <= 32; ++i) {
      const double t = i / 32.0;
      max_q = std::max(max_q, std::abs(-3 * t * t + 2 * (1 + c.phi) * t - c.phi));
    }
    const double raw = strength * (2.0 * rng.next_double() - 1.0);
    c.s = std::clamp(raw, -0.95 / max_q, 0.95 / max_q);
    return c;
  }
  double operator()(double t) const { return t + s * t * (1.0 - t) * (t - phi); }
};

double clamp_counted(double v, int& clamps) {
  if (v < -1e-12 || v > 1.0 + 1e-12) ++clamps;
  return std::clamp(v, 0.0, 1.0);
}

}  // namespace

PredictionSet simulate_predictions(const ImageF& gt_albedo, const ImageF& gt_rough,
                                   const ImageF& gt_metal, const ImageF& instance, int view_id,
                                   int k, const PerturbConfig& cfg, uint64_t seed,
                                   std::vector<GtTransform>* log) {
  if (k <= 0) throw std::runtime_error("simpreds: k must be positive");
  cfg.validate();
  if (!gt_albedo.same_shape(ImageF(gt_rough.width, gt_rough.height, 3)) ||
      gt_rough.channels != 1 || gt_metal.channels != 1 ||
      gt_rough.width != gt_albedo.width || gt_metal.width != gt_albedo.width ||
      instance.width != gt_albedo.width || instance.height != gt_albedo.height)
    throw std::runtime_error("simpreds: ground-truth map shapes disagree");
  for (const float v : gt_albedo.data)
    if (v < 0 || v > 1) throw std::runtime_error("simpreds: ground-truth maps must lie in [0,1]");

  int objects = 0;
  for (const float v : instance.data) objects = std::max(objects, int(std::lround(v)) + 1);

  PredictionSet set;
  set.view_id = view_id;
  set.k = k;
  set.instance = instance;
  set.source = "simulated";

  const int w = gt_albedo.width, h = gt_albedo.height;
  int clamps = 0;
  for (int kk = 0; kk < k; ++kk) {
    // per-object transforms for this candidate
    std::vector<GtTransform> tf(objects);
    std::vector<ToneCurve> tone(objects);
    for (int o = 0; o < objects; ++o) {
      Rng rng(seed, uint64_t(view_id), uint64_t(o), uint64_t(kk));
      GtTransform& t = tf[o];
      t.view = view_id;
      t.object = o;
      t.cand = kk;
      for (int c = 0; c < 3; ++c) {
        t.albedo[c * 4 + c] = log_uniform(rng, cfg.albedo_scale_lo, cfg.albedo_scale_hi);
        t.albedo[c * 4 + 3] = uniform(rng, cfg.albedo_offset_lo, cfg.albedo_offset_hi);
      }
      if (cfg.channel_mixing)
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c)
            if (r != c) t.albedo[r * 4 + c] = uniform(rng, -0.05, 0.05);
      t.rough = {log_uniform(rng, cfg.scalar_slope_lo, cfg.scalar_slope_hi),
                 uniform(rng, cfg.scalar_offset_lo, cfg.scalar_offset_hi)};
      t.metal = {log_uniform(rng, cfg.scalar_slope_lo, cfg.scalar_slope_hi),
                 uniform(rng, cfg.scalar_offset_lo, cfg.scalar_offset_hi)};
      tone[o] = ToneCurve::draw(rng, cfg.tone_jitter);
      if (log) log->push_back(t);
    }

    ImageF alb(w, h, 3), rgh(w, h, 1), met(w, h, 1);
    Rng noise(seed, uint64_t(view_id), 0x9015eu, uint64_t(kk));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int o = int(std::lround(instance.at(x, y)));
        Vec3 a = gt_albedo.rgb(x, y);
        double r = gt_rough.at(x, y);
        double m = gt_metal.at(x, y);
        if (o >= 0) {
          const GtTransform& t = tf[o];
          Vec3 ta;
          for (int c = 0; c < 3; ++c)
            ta[c] = t.albedo[c * 4 + 0] * a.x + t.albedo[c * 4 + 1] * a.y +
                    t.albedo[c * 4 + 2] * a.z + t.albedo[c * 4 + 3];
          a = ta;
          if (cfg.tone_jitter > 0) {
            const double lum = luminance(clamp01(a));
            if (lum > 1e-6) a *= tone[o](lum) / lum;
          }
          r = t.rough[0] * r + t.rough[1];
          m = t.metal[0] * m + t.metal[1];
        }
        if (cfg.noise_sigma > 0) {
          for (int c = 0; c < 3; ++c) a[c] += cfg.noise_sigma * gaussian(noise);
          r += cfg.noise_sigma * gaussian(noise);
          m += cfg.noise_sigma * gaussian(noise);
        }
        alb.set_rgb(x, y, {clamp_counted(a.x, clamps), clamp_counted(a.y, clamps),
                           clamp_counted(a.z, clamps)});
        rgh.at(x, y) = float(clamp_counted(r, clamps));
        met.at(x, y) = float(clamp_counted(m, clamps));
      }
    set.albedo.push_back(std::move(alb));
    set.rough.push_back(std::move(rgh));
    set.metal.push_back(std::move(met));
  }
  set.clamp_warnings = clamps;
  return set;
}

void write_transform_log(const std::vector<GtTransform>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("simpreds: cannot write transform log: " + path.string());
  out.precision(17);
  out << "# view object cand Ta[12] Tr[2] Tm[2]\n";
  for (const GtTransform& t : log) {
    out << t.view << " " << t.object << " " << t.cand;
    for (const double v : t.albedo) out << " " << v;
    for (const double v : t.rough) out << " " << v;
    for (const double v : t.metal) out << " " << v;
    out << "\n";
  }
}

std::vector<GtTransform> read_transform_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("simpreds: cannot read transform log: " + path.string());
  std::vector<GtTransform> log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    GtTransform t;
    ls >> t.view >> t.object >> t.cand;
    for (double& v : t.albedo) ls >> v;
    for (double& v : t.rough) ls >> v;
    for (double& v : t.metal) ls >> v;
    if (!ls) throw std::runtime_error("simpreds: malformed transform log line: " + line);
    log.push_back(t);
  }
  return log;
}

}  // namespace iif
