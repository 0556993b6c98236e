#include "iif/texfield.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "iif/geom.hpp"
#include "iif/rng.hpp"

namespace iif {

namespace {

constexpr uint32_t kPrimes[3] = {1u, 2654435761u, 805459861u};
constexpr char kMagic[8] = {'I', 'I', 'F', 'F', 'L', 'D', '0', '1'};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }

}  // namespace

FieldConfig FieldConfig::paper_preset() {
  FieldConfig cfg;
  cfg.levels = 32;
  cfg.features = 2;
  cfg.hashmap_log2 = 19;
  cfg.base_res = 16;
  cfg.top_res = 2048;
  return cfg;
}

void FieldConfig::validate() const {
  if (levels < 1) throw std::runtime_error("field: levels must be >= 1");
  if (features < 1) throw std::runtime_error("field: features must be >= 1");
  if (hashmap_log2 < 1 || hashmap_log2 > 30) throw std::runtime_error("field: bad hashmap size");
  if (base_res < 1 || top_res < base_res) throw std::runtime_error("field: bad resolution range");
  if (b_min <= 0) throw std::runtime_error("field: b_min must be positive");
}

TextureField::TextureField(const FieldConfig& cfg, const Aabb& domain, uint64_t seed)
    : cfg_(cfg), domain_(domain) {
  cfg_.validate();
  const size_t table_cap = size_t(1) << cfg_.hashmap_log2;
  const int L = cfg_.levels;
  level_res_.resize(L);
  level_offset_.resize(L);
  level_size_.resize(L);
  const double growth =
      L > 1 ? std::exp(std::log(double(cfg_.top_res) / cfg_.base_res) / (L - 1)) : 1.0;
  size_t offset = 0;
  for (int l = 0; l < L; ++l) {
    const int res = std::max(1, int(std::lround(cfg_.base_res * std::pow(growth, l))));
    level_res_[l] = res;
    const size_t dense = size_t(res + 1) * (res + 1) * (res + 1);
    level_size_[l] = std::min(dense, table_cap);
    level_offset_[l] = offset;
    offset += level_size_[l];
  }
  input_dim_ = size_t(L) * cfg_.features;

  grid_.resize(offset * cfg_.features);
  Rng rng(seed, 0x7f1e1d);
  for (double& g : grid_) g = (rng.next_double() * 2.0 - 1.0) * 1e-4;

  const int H = cfg_.hidden;
  auto xavier = [&](std::vector<double>& w, int fan_in, int fan_out) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : w) v = (rng.next_double() * 2.0 - 1.0) * bound;
  };
  w1_.resize(size_t(H) * input_dim_);
  b1_.assign(H, 0.0);
  w2_.resize(size_t(H) * H);
  b2_.assign(H, 0.0);
  w3_.resize(size_t(10) * H);
  b3_.assign(10, 0.0);
  xavier(w1_, int(input_dim_), H);
  xavier(w2_, H, H);
  xavier(w3_, H, 10);

  g_grid_.assign(grid_.size(), 0.0);
  g_w1_.assign(w1_.size(), 0.0);
  g_b1_.assign(b1_.size(), 0.0);
  g_w2_.assign(w2_.size(), 0.0);
  g_b2_.assign(b2_.size(), 0.0);
  g_w3_.assign(w3_.size(), 0.0);
  g_b3_.assign(b3_.size(), 0.0);
}

size_t TextureField::parameter_count() const {
  return grid_.size() + w1_.size() + b1_.size() + w2_.size() + b2_.size() + w3_.size() + b3_.size();
}

size_t TextureField::table_index(int level, int ix, int iy, int iz) const {
  const int res = level_res_[level];
  const size_t dense = size_t(res + 1) * (res + 1) * (res + 1);
  if (dense == level_size_[level])
    return size_t(ix) + size_t(res + 1) * (size_t(iy) + size_t(res + 1) * iz);
  const uint32_t h = uint32_t(ix) * kPrimes[0] ^ uint32_t(iy) * kPrimes[1] ^ uint32_t(iz) * kPrimes[2];
  return h & (level_size_[level] - 1);
}

void TextureField::encode_point(const Vec3& x, double* feats, uint32_t* idx, double* w,
                                bool* clamped) const {
  const Vec3 ext = domain_.extent();
  Vec3 u{(x.x - domain_.lo.x) / std::max(ext.x, 1e-12),
         (x.y - domain_.lo.y) / std::max(ext.y, 1e-12),
         (x.z - domain_.lo.z) / std::max(ext.z, 1e-12)};
  bool was_clamped = false;
  for (int a = 0; a < 3; ++a) {
    if (u[a] < 0 || u[a] > 1) {
      u[a] = clamp01(u[a]);
      was_clamped = true;
    }
  }
  if (clamped) *clamped = was_clamped;

  const int F = cfg_.features;
  for (int l = 0; l < cfg_.levels; ++l) {
    const int res = level_res_[l];
    const double px = u.x * res, py = u.y * res, pz = u.z * res;
    const int x0 = std::min(int(px), res - 1);
    const int y0 = std::min(int(py), res - 1);
    const int z0 = std::min(int(pz), res - 1);
    const double fx = px - x0, fy = py - y0, fz = pz - z0;
    int corner = 0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx, ++corner) {
          const size_t entry = table_index(l, x0 + dx, y0 + dy, z0 + dz);
          idx[l * 8 + corner] = uint32_t(level_offset_[l] + entry);
          w[l * 8 + corner] = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
        }
    for (int f = 0; f < F; ++f) {
      double acc = 0;
      for (int c = 0; c < 8; ++c)
        acc += w[l * 8 + c] * grid_[size_t(idx[l * 8 + c]) * F + f];
      feats[l * F + f] = acc;
    }
  }
}

void TextureField::head_forward(const double* feats, double* h1, double* h2, double* out) const {
  const int H = cfg_.hidden;
  const int D = int(input_dim_);
  for (int i = 0; i < H; ++i) {
    double acc = b1_[i];
    const double* row = &w1_[size_t(i) * D];
    for (int j = 0; j < D; ++j) acc += row[j] * feats[j];
    h1[i] = acc > 0 ? acc : 0;
  }
  for (int i = 0; i < H; ++i) {
    double acc = b2_[i];
    const double* row = &w2_[size_t(i) * H];
    for (int j = 0; j < H; ++j) acc += row[j] * h1[j];
    h2[i] = acc > 0 ? acc : 0;
  }
  for (int i = 0; i < 10; ++i) {
    double acc = b3_[i];
    const double* row = &w3_[size_t(i) * H];
    for (int j = 0; j < H; ++j) acc += row[j] * h2[j];
    out[i] = acc;
  }
}

FieldOutput TextureField::activate(const double* out, double b_min) {
  FieldOutput fo;
  for (int c = 0; c < 5; ++c) {
    fo.mu[c] = sigmoid(out[c]);
    fo.b[c] = softplus(out[5 + c]) + b_min;
  }
  return fo;
}

FieldOutput TextureField::query(const Vec3& x) const {
  std::vector<double> feats(input_dim_);
  std::vector<uint32_t> idx(size_t(cfg_.levels) * 8);
  std::vector<double> w(size_t(cfg_.levels) * 8);
  std::vector<double> h1(cfg_.hidden), h2(cfg_.hidden);
  double out[10];
  encode_point(x, feats.data(), idx.data(), w.data(), nullptr);
  head_forward(feats.data(), h1.data(), h2.data(), out);
  return activate(out, cfg_.b_min);
}

std::vector<FieldOutput> TextureField::forward(const std::vector<Vec3>& points,
                                               FieldTape& tape) const {
  const size_t n = points.size();
  const int H = cfg_.hidden;
  tape.n = n;
  tape.unit_points = points;
  tape.clamped.assign(n, 0);
  tape.feats.assign(n * input_dim_, 0.0);
  tape.h1.assign(n * H, 0.0);
  tape.h2.assign(n * H, 0.0);
  tape.out.assign(n * 10, 0.0);
  tape.corner_index.assign(n * cfg_.levels * 8, 0);
  tape.corner_weight.assign(n * cfg_.levels * 8, 0.0);

  std::vector<FieldOutput> result(n);
  for (size_t i = 0; i < n; ++i) {
    bool clamped = false;
    encode_point(points[i], &tape.feats[i * input_dim_], &tape.corner_index[i * cfg_.levels * 8],
                 &tape.corner_weight[i * cfg_.levels * 8], &clamped);
    tape.clamped[i] = clamped;
    head_forward(&tape.feats[i * input_dim_], &tape.h1[i * H], &tape.h2[i * H], &tape.out[i * 10]);
    result[i] = activate(&tape.out[i * 10], cfg_.b_min);
  }
  return result;
}

void TextureField::backward(const FieldTape& tape,
                            const std::vector<std::array<double, 5>>& dmu,
                            const std::vector<std::array<double, 5>>& db) {
  if (dmu.size() != tape.n || db.size() != tape.n ||
      tape.feats.size() != tape.n * input_dim_ || tape.h1.size() != tape.n * size_t(cfg_.hidden))
    throw std::runtime_error("field: tape/batch mismatch");
  const int H = cfg_.hidden;
  const int D = int(input_dim_);
  const int F = cfg_.features;
  std::vector<double> d_out(10), d_h2(H), d_h1(H), d_feats(D);

  for (size_t i = 0; i < tape.n; ++i) {
    const double* out = &tape.out[i * 10];
    for (int c = 0; c < 5; ++c) {
      const double s = sigmoid(out[c]);
      d_out[c] = dmu[i][c] * s * (1.0 - s);
      d_out[5 + c] = db[i][c] * sigmoid(out[5 + c]);  // d softplus
    }
    const double* h2 = &tape.h2[i * H];
    const double* h1 = &tape.h1[i * H];
    const double* feats = &tape.feats[i * input_dim_];

    std::fill(d_h2.begin(), d_h2.end(), 0.0);
    for (int o = 0; o < 10; ++o) {
      const double g = d_out[o];
      if (g == 0) continue;
      double* wrow = &g_w3_[size_t(o) * H];
      const double* row = &w3_[size_t(o) * H];
      for (int j = 0; j < H; ++j) {
        wrow[j] += g * h2[j];
        d_h2[j] += g * row[j];
      }
      g_b3_[o] += g;
    }
    std::fill(d_h1.begin(), d_h1.end(), 0.0);
    for (int o = 0; o < H; ++o) {
      if (h2[o] <= 0) continue;  // ReLU
      const double g = d_h2[o];
      if (g == 0) continue;
      double* wrow = &g_w2_[size_t(o) * H];
      const double* row = &w2_[size_t(o) * H];
      for (int j = 0; j < H; ++j) {
        wrow[j] += g * h1[j];
        d_h1[j] += g * row[j];
      }
      g_b2_[o] += g;
    }
    std::fill(d_feats.begin(), d_feats.end(), 0.0);
    for (int o = 0; o < H; ++o) {
      if (h1[o] <= 0) continue;
      const double g = d_h1[o];
      if (g == 0) continue;
      double* wrow = &g_w1_[size_t(o) * D];
      const double* row = &w1_[size_t(o) * D];
      for (int j = 0; j < D; ++j) {
        wrow[j] += g * feats[j];
        d_feats[j] += g * row[j];
      }
      g_b1_[o] += g;
    }
    const uint32_t* idx = &tape.corner_index[i * cfg_.levels * 8];
    const double* cw = &tape.corner_weight[i * cfg_.levels * 8];
    for (int l = 0; l < cfg_.levels; ++l)
      for (int f = 0; f < F; ++f) {
        const double g = d_feats[l * F + f];
        if (g == 0) continue;
        for (int c = 0; c < 8; ++c)
          g_grid_[size_t(idx[l * 8 + c]) * F + f] += g * cw[l * 8 + c];
      }
  }
}

void TextureField::register_params(ParamRegistry& registry) {
  auto add = [&](const char* name, std::vector<double>& p, std::vector<double>& g) {
    ParamBlock b;
    b.name = name;
    b.params = &p;
    b.grads = &g;
    registry.add(std::move(b));
  };
  add("field.grid", grid_, g_grid_);
  add("field.w1", w1_, g_w1_);
  add("field.b1", b1_, g_b1_);
  add("field.w2", w2_, g_w2_);
  add("field.b2", b2_, g_b2_);
  add("field.w3", w3_, g_w3_);
  add("field.b3", b3_, g_b3_);
}

std::vector<std::vector<double>*> TextureField::all_param_blocks() {
  return {&grid_, &w1_, &b1_, &w2_, &b2_, &w3_, &b3_};
}

std::vector<std::vector<double>*> TextureField::all_grad_blocks() {
  return {&g_grid_, &g_w1_, &g_b1_, &g_w2_, &g_b2_, &g_w3_, &g_b3_};
}

void TextureField::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("field: cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, 8);
  const int32_t ints[6] = {cfg_.levels, cfg_.features, cfg_.hashmap_log2,
                           cfg_.base_res, cfg_.top_res, cfg_.hidden};
  out.write(reinterpret_cast<const char*>(ints), sizeof ints);
  const double doubles[7] = {cfg_.b_min, domain_.lo.x, domain_.lo.y, domain_.lo.z,
                             domain_.hi.x, domain_.hi.y, domain_.hi.z};
  out.write(reinterpret_cast<const char*>(doubles), sizeof doubles);
  for (const std::vector<double>* block :
       {&grid_, &w1_, &b1_, &w2_, &b2_, &w3_, &b3_}) {
    const uint64_t n = block->size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(reinterpret_cast<const char*>(block->data()), std::streamsize(n * 8));
  }
  if (!out) throw std::runtime_error("field: checkpoint write failed");
}

TextureField TextureField::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("field: cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("field: bad checkpoint magic: " + path.string());
  int32_t ints[6];
  double doubles[7];
  in.read(reinterpret_cast<char*>(ints), sizeof ints);
  in.read(reinterpret_cast<char*>(doubles), sizeof doubles);
  FieldConfig cfg;
  cfg.levels = ints[0];
  cfg.features = ints[1];
  cfg.hashmap_log2 = ints[2];
  cfg.base_res = ints[3];
  cfg.top_res = ints[4];
  cfg.hidden = ints[5];
  cfg.b_min = doubles[0];
  Aabb box;
  box.lo = {doubles[1], doubles[2], doubles[3]};
  box.hi = {doubles[4], doubles[5], doubles[6]};
  TextureField field(cfg, box, 0);
  for (std::vector<double>* block : field.all_param_blocks()) {
    uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 8);
    if (!in || n != block->size())
      throw std::runtime_error("field: checkpoint size mismatch: " + path.string());
    in.read(reinterpret_cast<char*>(block->data()), std::streamsize(n * 8));
  }
  if (!in) throw std::runtime_error("field: truncated checkpoint: " + path.string());
  return field;
}

std::vector<TextureAtlas> export_texture(const TextureField& field, const Mesh& mesh,
                                         double texel_density,
                                         const MaterialTransform& transform) {
  if (texel_density <= 0) throw std::runtime_error("field: texel_density must be positive");
  const int objects = mesh.object_count();
  std::vector<TextureAtlas> atlases;
  for (int o = 0; o < objects; ++o) {
    TextureAtlas atlas;
    atlas.object_id = o;
    double mean_area = 0;
    for (size_t t = 0; t < mesh.triangles.size(); ++t)
      if (mesh.triangles[t].object_id == o) {
        atlas.triangles.push_back(int(t));
        mean_area += mesh.triangle_area(int(t));
      }
    if (atlas.triangles.empty()) continue;
    mean_area /= double(atlas.triangles.size());
    atlas.tile = std::clamp(int(std::ceil(texel_density * std::sqrt(2.0 * mean_area))), 1, 64);

    const int n_tiles = int(atlas.triangles.size());
    atlas.tiles_x = std::max(1, int(std::ceil(std::sqrt(double(n_tiles)))));
    atlas.tiles_y = (n_tiles + atlas.tiles_x - 1) / atlas.tiles_x;
    const int w = atlas.tiles_x * atlas.tile, h = atlas.tiles_y * atlas.tile;
    atlas.albedo = ImageF(w, h, 3);
    atlas.rough = ImageF(w, h, 1);
    atlas.metal = ImageF(w, h, 1);
    atlas.texel_position.assign(size_t(w) * h, Vec3(0));
    atlas.texel_valid.assign(size_t(w) * h, 0);

    for (int t = 0; t < n_tiles; ++t) {
      const int tx = (t % atlas.tiles_x) * atlas.tile;
      const int ty = (t / atlas.tiles_x) * atlas.tile;
      for (int j = 0; j < atlas.tile; ++j)
        for (int i = 0; i < atlas.tile; ++i) {
          // barycentric texel centers; the upper half of the tile folds back
          // onto the triangle so every texel stays inside
          double b1 = (i + 0.5) / atlas.tile;
          double b2 = (j + 0.5) / atlas.tile;
          const bool inside = b1 + b2 <= 1.0;
          if (!inside) {
            b1 = 1.0 - b1;
            b2 = 1.0 - b2;
          }
          const Vec3 p = mesh.point_on(atlas.triangles[t], b1, b2);
          const FieldOutput out = field.query(p);
          Vec3 a{out.mu[0], out.mu[1], out.mu[2]};
          double r = out.mu[3], m = out.mu[4];
          if (transform) transform(o, a, r, m);
          const int x = tx + i, y = ty + j;
          atlas.albedo.set_rgb(x, y, a);
          atlas.rough.at(x, y) = float(r);
          atlas.metal.at(x, y) = float(m);
          atlas.texel_position[size_t(y) * w + x] = p;
          atlas.texel_valid[size_t(y) * w + x] = inside ? 1 : 2;  // 2 = mirrored
        }
    }
    atlases.push_back(std::move(atlas));
  }
  return atlases;
}

}  // namespace iif
