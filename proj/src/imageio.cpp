#include "iif/imageio.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace iif {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void fail(const std::string& what, const fs::path& path) {
  throw std::runtime_error(what + ": " + path.string());
}

bool host_is_little_endian() {
  const uint16_t probe = 1;
  return *reinterpret_cast<const uint8_t*>(&probe) == 1;
}

void byteswap_floats(std::vector<float>& v) {
  for (float& f : v) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    u = __builtin_bswap32(u);
    std::memcpy(&f, &u, 4);
  }
}

}  // namespace

ImageF read_pfm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("pfm: cannot open", path);
  std::string magic;
  in >> magic;
  int channels;
  if (magic == "PF") {
    channels = 3;
  } else if (magic == "Pf") {
    channels = 1;
  } else {
    fail("pfm: malformed header (bad magic)", path);
  }
  int w = 0, h = 0;
  double scale = 0;
  in >> w >> h >> scale;
  if (!in || w <= 0 || h <= 0 || scale == 0) fail("pfm: malformed header", path);
  in.get();  // single whitespace byte before the payload
  ImageF img(w, h, channels);
  std::vector<float> raw(img.data.size());
  in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size() * 4));
  if (!in || size_t(in.gcount()) != raw.size() * 4) fail("pfm: truncated payload", path);
  const bool file_le = scale < 0;
  if (file_le != host_is_little_endian()) byteswap_floats(raw);
  for (const float f : raw)
    if (!std::isfinite(f)) fail("pfm: non-finite payload value", path);
  // PFM rows are bottom-up.
  for (int y = 0; y < h; ++y) {
    std::memcpy(&img.data[size_t(y) * w * channels], &raw[size_t(h - 1 - y) * w * channels],
                size_t(w) * channels * 4);
  }
  return img;
}

void write_pfm(const ImageF& image, const fs::path& path) {
  if (image.channels != 1 && image.channels != 3)
    throw std::runtime_error("pfm: only 1 or 3 channels supported");
  for (const float f : image.data)
    if (!std::isfinite(f)) fail("pfm: refusing to write non-finite value", path);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("pfm: cannot open for writing", path);
  out << (image.channels == 3 ? "PF" : "Pf") << "\n"
      << image.width << " " << image.height << "\n"
      << (host_is_little_endian() ? "-1.0" : "1.0") << "\n";
  for (int y = image.height - 1; y >= 0; --y) {
    out.write(reinterpret_cast<const char*>(&image.data[size_t(y) * image.width * image.channels]),
              std::streamsize(size_t(image.width) * image.channels * 4));
  }
  if (!out) fail("pfm: write failed", path);
}

ImageF read_png(const fs::path& path) {
  FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) fail("png: cannot open", path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    fail("png: decode error", path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = int(png_get_image_width(png, info));
  const int h = int(png_get_image_height(png, info));
  const int ch = int(png_get_channels(png, info));
  if (ch != 1 && ch != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    fail("png: unsupported channel count", path);
  }
  std::vector<png_byte> row(size_t(w) * ch);
  ImageF img(w, h, ch);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (size_t i = 0; i < row.size(); ++i)
      img.data[size_t(y) * w * ch + i] = float(row[i]) / 255.0f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

void write_png(const ImageF& image, const fs::path& path) {
  if (image.channels != 1 && image.channels != 3)
    throw std::runtime_error("png: only 1 or 3 channels supported");
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) fail("png: cannot open for writing", path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    fail("png: encode error", path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(image.width), png_uint_32(image.height), 8,
               image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(size_t(image.width) * image.channels);
  for (int y = 0; y < image.height; ++y) {
    for (size_t i = 0; i < row.size(); ++i) {
      const float v = image.data[size_t(y) * image.width * image.channels + i];
      row[i] = png_byte(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Mesh read_obj_with_objects(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail("obj: cannot open", path);
  Mesh mesh;
  int current_object = -1;  // becomes 0 on the first face if no statement seen
  bool any_object_stmt = false;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 v;
      ls >> v.x >> v.y >> v.z;
      mesh.vertices.push_back(v);
    } else if (tag == "o" || tag == "g") {
      ++current_object;
      any_object_stmt = true;
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ls >> tok) {
        // accept v, v/vt, v//vn, v/vt/vn
        const int raw = std::stoi(tok.substr(0, tok.find('/')));
        const int v = raw > 0 ? raw - 1 : int(mesh.vertices.size()) + raw;
        if (v < 0 || v >= int(mesh.vertices.size()))
          throw std::runtime_error("obj: face references missing vertex at line " +
                                   std::to_string(line_no) + " in " + path.string());
        idx.push_back(v);
      }
      if (idx.size() < 3)
        throw std::runtime_error("obj: face with fewer than 3 vertices at line " +
                                 std::to_string(line_no));
      const int obj = any_object_stmt ? std::max(current_object, 0) : 0;
      for (size_t i = 1; i + 1 < idx.size(); ++i)
        mesh.triangles.push_back({{idx[0], idx[int(i)], idx[int(i) + 1]}, obj});
    }
  }
  mesh.compute_normals();
  return mesh;
}

void write_obj_with_objects(const Mesh& mesh, const fs::path& path) {
  std::ofstream out(path);
  if (!out) fail("obj: cannot open for writing", path);
  out.precision(12);
  for (const Vec3& v : mesh.vertices) out << "v " << v.x << " " << v.y << " " << v.z << "\n";
  int current = -1;
  for (const Triangle& t : mesh.triangles) {
    if (t.object_id != current) {
      current = t.object_id;
      out << "o object_" << current << "\n";
    }
    out << "f " << t.v[0] + 1 << " " << t.v[1] + 1 << " " << t.v[2] + 1 << "\n";
  }
}

std::vector<Camera> read_cameras(const fs::path& path, int width, int height) {
  std::ifstream in(path);
  if (!in) fail("cameras: cannot open", path);
  std::vector<Camera> cams;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Vec3 p, l, u;
    double fov_deg;
    if (!(ls >> p.x >> p.y >> p.z >> l.x >> l.y >> l.z >> u.x >> u.y >> u.z >> fov_deg))
      fail("cameras: malformed line", path);
    cams.push_back(Camera::look_at(p, l, u, fov_deg * M_PI / 180.0, width, height));
  }
  return cams;
}

void write_cameras(const std::vector<Camera>& cams, const fs::path& path) {
  std::ofstream out(path);
  if (!out) fail("cameras: cannot open for writing", path);
  out.precision(12);
  for (const Camera& c : cams) {
    const Vec3 look = c.position + c.forward;
    out << c.position.x << " " << c.position.y << " " << c.position.z << " "
        << look.x << " " << look.y << " " << look.z << " "
        << c.up.x << " " << c.up.y << " " << c.up.z << " "
        << c.fov_y * 180.0 / M_PI << "\n";
  }
}

namespace {

std::string view_dir_name(int view_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "view_%03d", view_id);
  return buf;
}

int clamp_map(ImageF& img) {
  int warnings = 0;
  for (float& f : img.data) {
    if (f < 0.0f || f > 1.0f) {
      f = std::clamp(f, 0.0f, 1.0f);
      ++warnings;
    }
  }
  return warnings;
}

}  // namespace

PredictionSet load_prediction_set(const fs::path& dir, int view_id) {
  const fs::path vdir = dir / view_dir_name(view_id);
  if (!fs::exists(vdir)) fail("predictions: missing view directory", vdir);
  PredictionSet set;
  set.view_id = view_id;
  set.instance = read_pfm(vdir / "instance.pfm");
  int k = 0;
  while (fs::exists(vdir / ("pred_" + std::to_string(k)))) ++k;
  if (k == 0) fail("predictions: no candidates", vdir);
  // candidate indices must be contiguous from 0
  for (const auto& entry : fs::directory_iterator(vdir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("pred_", 0) == 0) {
      const int idx = std::stoi(name.substr(5));
      if (idx >= k) fail("predictions: non-contiguous candidates", entry.path());
    }
  }
  set.k = k;
  for (int i = 0; i < k; ++i) {
    const fs::path pdir = vdir / ("pred_" + std::to_string(i));
    ImageF a = read_pfm(pdir / "albedo.pfm");
    ImageF r = read_pfm(pdir / "rough.pfm");
    ImageF m = read_pfm(pdir / "metal.pfm");
    if (!a.same_shape(ImageF(set.instance.width, set.instance.height, 3)) ||
        !r.same_shape(set.instance) || !m.same_shape(set.instance))
      fail("predictions: resolution mismatch", pdir);
    set.clamp_warnings += clamp_map(a) + clamp_map(r) + clamp_map(m);
    set.albedo.push_back(std::move(a));
    set.rough.push_back(std::move(r));
    set.metal.push_back(std::move(m));
  }
  return set;
}

void save_prediction_set(const PredictionSet& set, const fs::path& dir) {
  const fs::path vdir = dir / view_dir_name(set.view_id);
  fs::create_directories(vdir);
  write_pfm(set.instance, vdir / "instance.pfm");
  for (int i = 0; i < set.k; ++i) {
    const fs::path pdir = vdir / ("pred_" + std::to_string(i));
    fs::create_directories(pdir);
    write_pfm(set.albedo[i], pdir / "albedo.pfm");
    write_pfm(set.rough[i], pdir / "rough.pfm");
    write_pfm(set.metal[i], pdir / "metal.pfm");
  }
}

namespace {

struct ConfigKey {
  enum Kind { kInt, kDouble } kind;
  void* ptr;
};

std::map<std::string, ConfigKey> config_registry(PipelineConfig& c) {
  return {
      {"fusion.k", {ConfigKey::kInt, &c.fusion_k}},
      {"fusion.batch", {ConfigKey::kInt, &c.fusion_batch}},
      {"fusion.lr", {ConfigKey::kDouble, &c.fusion_lr}},
      {"fusion.epochs", {ConfigKey::kInt, &c.fusion_epochs}},
      {"fusion.w_data", {ConfigKey::kDouble, &c.fusion_w_data}},
      {"fusion.w_label", {ConfigKey::kDouble, &c.fusion_w_label}},
      {"fusion.w_reg", {ConfigKey::kDouble, &c.fusion_w_reg}},
      {"fusion.tau", {ConfigKey::kDouble, &c.fusion_tau}},
      {"fusion.anneal_factor", {ConfigKey::kDouble, &c.fusion_anneal_factor}},
      {"fusion.anneal_every", {ConfigKey::kInt, &c.fusion_anneal_every}},
      {"fusion.lr_decay", {ConfigKey::kDouble, &c.fusion_lr_decay}},
      {"fusion.lr_decay_epochs", {ConfigKey::kInt, &c.fusion_lr_decay_epochs}},
      {"field.levels", {ConfigKey::kInt, &c.field_levels}},
      {"field.features", {ConfigKey::kInt, &c.field_features}},
      {"field.hashmap_log2", {ConfigKey::kInt, &c.field_hashmap_log2}},
      {"field.base_res", {ConfigKey::kInt, &c.field_base_res}},
      {"field.top_res", {ConfigKey::kInt, &c.field_top_res}},
      {"field.hidden", {ConfigKey::kInt, &c.field_hidden}},
      {"field.b_min", {ConfigKey::kDouble, &c.field_b_min}},
      {"render.spp", {ConfigKey::kInt, &c.render_spp}},
      {"render.max_bounces", {ConfigKey::kInt, &c.render_max_bounces}},
      {"light.quantile", {ConfigKey::kDouble, &c.light_quantile}},
      {"light.env_quantile", {ConfigKey::kDouble, &c.light_env_quantile}},
      {"light.lr", {ConfigKey::kDouble, &c.light_lr}},
      {"light.batch", {ConfigKey::kInt, &c.light_batch}},
      {"light.epochs", {ConfigKey::kInt, &c.light_epochs}},
      {"light.spp", {ConfigKey::kInt, &c.light_spp}},
      {"light.prune_after", {ConfigKey::kInt, &c.light_prune_after}},
      {"light.prune_fraction", {ConfigKey::kDouble, &c.light_prune_fraction}},
      {"cache.spp_diffuse", {ConfigKey::kInt, &c.cache_spp_diffuse}},
      {"cache.spp_specular", {ConfigKey::kInt, &c.cache_spp_specular}},
      {"brdf.epochs", {ConfigKey::kInt, &c.brdf_epochs}},
      {"brdf.batch", {ConfigKey::kInt, &c.brdf_batch}},
      {"brdf.lr", {ConfigKey::kDouble, &c.brdf_lr}},
      {"brdf.lr_decay", {ConfigKey::kDouble, &c.brdf_lr_decay}},
      {"brdf.crf_lr", {ConfigKey::kDouble, &c.brdf_crf_lr}},
      {"brdf.w_rough", {ConfigKey::kDouble, &c.brdf_w_rough}},
      {"brdf.w_metal", {ConfigKey::kDouble, &c.brdf_w_metal}},
  };
}

void set_config_value(const std::string& key, const ConfigKey& slot, const std::string& value) {
  try {
    size_t pos = 0;
    if (slot.kind == ConfigKey::kInt) {
      const long v = std::stol(value, &pos);
      if (pos != value.size()) throw std::invalid_argument("trailing");
      *static_cast<int*>(slot.ptr) = int(v);
    } else {
      const double v = std::stod(value, &pos);
      if (pos != value.size()) throw std::invalid_argument("trailing");
      *static_cast<double*>(slot.ptr) = v;
    }
  } catch (const std::exception&) {
    throw std::runtime_error("config: type mismatch for key '" + key + "': " + value);
  }
}

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail("config: cannot open", path);
  PipelineConfig cfg;
  auto registry = config_registry(cfg);
  std::map<std::string, bool> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: expected 'key = value' at line " + std::to_string(line_no));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = registry.find(key);
    if (it == registry.end()) throw std::runtime_error("config: unknown key '" + key + "'");
    if (seen[key]) throw std::runtime_error("config: duplicate key '" + key + "'");
    seen[key] = true;
    set_config_value(key, it->second, value);
  }
  return cfg;
}

void apply_config_override(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  auto registry = config_registry(cfg);
  auto it = registry.find(key);
  if (it == registry.end()) throw std::runtime_error("config: unknown key '" + key + "'");
  set_config_value(key, it->second, value);
}

void dump_config(const PipelineConfig& cfg, const fs::path& path) {
  std::ofstream out(path);
  if (!out) fail("config: cannot open for writing", path);
  out.precision(17);
  PipelineConfig copy = cfg;
  for (const auto& [key, slot] : config_registry(copy)) {
    out << key << " = ";
    if (slot.kind == ConfigKey::kInt)
      out << *static_cast<int*>(slot.ptr);
    else
      out << *static_cast<double*>(slot.ptr);
    out << "\n";
  }
}

}  // namespace iif
