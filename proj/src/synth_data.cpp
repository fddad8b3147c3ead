#include "drn/synth_data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace drn {

using nlohmann::json;

namespace {

constexpr double kDeg = kPi / 180.0;

const Rgb kPalette[] = {{200, 70, 60},  {60, 140, 210}, {230, 190, 60}, {80, 170, 90},
                        {170, 90, 190}, {240, 130, 40}, {90, 200, 200}, {220, 220, 220}};

Rgb jitter(Rgb c, int amount, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(-amount, amount);
  const int shift = d(rng);
  return {clamp_byte(c[0] + shift), clamp_byte(c[1] + shift), clamp_byte(c[2] + shift)};
}

Rgb scale(Rgb c, double f) { return {clamp_byte(c[0] * f), clamp_byte(c[1] * f), clamp_byte(c[2] * f)}; }

bool inside_canvas(const Septet& box, double w, double h) {
  for (const Vec2& p : corners_from_septet(box).ring()) {
    if (p.x < 0 || p.y < 0 || p.x > w || p.y > h) return false;
  }
  return true;
}

// Body, darker rim and a lighter band along the width axis.
void render_object(Image& image, const Septet& box, Rgb color) {
  fill_box(image, box, scale(color, 0.55));
  Septet body = box;
  body.w = std::max(box.w - 3.0, 1.0);
  body.h = std::max(box.h - 3.0, 1.0);
  fill_box(image, body, color);
  Septet band = body;
  band.h = std::max(body.h / 4, 1.0);
  fill_box(image, band, scale(color, 1.25));
}

}  // namespace

void SceneConfig::validate() const {
  const auto fail = [](const std::string& m) { throw std::invalid_argument("SceneConfig: " + m); };
  if (width <= 0 || height <= 0) fail("image size must be positive");
  if (min_objects < 0 || max_objects < min_objects) fail("object count range is empty");
  if (!(min_size > 0) || max_size < min_size) fail("size range is empty");
  if (!(min_angle_deg <= max_angle_deg)) fail("angle range is empty");
  if (!(max_iou >= 0 && max_iou < 1)) fail("max_iou must lie in [0, 1)");
  if (num_classes <= 0) fail("num_classes must be positive");
  if (max_size * std::sqrt(2.0) > std::min(width, height)) fail("objects larger than the image");
  if (attempts_per_object <= 0) fail("attempts_per_object must be positive");
}

Scene generate_scene(const SceneConfig& config, std::uint64_t seed, const std::string& image_id) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count_dist(config.min_objects, config.max_objects);
  std::uniform_real_distribution<double> size_dist(config.min_size, config.max_size);
  std::uniform_real_distribution<double> angle_dist(config.min_angle_deg, config.max_angle_deg);
  std::uniform_real_distribution<double> x_dist(0.0, config.width), y_dist(0.0, config.height);
  std::uniform_int_distribution<int> class_dist(0, config.num_classes - 1);
  const int count = count_dist(rng);

  Scene scene;
  SceneAnnotation& ann = scene.annotation;
  ann.image_id = image_id;
  ann.width = config.width;
  ann.height = config.height;
  ann.provenance = {seed, kGeneratorVersion, 0.0};

  std::vector<double> radius;
  for (int i = 0; i < count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < config.attempts_per_object && !placed; ++attempt) {
      ObjectAnnotation obj;
      obj.box.w = size_dist(rng);
      obj.box.h = size_dist(rng);
      obj.box.theta = angle_dist(rng) * kDeg;
      obj.box.cx = x_dist(rng);
      obj.box.cy = y_dist(rng);
      if (!inside_canvas(obj.box, config.width, config.height)) continue;
      const double r = 0.5 * std::hypot(obj.box.w, obj.box.h);
      bool ok = true;
      for (std::size_t j = 0; j < ann.objects.size() && ok; ++j) {
        const Septet& other = ann.objects[j].box;
        if (std::hypot(other.cx - obj.box.cx, other.cy - obj.box.cy) >= r + radius[j]) continue;
        ok = rotated_iou(obj.box, other) <= config.max_iou;
      }
      if (!ok) continue;
      obj.class_id = class_dist(rng);
      ann.objects.push_back(obj);
      radius.push_back(r);
      placed = true;
    }
    if (!placed) {
      throw std::runtime_error("generate_scene: could not place object " + std::to_string(i + 1) +
                               " of " + std::to_string(count) + " within " +
                               std::to_string(config.attempts_per_object) +
                               " attempts under max pairwise rotated IoU " +
                               std::to_string(config.max_iou) +
                               "; lower the object count or size range");
    }
  }

  // Background: vertical gradient plus per-pixel noise.
  scene.image = Image(config.width, config.height);
  std::uniform_real_distribution<double> noise(-config.noise, config.noise);
  std::uniform_real_distribution<double> base_dist(70, 120);
  const double top = base_dist(rng), bottom = base_dist(rng);
  for (int y = 0; y < config.height; ++y) {
    const double g = top + (bottom - top) * y / std::max(1, config.height - 1);
    for (int x = 0; x < config.width; ++x) {
      std::uint8_t* p = scene.image.at(x, y);
      for (int c = 0; c < 3; ++c) p[c] = clamp_byte(g + noise(rng) + (c == 2 ? 8 : 0));
    }
  }
  for (const ObjectAnnotation& obj : ann.objects) {
    const Rgb color = jitter(kPalette[obj.class_id % 8], 25, rng);
    render_object(scene.image, obj.box, color);
  }
  return scene;
}


Scene rotate_scene(const Scene& scene, double degrees) {
  if (!std::isfinite(degrees)) throw std::invalid_argument("rotate_scene: non-finite angle");
  const Image& src = scene.image;
  const double phi = degrees * kDeg;
  const double c = std::abs(std::cos(phi)), s = std::abs(std::sin(phi));
  const auto extent = [](double v) { return static_cast<int>(std::ceil(v - 1e-9)); };
  const int nw = extent(src.width * c + src.height * s);
  const int nh = extent(src.width * s + src.height * c);
  const Vec2 cin{src.width / 2.0, src.height / 2.0}, cout{nw / 2.0, nh / 2.0};
  const Mat2 fwd = rotation_matrix(phi), inv = rotation_matrix(-phi);

  Scene out;
  out.image = Image(nw, nh, mean_border(src));
  double px[3];
  for (int y = 0; y < nh; ++y)
    for (int x = 0; x < nw; ++x) {
      const Vec2 p = inv * (Vec2{x + 0.5, y + 0.5} - cout) + cin;
      if (!sample_bilinear(src, p.x, p.y, px)) continue;
      std::uint8_t* dst = out.image.at(x, y);
      for (int k = 0; k < 3; ++k) dst[k] = clamp_byte(px[k]);
    }

  out.annotation = scene.annotation;
  SceneAnnotation& ann = out.annotation;
  const std::string stem = std::filesystem::path(ann.image_id).stem().string();
  std::ostringstream id;
  id << stem << "_rot" << (degrees < 0 ? "m" : "p") << std::abs(std::lround(degrees)) << ".png";
  ann.image_id = id.str();
  ann.width = nw;
  ann.height = nh;
  ann.provenance.rotation_deg = scene.annotation.provenance.rotation_deg + degrees;
  std::vector<ObjectAnnotation> kept;
  for (ObjectAnnotation obj : ann.objects) {
    const Vec2 ctr = fwd * (obj.box.center() - cin) + cout;
    obj.box.cx = ctr.x;
    obj.box.cy = ctr.y;
    obj.box.dx = obj.box.dy = 0.0;
    obj.box.theta = canonical_angle(obj.box.theta + phi);
    // Expansion keeps every box on the canvas; anything else is a bug.
    if (!(ctr.x >= 0 && ctr.y >= 0 && ctr.x < nw && ctr.y < nh)) {
      throw std::logic_error("rotate_scene: box center left the expanded canvas");
    }
    kept.push_back(obj);
  }
  ann.objects = std::move(kept);
  return out;
}

std::vector<Scene> rotate_dataset(const std::vector<Scene>& scenes,
                                  const std::vector<double>& degrees, bool keep_originals) {
  std::vector<Scene> out;
  out.reserve(scenes.size() * (degrees.size() + (keep_originals ? 1 : 0)));
  for (const Scene& s : scenes) {
    if (keep_originals) out.push_back(s);
    for (double d : degrees) out.push_back(rotate_scene(s, d));
  }
  return out;
}

Scene letterbox(const Scene& scene, int width, int height) {
  const Image& src = scene.image;
  const double f = std::min(double(width) / src.width, double(height) / src.height);
  Scene out;
  out.image = Image(width, height, mean_border(src));
  const int sw = std::min(width, static_cast<int>(std::lround(src.width * f)));
  const int sh = std::min(height, static_cast<int>(std::lround(src.height * f)));
  double px[3];
  for (int y = 0; y < sh; ++y)
    for (int x = 0; x < sw; ++x) {
      if (!sample_bilinear(src, (x + 0.5) / f, (y + 0.5) / f, px)) continue;
      std::uint8_t* dst = out.image.at(x, y);
      for (int k = 0; k < 3; ++k) dst[k] = clamp_byte(px[k]);
    }
  out.annotation = scene.annotation;
  out.annotation.width = width;
  out.annotation.height = height;
  for (ObjectAnnotation& obj : out.annotation.objects) {
    obj.box.cx *= f;
    obj.box.cy *= f;
    obj.box.dx *= f;
    obj.box.dy *= f;
    obj.box.w *= f;
    obj.box.h *= f;
  }
  return out;
}

// ------------------------------------------------------------------- I/O

namespace {

json to_json(const SceneAnnotation& s) {
  json objs = json::array();
  for (const ObjectAnnotation& o : s.objects) {
    const Vec2 c = o.box.center();
    objs.push_back({{"class", o.class_id},
                    {"cx", c.x},
                    {"cy", c.y},
                    {"w", o.box.w},
                    {"h", o.box.h},
                    {"theta_deg", o.box.theta / kDeg}});
  }
  return {{"image", s.image_id},
          {"width", s.width},
          {"height", s.height},
          {"objects", objs},
          {"provenance",
           {{"seed", s.provenance.seed},
            {"generator_version", s.provenance.generator_version},
            {"rotation_deg", s.provenance.rotation_deg}}}};
}

template <class T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw std::runtime_error(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::runtime_error(where + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace

AnnotationReadResult read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open annotations " + path.string());
  AnnotationReadResult result;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(where + ": parse error: " + e.what());
    }
    SceneAnnotation s;
    s.image_id = field<std::string>(j, "image", where);
    s.width = field<int>(j, "width", where);
    s.height = field<int>(j, "height", where);
    if (s.width <= 0 || s.height <= 0) {
      throw std::runtime_error(where + ": image size must be positive");
    }
    if (j.contains("provenance")) {
      const json& p = j["provenance"];
      s.provenance.seed = p.value("seed", std::uint64_t{0});
      s.provenance.generator_version = p.value("generator_version", std::string{});
      s.provenance.rotation_deg = p.value("rotation_deg", 0.0);
    }
    const json objs = field<json>(j, "objects", where);
    if (!objs.is_array()) throw std::runtime_error(where + ": 'objects' must be an array");
    for (std::size_t i = 0; i < objs.size(); ++i) {
      const std::string ow = where + " (" + s.image_id + ") object " + std::to_string(i);
      ObjectAnnotation o;
      o.class_id = field<int>(objs[i], "class", ow);
      o.box.cx = field<double>(objs[i], "cx", ow);
      o.box.cy = field<double>(objs[i], "cy", ow);
      o.box.w = field<double>(objs[i], "w", ow);
      o.box.h = field<double>(objs[i], "h", ow);
      const double deg = field<double>(objs[i], "theta_deg", ow);
      if (o.class_id < 0) throw std::runtime_error(ow + ": class must be non-negative");
      for (double v : {o.box.cx, o.box.cy, o.box.w, o.box.h, deg}) {
        if (!std::isfinite(v)) throw std::runtime_error(ow + ": non-finite value");
      }
      if (!(o.box.w > 0)) throw std::runtime_error(ow + ": w must be positive, got " + std::to_string(o.box.w));
      if (!(o.box.h > 0)) throw std::runtime_error(ow + ": h must be positive, got " + std::to_string(o.box.h));
      o.box.theta = deg * kDeg;
      if (deg < -90.0 || deg >= 90.0) {
        o.box.theta = canonical_angle(o.box.theta);
        result.warnings.push_back(ow + ": theta_deg " + std::to_string(deg) + " wrapped to " +
                                  std::to_string(o.box.theta / kDeg));
      }
      s.objects.push_back(o);
    }
    result.scenes.push_back(std::move(s));
  }
  return result;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_annotations(const std::filesystem::path& path,
                       const std::vector<SceneAnnotation>& scenes) {
  std::string text;
  for (const SceneAnnotation& s : scenes) text += to_json(s).dump() + "\n";
  write_file_atomic(path, text);
}

void write_dataset(const std::filesystem::path& dir, const std::vector<Scene>& scenes) {
  std::filesystem::create_directories(dir / "images");
  std::vector<SceneAnnotation> anns;
  for (const Scene& s : scenes) {
    write_png(dir / "images" / s.annotation.image_id, s.image);
    anns.push_back(s.annotation);
  }
  write_annotations(dir / "annotations.jsonl", anns);
}

std::vector<Scene> load_dataset(const std::filesystem::path& dir) {
  AnnotationReadResult r = read_annotations(dir / "annotations.jsonl");
  std::vector<Scene> out;
  for (SceneAnnotation& a : r.scenes) {
    Scene s;
    s.image = read_png(dir / "images" / a.image_id);
    if (s.image.width != a.width || s.image.height != a.height) {
      throw std::runtime_error(a.image_id + ": image size does not match its annotation");
    }
    s.annotation = std::move(a);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace drn
