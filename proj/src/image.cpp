#include "drn/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace drn {

Image::Image(int w, int h, Rgb fill) : width(w), height(h) {
  if (w <= 0 || h <= 0) throw std::invalid_argument("Image: size must be positive");
  pixels.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < pixels.size(); i += 3) {
    pixels[i] = fill[0];
    pixels[i + 1] = fill[1];
    pixels[i + 2] = fill[2];
  }
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  (void)png;
  throw std::runtime_error(std::string("png: ") + msg);
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot open image " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, nullptr);
  png_infop info = png_create_info_struct(png);
  Image img;
  try {
    png_init_io(png, f.get());
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    img = Image(static_cast<int>(png_get_image_width(png, info)),
                static_cast<int>(png_get_image_height(png, info)));
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) rows[y] = img.at(0, y);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  } catch (const std::exception& e) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    FilePtr f(std::fopen(tmp.c_str(), "wb"));
    if (!f) throw std::runtime_error("cannot write image " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, nullptr);
    png_infop info = png_create_info_struct(png);
    try {
      png_init_io(png, f.get());
      png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                   PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
      png_write_info(png, info);
      for (int y = 0; y < image.height; ++y) {
        png_write_row(png, const_cast<png_bytep>(image.at(0, y)));
      }
      png_write_end(png, nullptr);
    } catch (...) {
      png_destroy_write_struct(&png, &info);
      std::filesystem::remove(tmp);
      throw;
    }
    png_destroy_write_struct(&png, &info);
  }
  std::filesystem::rename(tmp, path);
}

bool pixel_in_box(const Septet& box, int x, int y) {
  const double c = std::cos(box.theta), s = std::sin(box.theta);
  const Vec2 ctr = box.center();
  const double px = x + 0.5 - ctr.x, py = y + 0.5 - ctr.y;
  const double u = c * px + s * py;
  const double v = -s * px + c * py;
  return std::abs(u) <= box.w / 2 && std::abs(v) <= box.h / 2;
}

void fill_box(Image& image, const Septet& box, Rgb color) {
  const double r = 0.5 * std::hypot(box.w, box.h) + 1;
  const Vec2 ctr = box.center();
  const int x0 = std::max(0, static_cast<int>(std::floor(ctr.x - r)));
  const int x1 = std::min(image.width - 1, static_cast<int>(std::ceil(ctr.x + r)));
  const int y0 = std::max(0, static_cast<int>(std::floor(ctr.y - r)));
  const int y1 = std::min(image.height - 1, static_cast<int>(std::ceil(ctr.y + r)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (pixel_in_box(box, x, y)) {
        std::uint8_t* p = image.at(x, y);
        p[0] = color[0];
        p[1] = color[1];
        p[2] = color[2];
      }
}

namespace {

void plot(Image& image, int x, int y, Rgb color, int thickness) {
  const int lo = -(thickness - 1) / 2, hi = thickness / 2;
  for (int dy = lo; dy <= hi; ++dy)
    for (int dx = lo; dx <= hi; ++dx)
      if (image.contains(x + dx, y + dy)) {
        std::uint8_t* p = image.at(x + dx, y + dy);
        p[0] = color[0];
        p[1] = color[1];
        p[2] = color[2];
      }
}

}  // namespace

void draw_line(Image& image, Vec2 a, Vec2 b, Rgb color, int thickness) {
  const int steps = static_cast<int>(std::ceil(std::max(std::abs(b.x - a.x), std::abs(b.y - a.y))));
  for (int i = 0; i <= steps; ++i) {
    const double t = steps == 0 ? 0.0 : double(i) / steps;
    plot(image, static_cast<int>(std::floor(a.x + t * (b.x - a.x))),
         static_cast<int>(std::floor(a.y + t * (b.y - a.y))), color, thickness);
  }
}

void draw_polygon(Image& image, const ConvexPolygon& poly, Rgb color, int thickness) {
  for (std::size_t i = 0; i < poly.size(); ++i) {
    draw_line(image, poly[i], poly[(i + 1) % poly.size()], color, thickness);
  }
}

namespace {

// Rows top to bottom, 3 bits each, most significant bit on the left.
const std::array<std::uint8_t, 5>* glyph(char ch) {
  static const std::array<std::uint8_t, 5> digits[10] = {
      {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
      {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7}};
  static const std::array<std::uint8_t, 5> letters[26] = {
      {2, 5, 7, 5, 5}, {6, 5, 6, 5, 6}, {3, 4, 4, 4, 3}, {6, 5, 5, 5, 6}, {7, 4, 6, 4, 7},
      {7, 4, 6, 4, 4}, {3, 4, 5, 5, 3}, {5, 5, 7, 5, 5}, {7, 2, 2, 2, 7}, {1, 1, 1, 5, 2},
      {5, 5, 6, 5, 5}, {4, 4, 4, 4, 7}, {5, 7, 7, 5, 5}, {6, 5, 5, 5, 5}, {2, 5, 5, 5, 2},
      {6, 5, 6, 4, 4}, {2, 5, 5, 6, 3}, {6, 5, 6, 5, 5}, {3, 4, 2, 1, 6}, {7, 2, 2, 2, 2},
      {5, 5, 5, 5, 7}, {5, 5, 5, 5, 2}, {5, 5, 7, 7, 5}, {5, 5, 2, 5, 5}, {5, 5, 2, 2, 2},
      {7, 1, 2, 4, 7}};
  static const std::array<std::uint8_t, 5> dot = {0, 0, 0, 0, 2};
  static const std::array<std::uint8_t, 5> dash = {0, 0, 7, 0, 0};
  static const std::array<std::uint8_t, 5> colon = {0, 2, 0, 2, 0};
  if (ch >= '0' && ch <= '9') return &digits[ch - '0'];
  if (ch >= 'a' && ch <= 'z') return &letters[ch - 'a'];
  if (ch >= 'A' && ch <= 'Z') return &letters[ch - 'A'];
  if (ch == '.') return &dot;
  if (ch == '-') return &dash;
  if (ch == ':') return &colon;
  return nullptr;
}

}  // namespace

void draw_text(Image& image, int x, int y, const std::string& text, Rgb color, int scale) {
  for (char ch : text) {
    if (const auto* g = glyph(ch)) {
      for (int row = 0; row < 5; ++row)
        for (int col = 0; col < 3; ++col)
          if ((*g)[row] & (4 >> col))
            for (int sy = 0; sy < scale; ++sy)
              for (int sx = 0; sx < scale; ++sx)
                plot(image, x + col * scale + sx, y + row * scale + sy, color, 1);
    }
    x += 4 * scale;
  }
}

Tensor to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw std::invalid_argument("to_tensor: no images");
  const int w = images[0]->width, h = images[0]->height;
  Tensor t(static_cast<int>(images.size()), h, w, 3);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& im = *images[b];
    if (im.width != w || im.height != h) {
      throw std::invalid_argument("to_tensor: images differ in size");
    }
    double* dst = t.pixel(static_cast<int>(b), 0, 0);
    for (std::size_t i = 0; i < im.pixels.size(); ++i) dst[i] = im.pixels[i] / 127.5 - 1.0;
  }
  return t;
}

std::uint8_t clamp_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

Rgb mean_border(const Image& img) {
  double sum[3] = {0, 0, 0};
  long n = 0;
  const auto add = [&](int x, int y) {
    const std::uint8_t* p = img.at(x, y);
    for (int c = 0; c < 3; ++c) sum[c] += p[c];
    ++n;
  };
  for (int x = 0; x < img.width; ++x) {
    add(x, 0);
    add(x, img.height - 1);
  }
  for (int y = 1; y + 1 < img.height; ++y) {
    add(0, y);
    add(img.width - 1, y);
  }
  return {clamp_byte(sum[0] / n), clamp_byte(sum[1] / n), clamp_byte(sum[2] / n)};
}

bool sample_bilinear(const Image& img, double x, double y, double out[3]) {
  const double fx = x - 0.5, fy = y - 0.5;
  if (fx < -0.5 || fy < -0.5 || fx > img.width - 0.5 || fy > img.height - 0.5) return false;
  const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
  const double ax = fx - x0, ay = fy - y0;
  for (int c = 0; c < 3; ++c) out[c] = 0.0;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      const double wgt = (dx ? ax : 1 - ax) * (dy ? ay : 1 - ay);
      if (wgt == 0.0) continue;
      const int sx = std::clamp(x0 + dx, 0, img.width - 1);
      const int sy = std::clamp(y0 + dy, 0, img.height - 1);
      const std::uint8_t* p = img.at(sx, sy);
      for (int c = 0; c < 3; ++c) out[c] += wgt * p[c];
    }
  return true;
}

}  // namespace drn
