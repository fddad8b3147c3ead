#pragma once

// 8-bit RGB raster, PNG I/O and the few drawing primitives the generator
// and the demo overlay need.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "drn/geometry.hpp"
#include "drn/tensor.hpp"

namespace drn {

using Rgb = std::array<std::uint8_t, 3>;

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  Image() = default;
  Image(int w, int h, Rgb fill = {0, 0, 0});

  std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* at(int x, int y) const {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  bool operator==(const Image&) const = default;
};

Image read_png(const std::filesystem::path& path);
// Written to a temporary sibling and renamed into place.
void write_png(const std::filesystem::path& path, const Image& image);

// Pixel (x, y) covers [x, x+1) x [y, y+1); a pixel belongs to the polygon
// when its center does.
bool pixel_in_box(const Septet& box, int x, int y);
void fill_box(Image& image, const Septet& box, Rgb color);
void draw_polygon(Image& image, const ConvexPolygon& poly, Rgb color, int thickness = 1);
void draw_line(Image& image, Vec2 a, Vec2 b, Rgb color, int thickness = 1);
// 3x5 bitmap glyphs for digits, '.', '-', ':' and lower-case letters.
void draw_text(Image& image, int x, int y, const std::string& text, Rgb color, int scale = 1);

std::uint8_t clamp_byte(double v);
Rgb mean_border(const Image& image);
// Bilinear sample at continuous coordinates (pixel centers at +0.5); false
// when the point falls outside the source.
bool sample_bilinear(const Image& image, double x, double y, double out[3]);

// Channels scaled to [-1, 1]; images must share one size.
Tensor to_tensor(const std::vector<const Image*>& images);

}  // namespace drn
