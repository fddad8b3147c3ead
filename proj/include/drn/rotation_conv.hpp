#pragma once

// Rotation convolution: a convolution whose sampling grid is rotated at
// every output location by that location's angle. With grid point p and
// angle t the tap samples x_c(p0 + M(t) p), i.e. the regular point plus the
// offset M(t) p - p, using bilinear interpolation with zero padding.

#include <string>
#include <vector>

#include "drn/geometry.hpp"
#include "drn/layers.hpp"
#include "drn/tensor.hpp"

namespace drn {

struct GridOffset {
  int dx = 0;  // column
  int dy = 0;  // row
  bool operator==(const GridOffset&) const = default;
};

struct KernelGrid {
  int rows = 3;
  int cols = 3;
  // Row-major enumeration of (dx, dy) offsets centred on (0, 0).
  std::vector<GridOffset> offsets;

  int taps() const { return rows * cols; }
};

// Supported shapes: (3,3), (1,3), (3,1).
KernelGrid make_grid(int rows, int cols);

std::vector<Vec2> rotation_offsets(double theta, const KernelGrid& grid);

// Per-channel bilinear interpolation of image `batch` at (x, y) = (column,
// row). Cells outside the map read as zero.
std::vector<double> bilinear_sample(const FeatureMap& fm, Vec2 point, int batch = 0);

enum class AngleSource { kTarget, kPredicted };

struct AngleField {
  Tensor theta;  // (n, h, w, 1), radians
  AngleSource source = AngleSource::kPredicted;
};

// Weights laid out (rows, cols, in, out) plus a per-output bias.
struct ConvParams {
  Parameter weight;
  Parameter bias;

  ConvParams() = default;
  ConvParams(const std::string& name, const KernelGrid& grid, int in_ch, int out_ch);
  int in_channels() const { return weight.shape.at(2); }
  int out_channels() const { return weight.shape.at(3); }
};

struct RclGrads {
  Tensor dx;      // same shape as the input
  Tensor dtheta;  // same shape as the angle field; zero for target angles
};

FeatureMap rcl_forward(const FeatureMap& xc, const ConvParams& params, const AngleField& angles,
                       const KernelGrid& grid);

// Accumulates weight/bias gradients into params and returns input and
// angle gradients.
RclGrads rcl_backward(const FeatureMap& xc, ConvParams& params, const AngleField& angles,
                      const KernelGrid& grid, const Tensor& dy);

// Stateful wrapper used inside networks.
class RotationConv {
 public:
  RotationConv() = default;
  RotationConv(const std::string& name, const KernelGrid& grid, int in_ch, int out_ch, Rng& rng);

  Tensor forward(const Tensor& x, const AngleField& angles);
  RclGrads backward(const Tensor& dy);
  void collect(ParamList& out);

  const KernelGrid& grid() const { return grid_; }
  ConvParams params;

 private:
  KernelGrid grid_;
  Tensor x_;
  AngleField angles_;
};

}  // namespace drn
