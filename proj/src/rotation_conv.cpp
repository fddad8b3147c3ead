#include "drn/rotation_conv.hpp"

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

namespace drn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// The four neighbours of a fractional point; weight 0 for out-of-map cells.
struct Bilinear {
  int x0, y0;
  double fx, fy;
  bool valid[4];  // (x0,y0) (x0+1,y0) (x0,y0+1) (x0+1,y0+1)

  Bilinear(double x, double y, int h, int w) {
    const double flx = std::floor(x);
    const double fly = std::floor(y);
    x0 = static_cast<int>(flx);
    y0 = static_cast<int>(fly);
    fx = x - flx;
    fy = y - fly;
    const bool x0in = x0 >= 0 && x0 < w;
    const bool x1in = x0 + 1 >= 0 && x0 + 1 < w;
    const bool y0in = y0 >= 0 && y0 < h;
    const bool y1in = y0 + 1 >= 0 && y0 + 1 < h;
    valid[0] = x0in && y0in;
    valid[1] = x1in && y0in;
    valid[2] = x0in && y1in;
    valid[3] = x1in && y1in;
  }

  double weight(int k) const {
    switch (k) {
      case 0: return (1 - fx) * (1 - fy);
      case 1: return fx * (1 - fy);
      case 2: return (1 - fx) * fy;
      default: return fx * fy;
    }
  }
  int cx(int k) const { return x0 + (k & 1); }
  int cy(int k) const { return y0 + (k >> 1); }
};

void check_inputs(const FeatureMap& xc, const ConvParams& params, const AngleField& angles,
                  const KernelGrid& grid) {
  if (params.weight.shape.size() != 4 || params.weight.shape[0] != grid.rows ||
      params.weight.shape[1] != grid.cols || params.weight.shape[2] != xc.c()) {
    throw std::invalid_argument("rcl: kernel weights do not match grid/input channels");
  }
  require_shape(angles.theta, Shape{xc.n(), xc.h(), xc.w(), 1}, "rcl angle field");
  if (!angles.theta.all_finite()) throw std::invalid_argument("rcl: non-finite angle");
}

// Rows are output pixels, columns are (tap, in_channel).
void sample_cols(const FeatureMap& xc, const AngleField& angles, const KernelGrid& grid, int b,
                 std::vector<double>& cols) {
  const int h = xc.h(), w = xc.w(), cin = xc.c();
  const int taps = grid.taps();
  const std::size_t row_len = static_cast<std::size_t>(taps) * cin;
  cols.assign(static_cast<std::size_t>(h) * w * row_len, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Mat2 r = rotation_matrix(angles.theta(b, y, x, 0));
      double* row = cols.data() + (static_cast<std::size_t>(y) * w + x) * row_len;
      for (int t = 0; t < taps; ++t) {
        const Vec2 p = r * Vec2{double(grid.offsets[t].dx), double(grid.offsets[t].dy)};
        const Bilinear bl(x + p.x, y + p.y, h, w);
        double* dst = row + static_cast<std::size_t>(t) * cin;
        for (int k = 0; k < 4; ++k) {
          if (!bl.valid[k]) continue;
          const double wk = bl.weight(k);
          if (wk == 0.0) continue;
          const double* src = xc.pixel(b, bl.cy(k), bl.cx(k));
          for (int c = 0; c < cin; ++c) dst[c] += wk * src[c];
        }
      }
    }
  }
}

}  // namespace

KernelGrid make_grid(int rows, int cols) {
  const bool ok = (rows == 3 && cols == 3) || (rows == 1 && cols == 3) || (rows == 3 && cols == 1);
  if (!ok) {
    throw std::invalid_argument("make_grid: unsupported kernel shape (" + std::to_string(rows) +
                                "," + std::to_string(cols) + ")");
  }
  KernelGrid g;
  g.rows = rows;
  g.cols = cols;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) g.offsets.push_back({c - cols / 2, r - rows / 2});
  return g;
}

std::vector<Vec2> rotation_offsets(double theta, const KernelGrid& grid) {
  const Mat2 r = rotation_matrix(theta);
  std::vector<Vec2> out;
  out.reserve(grid.offsets.size());
  for (const auto& o : grid.offsets) {
    const Vec2 p{double(o.dx), double(o.dy)};
    out.push_back(r * p - p);
  }
  return out;
}

std::vector<double> bilinear_sample(const FeatureMap& fm, Vec2 point, int batch) {
  std::vector<double> out(fm.c(), 0.0);
  const Bilinear bl(point.x, point.y, fm.h(), fm.w());
  for (int k = 0; k < 4; ++k) {
    if (!bl.valid[k]) continue;
    const double wk = bl.weight(k);
    const double* src = fm.pixel(batch, bl.cy(k), bl.cx(k));
    for (int c = 0; c < fm.c(); ++c) out[c] += wk * src[c];
  }
  return out;
}

ConvParams::ConvParams(const std::string& name, const KernelGrid& grid, int in_ch, int out_ch)
    : weight(name + ".weight", {grid.rows, grid.cols, in_ch, out_ch}),
      bias(name + ".bias", {out_ch}) {}

FeatureMap rcl_forward(const FeatureMap& xc, const ConvParams& params, const AngleField& angles,
                       const KernelGrid& grid) {
  check_inputs(xc, params, angles, grid);
  const int cout = params.out_channels();
  const int rows = xc.h() * xc.w();
  const int row_len = grid.taps() * xc.c();
  FeatureMap y(xc.n(), xc.h(), xc.w(), cout);
  CMapMat wmat(params.weight.value.data(), row_len, cout);
  const Eigen::Map<const Eigen::RowVectorXd> bias(params.bias.value.data(), cout);
  std::vector<double> cols;
  for (int b = 0; b < xc.n(); ++b) {
    sample_cols(xc, angles, grid, b, cols);
    MapMat out(y.pixel(b, 0, 0), rows, cout);
    out.noalias() = CMapMat(cols.data(), rows, row_len) * wmat;
    out.rowwise() += bias;
  }
  return y;
}

RclGrads rcl_backward(const FeatureMap& xc, ConvParams& params, const AngleField& angles,
                      const KernelGrid& grid, const Tensor& dy) {
  check_inputs(xc, params, angles, grid);
  const int h = xc.h(), w = xc.w(), cin = xc.c();
  const int cout = params.out_channels();
  const int rows = h * w;
  const int taps = grid.taps();
  const int row_len = taps * cin;
  require_shape(dy, Shape{xc.n(), h, w, cout}, "rcl_backward");

  RclGrads g{Tensor(xc.shape()), Tensor(angles.theta.shape())};
  const bool angle_grad = angles.source == AngleSource::kPredicted;
  CMapMat wmat(params.weight.value.data(), row_len, cout);
  MapMat dw(params.weight.grad.data(), row_len, cout);
  Eigen::Map<Eigen::RowVectorXd> db(params.bias.grad.data(), cout);
  std::vector<double> cols, dcols(static_cast<std::size_t>(rows) * row_len);

  for (int b = 0; b < xc.n(); ++b) {
    sample_cols(xc, angles, grid, b, cols);
    CMapMat gy(dy.pixel(b, 0, 0), rows, cout);
    dw.noalias() += CMapMat(cols.data(), rows, row_len).transpose() * gy;
    db += gy.colwise().sum();
    MapMat(dcols.data(), rows, row_len).noalias() = gy * wmat.transpose();

    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double theta = angles.theta(b, y, x, 0);
        const double cs = std::cos(theta), sn = std::sin(theta);
        const double* drow = dcols.data() + (static_cast<std::size_t>(y) * w + x) * row_len;
        double dtheta = 0.0;
        for (int t = 0; t < taps; ++t) {
          const double px = grid.offsets[t].dx, py = grid.offsets[t].dy;
          const double sx = x + cs * px - sn * py;
          const double sy = y + sn * px + cs * py;
          const Bilinear bl(sx, sy, h, w);
          const double* dcol = drow + static_cast<std::size_t>(t) * cin;
          // d(value)/d(sx), d(value)/d(sy) weights per neighbour.
          const double gx[4] = {-(1 - bl.fy), (1 - bl.fy), -bl.fy, bl.fy};
          const double gyw[4] = {-(1 - bl.fx), -bl.fx, (1 - bl.fx), bl.fx};
          double dsx = 0.0, dsy = 0.0;
          for (int k = 0; k < 4; ++k) {
            if (!bl.valid[k]) continue;
            const double wk = bl.weight(k);
            double* dst = g.dx.pixel(b, bl.cy(k), bl.cx(k));
            const double* src = xc.pixel(b, bl.cy(k), bl.cx(k));
            double dot_val = 0.0;
            for (int c = 0; c < cin; ++c) {
              dst[c] += wk * dcol[c];
              dot_val += dcol[c] * src[c];
            }
            dsx += gx[k] * dot_val;
            dsy += gyw[k] * dot_val;
          }
          // d(sx)/dtheta = -sin*px - cos*py, d(sy)/dtheta = cos*px - sin*py.
          dtheta += dsx * (-sn * px - cs * py) + dsy * (cs * px - sn * py);
        }
        if (angle_grad) g.dtheta(b, y, x, 0) = dtheta;
      }
    }
  }
  return g;
}

RotationConv::RotationConv(const std::string& name, const KernelGrid& grid, int in_ch, int out_ch,
                           Rng& rng)
    : params(name, grid, in_ch, out_ch), grid_(grid) {
  init_he(params.weight, grid.taps() * in_ch, rng);
}

Tensor RotationConv::forward(const Tensor& x, const AngleField& angles) {
  x_ = x;
  angles_ = angles;
  return rcl_forward(x, params, angles, grid_);
}

RclGrads RotationConv::backward(const Tensor& dy) {
  return rcl_backward(x_, params, angles_, grid_, dy);
}

void RotationConv::collect(ParamList& out) {
  out.push_back(&params.weight);
  out.push_back(&params.bias);
}

}  // namespace drn
