#include "drn/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace drn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

}  // namespace

Parameter::Parameter(std::string n, std::vector<int> s, double fill, bool train)
    : name(std::move(n)), shape(std::move(s)), trainable(train) {
  std::size_t count = 1;
  for (int d : shape) count *= static_cast<std::size_t>(d);
  value.assign(count, fill);
  grad.assign(count, 0.0);
}

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

std::size_t count_trainable(const ParamList& params) {
  std::size_t total = 0;
  for (const Parameter* p : params) {
    if (p->trainable) total += p->numel();
  }
  return total;
}

void zero_grads(const ParamList& params) {
  for (Parameter* p : params) p->zero_grad();
}

void init_he(Parameter& p, int fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / std::max(1, fan_in)));
  for (double& v : p.value) v = dist(rng);
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(const std::string& name, int kh, int kw, int in_ch, int out_ch, int stride,
               bool with_bias, Rng& rng)
    : weight(name + ".weight", {kh, kw, in_ch, out_ch}),
      kh_(kh),
      kw_(kw),
      in_(in_ch),
      out_(out_ch),
      stride_(stride),
      has_bias_(with_bias) {
  if (kh <= 0 || kw <= 0 || in_ch <= 0 || out_ch <= 0 || stride <= 0) {
    throw std::invalid_argument("Conv2d " + name + ": bad configuration");
  }
  init_he(weight, kh * kw * in_ch, rng);
  if (with_bias) bias = Parameter(name + ".bias", {out_ch});
}

Shape Conv2d::output_shape(const Shape& in) const {
  const int ph = kh_ / 2;
  const int pw = kw_ / 2;
  return {in.n, (in.h + 2 * ph - kh_) / stride_ + 1, (in.w + 2 * pw - kw_) / stride_ + 1, out_};
}

void Conv2d::im2col(const Tensor& x, int b, std::vector<double>& cols, int ho, int wo) const {
  const int ph = kh_ / 2;
  const int pw = kw_ / 2;
  const int row_len = kh_ * kw_ * in_;
  cols.assign(static_cast<std::size_t>(ho) * wo * row_len, 0.0);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      double* row = cols.data() + (static_cast<std::size_t>(oy) * wo + ox) * row_len;
      for (int ky = 0; ky < kh_; ++ky) {
        const int iy = oy * stride_ + ky - ph;
        if (iy < 0 || iy >= x.h()) continue;
        for (int kx = 0; kx < kw_; ++kx) {
          const int ix = ox * stride_ + kx - pw;
          if (ix < 0 || ix >= x.w()) continue;
          std::copy_n(x.pixel(b, iy, ix), in_, row + (ky * kw_ + kx) * in_);
        }
      }
    }
  }
}

void Conv2d::col2im(const std::vector<double>& cols, Tensor& dx, int b, int ho, int wo) const {
  const int ph = kh_ / 2;
  const int pw = kw_ / 2;
  const int row_len = kh_ * kw_ * in_;
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const double* row = cols.data() + (static_cast<std::size_t>(oy) * wo + ox) * row_len;
      for (int ky = 0; ky < kh_; ++ky) {
        const int iy = oy * stride_ + ky - ph;
        if (iy < 0 || iy >= dx.h()) continue;
        for (int kx = 0; kx < kw_; ++kx) {
          const int ix = ox * stride_ + kx - pw;
          if (ix < 0 || ix >= dx.w()) continue;
          double* dst = dx.pixel(b, iy, ix);
          const double* src = row + (ky * kw_ + kx) * in_;
          for (int c = 0; c < in_; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x) {
  if (x.c() != in_) {
    throw std::invalid_argument(weight.name + ": expected " + std::to_string(in_) +
                                " input channels, got " + std::to_string(x.c()));
  }
  x_ = x;
  const Shape os = output_shape(x.shape());
  Tensor y(os);
  const int rows = os.h * os.w;
  const int row_len = kh_ * kw_ * in_;
  CMapMat w(weight.value.data(), row_len, out_);
  const bool direct = kh_ == 1 && kw_ == 1 && stride_ == 1;
  std::vector<double> cols;
  for (int b = 0; b < x.n(); ++b) {
    MapMat out(y.pixel(b, 0, 0), rows, out_);
    if (direct) {
      out.noalias() = CMapMat(x.pixel(b, 0, 0), rows, in_) * w;
    } else {
      im2col(x, b, cols, os.h, os.w);
      out.noalias() = CMapMat(cols.data(), rows, row_len) * w;
    }
    if (has_bias_) {
      out.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value.data(), out_);
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  const Shape os = output_shape(x_.shape());
  require_shape(dy, os, "Conv2d::backward");
  Tensor dx(x_.shape());
  const int rows = os.h * os.w;
  const int row_len = kh_ * kw_ * in_;
  CMapMat w(weight.value.data(), row_len, out_);
  MapMat dw(weight.grad.data(), row_len, out_);
  const bool direct = kh_ == 1 && kw_ == 1 && stride_ == 1;
  std::vector<double> cols;
  std::vector<double> dcols;
  for (int b = 0; b < x_.n(); ++b) {
    CMapMat g(dy.pixel(b, 0, 0), rows, out_);
    if (has_bias_) {
      Eigen::Map<Eigen::RowVectorXd>(bias.grad.data(), out_) += g.colwise().sum();
    }
    if (direct) {
      CMapMat xin(x_.pixel(b, 0, 0), rows, in_);
      dw.noalias() += xin.transpose() * g;
      MapMat(dx.pixel(b, 0, 0), rows, in_).noalias() = g * w.transpose();
    } else {
      im2col(x_, b, cols, os.h, os.w);
      CMapMat c(cols.data(), rows, row_len);
      dw.noalias() += c.transpose() * g;
      dcols.resize(cols.size());
      MapMat(dcols.data(), rows, row_len).noalias() = g * w.transpose();
      col2im(dcols, dx, b, os.h, os.w);
    }
  }
  return dx;
}

void Conv2d::collect(ParamList& out) {
  out.push_back(&weight);
  if (has_bias_) out.push_back(&bias);
}

// ------------------------------------------------------------- BatchNorm

BatchNorm::BatchNorm(const std::string& name, int channels)
    : gamma(name + ".gamma", {channels}, 1.0),
      beta(name + ".beta", {channels}, 0.0),
      running_mean(name + ".running_mean", {channels}, 0.0, false),
      running_var(name + ".running_var", {channels}, 1.0, false) {}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  const int ch = static_cast<int>(gamma.numel());
  if (x.c() != ch) throw std::invalid_argument(gamma.name + ": channel mismatch");
  mode_ = mode;
  const std::size_t count = x.size() / static_cast<std::size_t>(ch);
  std::vector<double> mean(ch, 0.0), var(ch, 0.0);
  if (mode == Mode::kTrain) {
    for (std::size_t i = 0; i < x.size(); ++i) mean[i % ch] += x[i];
    for (double& m : mean) m /= static_cast<double>(count);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - mean[i % ch];
      var[i % ch] += d * d;
    }
    for (double& v : var) v /= static_cast<double>(count);
    const double unbias = count > 1 ? static_cast<double>(count) / (count - 1) : 1.0;
    for (int c = 0; c < ch; ++c) {
      running_mean.value[c] = (1 - momentum) * running_mean.value[c] + momentum * mean[c];
      running_var.value[c] = (1 - momentum) * running_var.value[c] + momentum * var[c] * unbias;
    }
  } else {
    mean = running_mean.value;
    var = running_var.value;
  }
  inv_std_.resize(ch);
  for (int c = 0; c < ch; ++c) inv_std_[c] = 1.0 / std::sqrt(var[c] + eps);
  xhat_ = Tensor(x.shape());
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const int c = static_cast<int>(i % ch);
    xhat_[i] = (x[i] - mean[c]) * inv_std_[c];
    y[i] = gamma.value[c] * xhat_[i] + beta.value[c];
  }
  return y;
}

Tensor BatchNorm::backward(const Tensor& dy) {
  require_shape(dy, xhat_.shape(), "BatchNorm::backward");
  const int ch = static_cast<int>(gamma.numel());
  const double count = static_cast<double>(dy.size() / ch);
  std::vector<double> sum_dy(ch, 0.0), sum_dy_xhat(ch, 0.0);
  for (std::size_t i = 0; i < dy.size(); ++i) {
    const int c = static_cast<int>(i % ch);
    sum_dy[c] += dy[i];
    sum_dy_xhat[c] += dy[i] * xhat_[i];
  }
  for (int c = 0; c < ch; ++c) {
    beta.grad[c] += sum_dy[c];
    gamma.grad[c] += sum_dy_xhat[c];
  }
  Tensor dx(dy.shape());
  if (mode_ == Mode::kTrain) {
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const int c = static_cast<int>(i % ch);
      const double g = gamma.value[c];
      dx[i] = g * inv_std_[c] *
              (dy[i] - sum_dy[c] / count - xhat_[i] * sum_dy_xhat[c] / count);
    }
  } else {
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const int c = static_cast<int>(i % ch);
      dx[i] = dy[i] * gamma.value[c] * inv_std_[c];
    }
  }
  return dx;
}

void BatchNorm::collect(ParamList& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
  out.push_back(&running_mean);
  out.push_back(&running_var);
}

// ------------------------------------------------------------------ Relu

Tensor Relu::forward(const Tensor& x) {
  y_ = x;
  for (double& v : y_.storage()) v = v > 0 ? v : 0.0;
  return y_;
}

Tensor Relu::backward(const Tensor& dy) const {
  require_shape(dy, y_.shape(), "Relu::backward");
  Tensor dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = y_[i] > 0 ? dy[i] : 0.0;
  return dx;
}

// ------------------------------------------------------------- ConvBlock

ConvBlock::ConvBlock(const std::string& name, int k, int in_ch, int out_ch, int stride, bool norm,
                     bool relu, Rng& rng)
    : conv(name + ".conv", k, k, in_ch, out_ch, stride, !norm, rng),
      norm_(norm),
      relu_on_(relu) {
  if (norm) bn = BatchNorm(name + ".bn", out_ch);
}

Tensor ConvBlock::forward(const Tensor& x, Mode mode) {
  Tensor y = conv.forward(x);
  if (norm_) y = bn.forward(y, mode);
  if (relu_on_) y = relu_.forward(y);
  return y;
}

Tensor ConvBlock::backward(const Tensor& dy) {
  Tensor g = relu_on_ ? relu_.backward(dy) : dy;
  if (norm_) g = bn.backward(g);
  return conv.backward(g);
}

void ConvBlock::collect(ParamList& out) {
  conv.collect(out);
  if (norm_) bn.collect(out);
}

// ---------------------------------------------------------------- helpers

Tensor upsample2x(const Tensor& x) {
  Tensor y(x.n(), x.h() * 2, x.w() * 2, x.c());
  for (int b = 0; b < x.n(); ++b)
    for (int yy = 0; yy < y.h(); ++yy)
      for (int xx = 0; xx < y.w(); ++xx)
        std::copy_n(x.pixel(b, yy / 2, xx / 2), x.c(), y.pixel(b, yy, xx));
  return y;
}

Tensor upsample2x_backward(const Tensor& dy) {
  Tensor dx(dy.n(), dy.h() / 2, dy.w() / 2, dy.c());
  for (int b = 0; b < dy.n(); ++b)
    for (int yy = 0; yy < dy.h(); ++yy)
      for (int xx = 0; xx < dy.w(); ++xx) {
        const double* src = dy.pixel(b, yy, xx);
        double* dst = dx.pixel(b, yy / 2, xx / 2);
        for (int c = 0; c < dy.c(); ++c) dst[c] += src[c];
      }
  return dx;
}

Tensor global_avg_pool(const Tensor& x) {
  Tensor y(x.n(), 1, 1, x.c());
  const double inv = 1.0 / (static_cast<double>(x.h()) * x.w());
  for (int b = 0; b < x.n(); ++b)
    for (int yy = 0; yy < x.h(); ++yy)
      for (int xx = 0; xx < x.w(); ++xx) {
        const double* src = x.pixel(b, yy, xx);
        for (int c = 0; c < x.c(); ++c) y(b, 0, 0, c) += src[c] * inv;
      }
  return y;
}

Tensor global_avg_pool_backward(const Tensor& dy, const Shape& in) {
  Tensor dx(in);
  const double inv = 1.0 / (static_cast<double>(in.h) * in.w);
  for (int b = 0; b < in.n; ++b)
    for (int yy = 0; yy < in.h; ++yy)
      for (int xx = 0; xx < in.w; ++xx) {
        double* dst = dx.pixel(b, yy, xx);
        for (int c = 0; c < in.c; ++c) dst[c] = dy(b, 0, 0, c) * inv;
      }
  return dx;
}

}  // namespace drn
