#include "drn/dynamic_heads.hpp"

#include <cmath>
#include <stdexcept>

namespace drn {

void HeadConfig::validate() const {
  if (in_channels <= 0 || mid_channels <= 0 || out_channels <= 0) {
    throw std::invalid_argument("HeadConfig: channel counts must be positive");
  }
  if (kernel_size <= 0 || kernel_size % 2 == 0) {
    throw std::invalid_argument("HeadConfig: kernel size must be odd");
  }
  if (groups < 0 || group_count() > mid_channels || mid_channels % group_count() != 0) {
    throw std::invalid_argument("HeadConfig: groups must divide mid_channels");
  }
  if (!(epsilon_c >= 0) || !(epsilon_r >= 0)) {
    throw std::invalid_argument("HeadConfig: refinement factors must be non-negative");
  }
}

// -------------------------------------------------------- FilterGenerator

FilterGenerator::FilterGenerator(const std::string& name, int in_channels, int kernel_size,
                                 int groups, Rng& rng)
    : weight(name + ".weight", {in_channels, kernel_size * kernel_size * groups}),
      bias(name + ".bias", {kernel_size * kernel_size * groups}),
      in_(in_channels),
      k_(kernel_size),
      groups_(groups) {
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(double(in_channels)));
  for (double& v : weight.value) v = dist(rng);
}

DynamicKernel FilterGenerator::forward(const Tensor& f_in) {
  if (f_in.c() != in_) {
    throw std::invalid_argument("FilterGenerator: expected " + std::to_string(in_) +
                                " channels, got " + std::to_string(f_in.c()));
  }
  in_shape_ = f_in.shape();
  pooled_ = global_avg_pool(f_in);
  const int outs = k_ * k_ * groups_;
  DynamicKernel k{Tensor(f_in.n(), k_, k_, groups_)};
  for (int b = 0; b < f_in.n(); ++b) {
    double* dst = k.weights.pixel(b, 0, 0);
    for (int o = 0; o < outs; ++o) dst[o] = bias.value[o];
    for (int i = 0; i < in_; ++i) {
      const double p = pooled_(b, 0, 0, i);
      const double* row = weight.value.data() + static_cast<std::size_t>(i) * outs;
      for (int o = 0; o < outs; ++o) dst[o] += p * row[o];
    }
  }
  return k;
}

Tensor FilterGenerator::backward(const DynamicKernel& dkernel) {
  const int outs = k_ * k_ * groups_;
  Tensor dpooled(in_shape_.n, 1, 1, in_);
  for (int b = 0; b < in_shape_.n; ++b) {
    const double* g = dkernel.weights.pixel(b, 0, 0);
    for (int o = 0; o < outs; ++o) bias.grad[o] += g[o];
    for (int i = 0; i < in_; ++i) {
      const double p = pooled_(b, 0, 0, i);
      double* grow = weight.grad.data() + static_cast<std::size_t>(i) * outs;
      const double* row = weight.value.data() + static_cast<std::size_t>(i) * outs;
      double acc = 0.0;
      for (int o = 0; o < outs; ++o) {
        grow[o] += p * g[o];
        acc += row[o] * g[o];
      }
      dpooled(b, 0, 0, i) = acc;
    }
  }
  return global_avg_pool_backward(dpooled, in_shape_);
}

void FilterGenerator::collect(ParamList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

DynamicKernel generate_filter(const FeatureMap& f_in, FilterGenerator& generator) {
  return generator.forward(f_in);
}

// ----------------------------------------------------------- refinement

namespace {

void check_kernel(const FeatureMap& f_mid, const DynamicKernel& kernel) {
  const Tensor& w = kernel.weights;
  if (w.n() != f_mid.n() || w.h() != w.w() || w.h() % 2 == 0 || w.c() <= 0 ||
      f_mid.c() % w.c() != 0) {
    throw std::invalid_argument("refine_feature: kernel " + w.shape().str() +
                                " incompatible with feature " + f_mid.shape().str());
  }
}

}  // namespace

FeatureMap refine_feature(const FeatureMap& f_mid, const DynamicKernel& kernel) {
  check_kernel(f_mid, kernel);
  const int k = kernel.size(), r = k / 2, ch = f_mid.c();
  const int per_group = ch / kernel.groups();
  FeatureMap out(f_mid.shape());
  for (int b = 0; b < f_mid.n(); ++b)
    for (int y = 0; y < f_mid.h(); ++y)
      for (int x = 0; x < f_mid.w(); ++x) {
        double* dst = out.pixel(b, y, x);
        for (int ky = 0; ky < k; ++ky) {
          const int iy = y + ky - r;
          if (iy < 0 || iy >= f_mid.h()) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = x + kx - r;
            if (ix < 0 || ix >= f_mid.w()) continue;
            const double* src = f_mid.pixel(b, iy, ix);
            const double* kw = kernel.weights.pixel(b, ky, kx);
            for (int c = 0; c < ch; ++c) dst[c] += kw[c / per_group] * src[c];
          }
        }
      }
  return out;
}

RefineGrads refine_feature_backward(const FeatureMap& f_mid, const DynamicKernel& kernel,
                                    const Tensor& dy) {
  check_kernel(f_mid, kernel);
  require_shape(dy, f_mid.shape(), "refine_feature_backward");
  const int k = kernel.size(), r = k / 2, ch = f_mid.c();
  const int per_group = ch / kernel.groups();
  RefineGrads g{Tensor(f_mid.shape()), DynamicKernel{Tensor(kernel.weights.shape())}};
  for (int b = 0; b < f_mid.n(); ++b)
    for (int y = 0; y < f_mid.h(); ++y)
      for (int x = 0; x < f_mid.w(); ++x) {
        const double* gy = dy.pixel(b, y, x);
        for (int ky = 0; ky < k; ++ky) {
          const int iy = y + ky - r;
          if (iy < 0 || iy >= f_mid.h()) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = x + kx - r;
            if (ix < 0 || ix >= f_mid.w()) continue;
            const double* src = f_mid.pixel(b, iy, ix);
            double* dsrc = g.dmid.pixel(b, iy, ix);
            const double* kw = kernel.weights.pixel(b, ky, kx);
            double* dkw = g.dkernel.weights.pixel(b, ky, kx);
            for (int c = 0; c < ch; ++c) {
              dsrc[c] += kw[c / per_group] * gy[c];
              dkw[c / per_group] += src[c] * gy[c];
            }
          }
        }
      }
  return g;
}

// ------------------------------------------------------------ PlainHead

PlainHead::PlainHead(const std::string& name, const HeadConfig& config, Rng& rng)
    : base(name + ".base", 3, config.in_channels, config.mid_channels, 1, true, true, rng),
      out(name + ".out", 1, 1, config.mid_channels, config.out_channels, 1, true, rng) {
  config.validate();
  for (double& b : out.bias.value) b = config.out_bias;
}

Tensor PlainHead::forward(const Tensor& f_in, Mode mode) {
  return out.forward(base.forward(f_in, mode));
}

Tensor PlainHead::backward(const Tensor& dy) { return base.backward(out.backward(dy)); }

void PlainHead::collect(ParamList& params) {
  base.collect(params);
  out.collect(params);
}

// ----------------------------------------------------------------- DrhC

DrhC::DrhC(const std::string& name, const HeadConfig& config, Rng& rng)
    : base(name + ".base", 3, config.in_channels, config.mid_channels, 1, true, true, rng),
      generator(name + ".generator", config.in_channels, config.kernel_size, config.group_count(),
                rng),
      classifier(name + ".classifier", 1, 1, config.mid_channels, config.out_channels, 1, true,
                 rng),
      config_(config) {
  config.validate();
  for (double& b : classifier.bias.value) b = config.out_bias;
}

Tensor DrhC::forward(const Tensor& f_in, Mode mode) {
  f_mid_ = base.forward(f_in, mode);
  kernel_ = generator.forward(f_in);
  f_delta_ = refine_feature(f_mid_, kernel_);
  const int ch = f_mid_.c();
  const std::size_t npix = f_mid_.size() / ch;
  unit_ = Tensor(f_mid_.shape());
  refined_ = f_mid_;
  norms_.assign(npix, 0.0);
  for (std::size_t p = 0; p < npix; ++p) {
    const double* d = f_delta_.data() + p * ch;
    double sq = 0.0;
    for (int c = 0; c < ch; ++c) sq += d[c] * d[c];
    const double nrm = std::sqrt(sq);
    norms_[p] = nrm;
    if (nrm < config_.zero_norm_tolerance) continue;
    for (int c = 0; c < ch; ++c) {
      unit_[p * ch + c] = d[c] / nrm;
      refined_[p * ch + c] = (1.0 + config_.epsilon_c * unit_[p * ch + c]) * f_mid_[p * ch + c];
    }
  }
  return classifier.forward(refined_);
}

Tensor DrhC::backward(const Tensor& dy) {
  const Tensor drefined = classifier.backward(dy);
  const int ch = f_mid_.c();
  const std::size_t npix = f_mid_.size() / ch;
  Tensor dmid(f_mid_.shape());
  Tensor ddelta(f_mid_.shape());
  const double eps = config_.epsilon_c;
  for (std::size_t p = 0; p < npix; ++p) {
    const std::size_t o = p * ch;
    if (norms_[p] < config_.zero_norm_tolerance) {
      for (int c = 0; c < ch; ++c) dmid[o + c] = drefined[o + c];
      continue;
    }
    // du = eps * dR * F_mid; dF_d = (du - u <u, du>) / |F_d|.
    double udu = 0.0;
    for (int c = 0; c < ch; ++c) {
      dmid[o + c] = drefined[o + c] * (1.0 + eps * unit_[o + c]);
      udu += unit_[o + c] * eps * drefined[o + c] * f_mid_[o + c];
    }
    for (int c = 0; c < ch; ++c) {
      const double du = eps * drefined[o + c] * f_mid_[o + c];
      ddelta[o + c] = (du - unit_[o + c] * udu) / norms_[p];
    }
  }
  RefineGrads rg = refine_feature_backward(f_mid_, kernel_, ddelta);
  dmid += rg.dmid;
  Tensor dx = base.backward(dmid);
  dx += generator.backward(rg.dkernel);
  return dx;
}

void DrhC::collect(ParamList& out) {
  base.collect(out);
  generator.collect(out);
  classifier.collect(out);
}

// ----------------------------------------------------------------- DrhR

DrhR::DrhR(const std::string& name, const HeadConfig& config, Rng& rng)
    : base(name + ".base", 3, config.in_channels, config.mid_channels, 1, true, true, rng),
      regressor(name + ".regressor", 1, 1, config.mid_channels, config.out_channels, 1, true, rng),
      generator(name + ".generator", config.in_channels, config.kernel_size, config.group_count(),
                rng),
      projection(name + ".projection", 1, 1, config.mid_channels, config.out_channels, 1, true,
                 rng),
      config_(config) {
  config.validate();
  for (double& b : regressor.bias.value) b = config.out_bias;
}

Tensor DrhR::forward(const Tensor& f_in, Mode mode) {
  f_mid_ = base.forward(f_in, mode);
  h_b_ = regressor.forward(f_mid_);
  kernel_ = generator.forward(f_in);
  f_delta_ = refine_feature(f_mid_, kernel_);
  h_delta_ = projection.forward(f_delta_);
  tanh_ = Tensor(h_b_.shape());
  Tensor out(h_b_.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    tanh_[i] = std::tanh(h_delta_[i]);
    out[i] = (1.0 + config_.epsilon_r * tanh_[i]) * h_b_[i];
  }
  return out;
}

Tensor DrhR::backward(const Tensor& dy) {
  require_shape(dy, h_b_.shape(), "DrhR::backward");
  const double eps = config_.epsilon_r;
  Tensor dhb(dy.shape()), dhd(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) {
    dhb[i] = dy[i] * (1.0 + eps * tanh_[i]);
    dhd[i] = dy[i] * h_b_[i] * eps * (1.0 - tanh_[i] * tanh_[i]);
  }
  const Tensor ddelta = projection.backward(dhd);
  RefineGrads rg = refine_feature_backward(f_mid_, kernel_, ddelta);
  Tensor dmid = regressor.backward(dhb);
  dmid += rg.dmid;
  Tensor dx = base.backward(dmid);
  dx += generator.backward(rg.dkernel);
  return dx;
}

void DrhR::collect(ParamList& out) {
  base.collect(out);
  regressor.collect(out);
  generator.collect(out);
  projection.collect(out);
}

}  // namespace drn
