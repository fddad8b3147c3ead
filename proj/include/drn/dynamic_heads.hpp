#pragma once

// Prediction heads. PlainHead is the static Conv-BN-ReLU + 1x1 head; DrhC
// and DrhR refine their output with a kernel generated per example from
// the pooled input feature.
//
//   DrhC:  H = C((1 + eps_c * u) * F_mid),  u = F_d / |F_d| per location
//   DrhR:  H = (1 + eps_r * tanh(H_d)) * H_b
//
// where F_d = F_mid (*) K and K = G(F_in) is the example-wise kernel.

#include <memory>
#include <string>

#include "drn/layers.hpp"

namespace drn {

struct HeadConfig {
  int in_channels = 64;
  int mid_channels = 64;
  int out_channels = 1;
  int kernel_size = 3;
  // Channel groups sharing one k x k kernel; 0 means one per channel.
  int groups = 0;
  double epsilon_c = 0.1;
  double epsilon_r = 0.1;
  double zero_norm_tolerance = 1e-8;
  double out_bias = 0.0;

  int group_count() const { return groups == 0 ? mid_channels : groups; }
  void validate() const;
};

// Per-example kernels, shape (n, k, k, groups).
struct DynamicKernel {
  Tensor weights;
  int size() const { return weights.h(); }
  int groups() const { return weights.c(); }
};

// Global average pooling followed by one affine map to k*k*groups values.
class FilterGenerator {
 public:
  FilterGenerator() = default;
  FilterGenerator(const std::string& name, int in_channels, int kernel_size, int groups, Rng& rng);

  DynamicKernel forward(const Tensor& f_in);
  // Returns the gradient with respect to f_in.
  Tensor backward(const DynamicKernel& dkernel);
  void collect(ParamList& out);

  int in_channels() const { return in_; }
  int kernel_size() const { return k_; }
  int groups() const { return groups_; }

  Parameter weight;  // (in, k*k*groups)
  Parameter bias;    // (k*k*groups)

 private:
  int in_ = 0, k_ = 3, groups_ = 1;
  Shape in_shape_;
  Tensor pooled_;
};

DynamicKernel generate_filter(const FeatureMap& f_in, FilterGenerator& generator);

// Grouped convolution of f_mid with the example's own kernel; stride 1,
// zero padding, spatial size preserved.
FeatureMap refine_feature(const FeatureMap& f_mid, const DynamicKernel& kernel);

struct RefineGrads {
  Tensor dmid;
  DynamicKernel dkernel;
};
RefineGrads refine_feature_backward(const FeatureMap& f_mid, const DynamicKernel& kernel,
                                    const Tensor& dy);

class Head {
 public:
  virtual ~Head() = default;
  virtual Tensor forward(const Tensor& f_in, Mode mode) = 0;
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual void collect(ParamList& out) = 0;
};

class PlainHead : public Head {
 public:
  PlainHead(const std::string& name, const HeadConfig& config, Rng& rng);

  Tensor forward(const Tensor& f_in, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect(ParamList& out) override;

  ConvBlock base;
  Conv2d out;
};

class DrhC : public Head {
 public:
  DrhC(const std::string& name, const HeadConfig& config, Rng& rng);

  Tensor forward(const Tensor& f_in, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect(ParamList& out) override;

  const HeadConfig& config() const { return config_; }
  HeadConfig& mutable_config() { return config_; }
  const Tensor& f_mid() const { return f_mid_; }
  const Tensor& f_delta() const { return f_delta_; }
  const Tensor& unit_delta() const { return unit_; }
  const Tensor& refined() const { return refined_; }
  const DynamicKernel& kernel() const { return kernel_; }

  ConvBlock base;
  FilterGenerator generator;
  Conv2d classifier;

 private:
  HeadConfig config_;
  DynamicKernel kernel_;
  Tensor f_mid_, f_delta_, unit_, refined_;
  std::vector<double> norms_;
};

class DrhR : public Head {
 public:
  DrhR(const std::string& name, const HeadConfig& config, Rng& rng);

  Tensor forward(const Tensor& f_in, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect(ParamList& out) override;

  const HeadConfig& config() const { return config_; }
  HeadConfig& mutable_config() { return config_; }
  const Tensor& h_base() const { return h_b_; }
  const Tensor& h_delta() const { return h_delta_; }

  ConvBlock base;
  Conv2d regressor;
  FilterGenerator generator;
  Conv2d projection;

 private:
  HeadConfig config_;
  DynamicKernel kernel_;
  Tensor f_mid_, f_delta_, h_b_, h_delta_, tanh_;
};

}  // namespace drn
