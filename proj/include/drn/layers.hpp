#pragma once

// Trainable building blocks with hand-written backward passes.
//
// Each layer caches what its backward pass needs during forward(), so one
// layer instance serves one forward/backward pair at a time. Parameter
// gradients accumulate until zero_grad().

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "drn/tensor.hpp"

namespace drn {

enum class Mode { kTrain, kInfer };

using Rng = std::mt19937_64;

struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;
  // Buffers such as running statistics are saved but not optimised.
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> s, double fill = 0.0, bool train = true);
  std::size_t numel() const { return value.size(); }
  void zero_grad();
};

using ParamList = std::vector<Parameter*>;

std::size_t count_trainable(const ParamList& params);
void zero_grads(const ParamList& params);

// He-normal initialisation with the given fan-in.
void init_he(Parameter& p, int fan_in, Rng& rng);

// 2-D convolution, NHWC, "same"-style padding (k / 2), optional stride.
// Weights are laid out (kh, kw, in, out).
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int kh, int kw, int in_ch, int out_ch, int stride, bool bias,
         Rng& rng);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);
  void collect(ParamList& out);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int stride() const { return stride_; }
  Shape output_shape(const Shape& in) const;

  Parameter weight;
  Parameter bias;

 private:
  void im2col(const Tensor& x, int b, std::vector<double>& cols, int ho, int wo) const;
  void col2im(const std::vector<double>& cols, Tensor& dx, int b, int ho, int wo) const;

  int kh_ = 1, kw_ = 1, in_ = 0, out_ = 0, stride_ = 1;
  bool has_bias_ = false;
  Tensor x_;
};

// Per-channel batch normalisation over (n, h, w).
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(const std::string& name, int channels);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);
  void collect(ParamList& out);

  Parameter gamma, beta, running_mean, running_var;
  double eps = 1e-5;
  double momentum = 0.1;

 private:
  Mode mode_ = Mode::kInfer;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

class Relu {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;

 private:
  Tensor y_;
};

// Conv -> [BatchNorm] -> [ReLU].
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(const std::string& name, int k, int in_ch, int out_ch, int stride, bool norm,
            bool relu, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);
  void collect(ParamList& out);

  Conv2d conv;
  BatchNorm bn;

 private:
  bool norm_ = true;
  bool relu_on_ = true;
  Relu relu_;
};

Tensor upsample2x(const Tensor& x);
Tensor upsample2x_backward(const Tensor& dy);

// Mean over (h, w) per (n, c); output shape (n, 1, 1, c).
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& dy, const Shape& in);

}  // namespace drn
