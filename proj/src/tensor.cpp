#include "drn/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace drn {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(h) + "," + std::to_string(w) + "," +
         std::to_string(c) + ")";
}

Tensor::Tensor(int n, int h, int w, int c, double fill) : Tensor(Shape{n, h, w, c}, fill) {}

Tensor::Tensor(Shape shape, double fill) : shape_(shape) {
  if (shape.n < 0 || shape.h < 0 || shape.w < 0 || shape.c < 0) {
    throw std::invalid_argument("Tensor: negative dimension " + shape.str());
  }
  data_.assign(shape.numel(), fill);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& o) {
  require_shape(o, shape_, "Tensor::operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Tensor Tensor::slice_batch(int b) const {
  Tensor out(1, shape_.h, shape_.w, shape_.c);
  const std::size_t per = static_cast<std::size_t>(shape_.h) * shape_.w * shape_.c;
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(b * per), per, out.data_.begin());
  return out;
}

void Tensor::set_batch(int b, const Tensor& single) {
  require_shape(single, Shape{1, shape_.h, shape_.w, shape_.c}, "Tensor::set_batch");
  const std::size_t per = static_cast<std::size_t>(shape_.h) * shape_.w * shape_.c;
  std::copy(single.data_.begin(), single.data_.end(),
            data_.begin() + static_cast<std::ptrdiff_t>(b * per));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_shape(b, a.shape(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace drn
