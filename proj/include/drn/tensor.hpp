#pragma once

// Dense NHWC tensor of doubles. A FeatureMap is a Tensor; batches stack
// along the leading dimension and single maps use n == 1.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace drn {

struct Shape {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * h * w * c;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int h, int w, int c, double fill = 0.0);
  explicit Tensor(Shape shape, double fill = 0.0);

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  int c() const { return shape_.c; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(int b, int y, int x, int ch) const {
    return ((static_cast<std::size_t>(b) * shape_.h + y) * shape_.w + x) * shape_.c + ch;
  }
  double& operator()(int b, int y, int x, int ch) { return data_[index(b, y, x, ch)]; }
  double operator()(int b, int y, int x, int ch) const { return data_[index(b, y, x, ch)]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  // Pointer to the first channel of pixel (b, y, x).
  double* pixel(int b, int y, int x) { return data_.data() + index(b, y, x, 0); }
  const double* pixel(int b, int y, int x) const { return data_.data() + index(b, y, x, 0); }

  void fill(double v);
  Tensor& operator+=(const Tensor& o);
  Tensor slice_batch(int b) const;
  void set_batch(int b, const Tensor& single);
  bool all_finite() const;
  double max_abs() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

using FeatureMap = Tensor;

inline void require_shape(const Tensor& t, const Shape& s, const char* what) {
  if (!(t.shape() == s)) {
    throw std::invalid_argument(std::string(what) + ": expected shape " + s.str() + ", got " +
                                t.shape().str());
  }
}

// Largest absolute elementwise difference; throws on shape mismatch.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace drn
