#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <string>
#include <vector>

#include "cmalign/error.hpp"

namespace cmalign {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

inline int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

// Dense row-major tensor of doubles. All library math happens in double;
// the on-disk dump format is 32-bit (see io.hpp).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    for (int d : shape_) require(d >= 1, ErrorKind::dimension, "tensor dimension must be >= 1, got shape ", shape_str(shape_));
    v_.assign(static_cast<size_t>(shape_size(shape_)), 0.0);
  }
  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), v_(std::move(values)) {
    require(static_cast<int64_t>(v_.size()) == shape_size(shape_), ErrorKind::dimension,
            "value count ", v_.size(), " does not match shape ", shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double value) {
    Tensor t(std::move(s));
    for (double& x : t.v_) x = value;
    return t;
  }
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(v_.size()); }
  bool empty() const { return v_.empty(); }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::vector<double>& values() { return v_; }
  const std::vector<double>& values() const { return v_; }

  double& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

  double& at(int i, int j) { return v_[static_cast<size_t>(i) * shape_[1] + j]; }
  double at(int i, int j) const { return v_[static_cast<size_t>(i) * shape_[1] + j]; }
  double& at(int i, int j, int k) { return v_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k]; }
  double at(int i, int j, int k) const { return v_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  Tensor reshaped(Shape s) const {
    require(shape_size(s) == size(), ErrorKind::dimension, "cannot reshape ", shape_str(shape_), " to ", shape_str(s));
    return Tensor(std::move(s), v_);
  }

 private:
  Shape shape_;
  std::vector<double> v_;
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const double* pa = a.data();
  const double* pb = b.data();
  for (int64_t i = 0; i < a.size(); ++i) {
    if (std::memcmp(&pa[i], &pb[i], sizeof(double)) != 0) return false;
  }
  return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorKind::dimension, "shape mismatch: ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace cmalign
