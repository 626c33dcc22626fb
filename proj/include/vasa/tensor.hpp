#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace vasa {

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

// Dense row-major tensor of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), d_(shape_numel(shape_), 0.0) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), d_(std::move(data)) {
    require(static_cast<int64_t>(d_.size()) == shape_numel(shape_), "tensor data/shape mismatch");
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double v) {
    Tensor t(std::move(s));
    std::fill(t.d_.begin(), t.d_.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(i); }
  int64_t numel() const { return static_cast<int64_t>(d_.size()); }
  bool empty() const { return d_.empty(); }

  double* data() { return d_.data(); }
  const double* data() const { return d_.data(); }
  std::vector<double>& vec() { return d_; }
  const std::vector<double>& vec() const { return d_; }

  double& operator[](int64_t i) { return d_[i]; }
  double operator[](int64_t i) const { return d_[i]; }

  double& at(int64_t i) { return d_[i]; }
  double& at(int64_t i, int64_t j) { return d_[i * shape_[1] + j]; }
  double& at(int64_t i, int64_t j, int64_t k) { return d_[(i * shape_[1] + j) * shape_[2] + k]; }
  double& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return d_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(int64_t i) const { return d_[i]; }
  double at(int64_t i, int64_t j) const { return d_[i * shape_[1] + j]; }
  double at(int64_t i, int64_t j, int64_t k) const { return d_[(i * shape_[1] + j) * shape_[2] + k]; }
  double at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return d_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(Shape s) const {
    require(shape_numel(s) == numel(), "reshape numel mismatch " + shape_str(shape_) + " -> " + shape_str(s));
    return Tensor(std::move(s), d_);
  }

  void fill(double v) { std::fill(d_.begin(), d_.end(), v); }
  void zero() { fill(0.0); }

  void add_(const Tensor& o) {
    require(same_shape(o), "add_ shape mismatch");
    for (int64_t i = 0; i < numel(); ++i) d_[i] += o.d_[i];
  }
  void sub_(const Tensor& o) {
    require(same_shape(o), "sub_ shape mismatch");
    for (int64_t i = 0; i < numel(); ++i) d_[i] -= o.d_[i];
  }
  void scale_(double a) {
    for (double& v : d_) v *= a;
  }
  void axpy_(double a, const Tensor& o) {
    require(same_shape(o), "axpy_ shape mismatch");
    for (int64_t i = 0; i < numel(); ++i) d_[i] += a * o.d_[i];
  }

  double sum() const { return std::accumulate(d_.begin(), d_.end(), 0.0); }
  double mean() const { return empty() ? 0.0 : sum() / static_cast<double>(numel()); }
  double min() const;
  double max() const;
  double dot(const Tensor& o) const {
    require(same_shape(o), "dot shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < numel(); ++i) s += d_[i] * o.d_[i];
    return s;
  }
  double norm2() const { return dot(*this); }

 private:
  Shape shape_;
  std::vector<double> d_;
};

inline double Tensor::min() const {
  require(!empty(), "min of empty tensor");
  double m = d_[0];
  for (double v : d_) m = v < m ? v : m;
  return m;
}

inline double Tensor::max() const {
  require(!empty(), "max of empty tensor");
  double m = d_[0];
  for (double v : d_) m = v > m ? v : m;
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "max_abs_diff shape mismatch");
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = std::abs(a[i] - b[i]);
    if (d > m) m = d;
  }
  return m;
}

inline double mse(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "mse shape mismatch");
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return a.numel() ? s / static_cast<double>(a.numel()) : 0.0;
}

}  // namespace vasa
