#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace rgbt {

// Dense row-major double tensor. Layout for feature maps is NCHW.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(count(shape)), fill);
  }
  static Tensor from(std::vector<int> s, std::vector<double> data) {
    Tensor t;
    t.shape = std::move(s);
    t.v = std::move(data);
    if (static_cast<int64_t>(t.v.size()) != count(t.shape))
      throw std::invalid_argument("Tensor::from: data size does not match shape");
    return t;
  }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

  // NCHW accessor
  double& at4(int n, int c, int h, int w) {
    return v[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  double at4(int n, int c, int h, int w) const {
    return v[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  double& at2(int r, int c) { return v[static_cast<size_t>(r) * shape[1] + c]; }
  double at2(int r, int c) const { return v[static_cast<size_t>(r) * shape[1] + c]; }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

inline void check_shape(const Tensor& t, const std::vector<int>& want, const char* where) {
  if (t.shape != want)
    throw std::invalid_argument(std::string(where) + ": expected shape mismatch, got " + t.shape_str());
}

}  // namespace rgbt
