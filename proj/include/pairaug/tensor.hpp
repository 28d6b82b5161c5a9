#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "pairaug/common.hpp"

namespace pairaug::nn {

/// Dense row-major tensor. Shapes are small (rank <= 4 in practice);
/// all heavy math happens through Eigen maps over `data`.
template <typename S>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shp) : shape(std::move(shp)) {
    data.assign(static_cast<size_t>(numel_of(shape)), S(0));
  }
  Tensor(std::vector<int64_t> shp, std::vector<S> d) : shape(std::move(shp)), data(std::move(d)) {
    PAIRAUG_CHECK(static_cast<int64_t>(data.size()) == numel_of(shape), NumericError,
                  "tensor data size does not match shape");
  }

  static int64_t numel_of(const std::vector<int64_t>& shp) {
    int64_t n = 1;
    for (int64_t d : shp) {
      PAIRAUG_CHECK(d >= 0, NumericError, "negative dimension in tensor shape");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  size_t rank() const { return shape.size(); }

  static Tensor zeros(std::vector<int64_t> shp) { return Tensor(std::move(shp)); }
  static Tensor full(std::vector<int64_t> shp, S v) {
    Tensor t(std::move(shp));
    for (auto& x : t.data) x = v;
    return t;
  }
  static Tensor scalar(S v) { return Tensor({1}, {v}); }

  S& at2(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
  S at2(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (S v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }
};

inline std::string shape_str(const std::vector<int64_t>& shp) {
  std::string s = "[";
  for (size_t i = 0; i < shp.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shp[i]);
  }
  return s + "]";
}

}  // namespace pairaug::nn
