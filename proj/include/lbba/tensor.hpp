#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "lbba/error.hpp"

namespace lbba {

// Dense row-major tensor of rank <= 4. Deliberately minimal: the network
// code addresses data through explicit index helpers, so there is no view
// machinery here.
template <typename S>
struct Tensor {
  std::vector<int> shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shp) : shape(std::move(shp)) {
    data.assign(static_cast<std::size_t>(count(shape)), S(0));
  }
  Tensor(std::vector<int> shp, std::vector<S> values)
      : shape(std::move(shp)), data(std::move(values)) {
    if (static_cast<std::int64_t>(data.size()) != count(shape)) {
      throw DimensionError("Tensor: data size does not match shape");
    }
  }

  static std::int64_t count(const std::vector<int>& shp) {
    std::int64_t n = 1;
    for (int d : shp) n *= d;
    return n;
  }

  int size() const { return static_cast<int>(data.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  S& operator[](int i) { return data[static_cast<std::size_t>(i)]; }
  const S& operator[](int i) const { return data[static_cast<std::size_t>(i)]; }

  // Row-major accessors for the common ranks.
  S& at(int i, int j) { return data[static_cast<std::size_t>(i) * dim(1) + j]; }
  const S& at(int i, int j) const {
    return data[static_cast<std::size_t>(i) * dim(1) + j];
  }
  S& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
  }
  const S& at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
  }

  void fill(S v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (const S& v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      out.data[i] = static_cast<T>(data[i]);
    }
    return out;
  }
};

}  // namespace lbba
