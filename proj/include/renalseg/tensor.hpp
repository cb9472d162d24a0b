/*
 * renalseg: cascaded 3D U-Net segmentation of 4D DCE volumes
 *
 * Copyright 2026 The renalseg Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace renalseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << ']';
  return os.str();
}

/// Dense row-major N-dimensional array (last axis fastest).
///
/// `Tensor` (32-bit reals) carries every intensity and feature map; the
/// double instantiation is used for gradient checks and oracles, and the
/// byte instantiation for label maps and binary masks. Axis lengths may be
/// zero so that an empty channel block can be concatenated.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape dims, T fill = T{}) : dims_(std::move(dims)), data_(shape_size(dims_), fill) {}
  BasicTensor(Shape dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != shape_size(dims_))
      throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match dims " + shape_string(dims_));
  }

  const Shape& dims() const noexcept { return dims_; }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // Rank-3 and rank-4 element access, (z,y,x) and (c,z,y,x).
  T& operator()(std::size_t z, std::size_t y, std::size_t x) noexcept {
    return data_[(z * dims_[1] + y) * dims_[2] + x];
  }
  const T& operator()(std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return data_[(z * dims_[1] + y) * dims_[2] + x];
  }
  T& operator()(std::size_t c, std::size_t z, std::size_t y, std::size_t x) noexcept {
    return data_[((c * dims_[1] + z) * dims_[2] + y) * dims_[3] + x];
  }
  const T& operator()(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return data_[((c * dims_[1] + z) * dims_[2] + y) * dims_[3] + x];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  /// Same data, new dims of equal element count.
  BasicTensor reshaped(Shape dims) const { return BasicTensor(std::move(dims), data_); }

  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(dims_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Shape dims_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;
using LabelMap = BasicTensor<std::uint8_t>;

/// Spatial part (D,H,W) of a channel-first [C,D,H,W] tensor.
template <typename T>
Shape spatial_dims(const BasicTensor<T>& t) {
  if (t.rank() != 4) throw std::invalid_argument("expected a [C,D,H,W] tensor, got dims " + shape_string(t.dims()));
  return {t.dim(1), t.dim(2), t.dim(3)};
}

enum class Mode { Train, Eval };

}  // namespace renalseg
