/*
 * Copyright (c) 2026 RAPQ Contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef RAPQ_TENSOR_HPP
#define RAPQ_TENSOR_HPP

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "rapq/error.hpp"

namespace rapq {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) raise(ErrorCode::InvalidArgument, "negative extent in " + shape_string(shape));
    n *= d;
  }
  return n;
}

/// Dense N-dimensional array in row-major order backed by an Eigen array.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_ = Array::Zero(shape_numel(shape_));
  }

  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      raise(ErrorCode::ShapeMismatch, "shape " + shape_string(shape_) + " does not hold " +
                                          std::to_string(data_.size()) + " values");
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor from_values(Shape shape, std::initializer_list<Scalar> values) {
    Array a(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) a[i++] = v;
    return Tensor(std::move(shape), std::move(a));
  }

  Index ndim() const { return static_cast<Index>(shape_.size()); }
  Index numel() const { return data_.size(); }
  const Shape& shape() const { return shape_; }

  Index dim(Index i) const {
    if (i < 0 || i >= ndim())
      raise(ErrorCode::InvalidArgument, "dim index " + std::to_string(i) + " out of range for " +
                                            shape_string(shape_));
    return shape_[static_cast<std::size_t>(i)];
  }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  // NCHW / OIHW addressing.
  Scalar& at4(Index a, Index b, Index c, Index d) {
    return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }
  Scalar at4(Index a, Index b, Index c, Index d) const {
    return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }
  Scalar& at2(Index r, Index c) { return data_[r * shape_[1] + c]; }
  Scalar at2(Index r, Index c) const { return data_[r * shape_[1] + c]; }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      raise(ErrorCode::ShapeMismatch,
            "cannot reshape " + shape_string(shape_) + " into " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const {
    for (Index i = 0; i < data_.size(); ++i)
      if (!std::isfinite(static_cast<double>(data_[i]))) return false;
    return true;
  }

  void require_finite(const char* context) const {
    if constexpr (std::is_floating_point_v<Scalar>) {
      if (!all_finite())
        raise(ErrorCode::NonFinite, std::string(context) + ": tensor contains NaN/Inf");
    }
  }

 private:
  Shape shape_;
  Array data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TensorI = Tensor<std::int32_t>;

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                        const std::string& context) {
  if (!a.same_shape(b))
    raise(ErrorCode::ShapeMismatch, context + ": " + shape_string(a.shape()) + " vs " +
                                        shape_string(b.shape()));
}

}  // namespace rapq

#endif  // RAPQ_TENSOR_HPP
