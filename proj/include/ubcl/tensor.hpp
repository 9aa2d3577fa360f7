#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ubcl {

using Shape = std::vector<std::size_t>;

/// Thrown when operand shapes are incompatible. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array with a fixed shape.
///
/// The shape never changes after construction; reshape() returns a new tensor
/// holding the same values. Element type is float on the inference/training
/// path and double for gradient oracles.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // Rank-2 access.
  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * shape_[1] + c];
  }

  // Rank-3 access.
  T& operator()(std::size_t i, std::size_t j, std::size_t k) noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * shape_[1], shape_[1]); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * shape_[1], shape_[1]);
  }

  Tensor reshape(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T value);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

enum class ElementOp { kAdd, kMul, kRelu, kSigmoid, kTanh, kExp };

/// Standard matrix product with left-to-right accumulation over the inner axis.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Applies a unary or binary op per element. Binary ops require equal shapes.
template <typename T>
Tensor<T> elementwise(ElementOp op, const Tensor<T>& a, const Tensor<T>* b = nullptr);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementOp::kAdd, a, &b); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementOp::kMul, a, &b); }
template <typename T>
Tensor<T> relu(const Tensor<T>& a) { return elementwise(ElementOp::kRelu, a); }
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) { return elementwise(ElementOp::kSigmoid, a); }
template <typename T>
Tensor<T> tanh(const Tensor<T>& a) { return elementwise(ElementOp::kTanh, a); }
template <typename T>
Tensor<T> exp(const Tensor<T>& a) { return elementwise(ElementOp::kExp, a); }

template <typename T>
inline T sigmoid_scalar(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace ubcl
