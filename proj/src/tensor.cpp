#include "ubcl/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <sstream>

namespace ubcl {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_to_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor<T>(std::move(shape), data_);
}

template <typename T>
void Tensor<T>::fill(T value) {
  for (auto& v : data_) v = value;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul dimension mismatch: " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  }
  return out;
}

template <typename T>
Tensor<T> elementwise(ElementOp op, const Tensor<T>& a, const Tensor<T>* b) {
  const bool binary = op == ElementOp::kAdd || op == ElementOp::kMul;
  if (binary) {
    if (b == nullptr) throw std::invalid_argument("binary elementwise op needs two operands");
    if (a.shape() != b->shape()) {
      throw ShapeError("elementwise shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                       shape_to_string(b->shape()));
    }
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T x = a[i];
    switch (op) {
      case ElementOp::kAdd: out[i] = x + (*b)[i]; break;
      case ElementOp::kMul: out[i] = x * (*b)[i]; break;
      case ElementOp::kRelu: out[i] = x > T{0} ? x : T{0}; break;
      case ElementOp::kSigmoid: out[i] = sigmoid_scalar(x); break;
      case ElementOp::kTanh: out[i] = std::tanh(x); break;
      case ElementOp::kExp: out[i] = std::exp(x); break;
    }
  }
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tensor<std::int8_t>;
template Tensor<float> matmul(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> matmul(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> elementwise(ElementOp, const Tensor<float>&, const Tensor<float>*);
template Tensor<double> elementwise(ElementOp, const Tensor<double>&, const Tensor<double>*);

}  // namespace ubcl
