#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace trinet {

// Dense row-major tensor. Rank 1 and 2 are what the engine uses; scalars are
// {1,1}. Data is owned; tensors are value types.
template <typename T>
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::vector<std::int64_t> s, std::vector<T> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != static_cast<std::size_t>(numel())) {
      throw std::invalid_argument("Tensor: data size does not match shape");
    }
  }

  static Tensor zeros(std::int64_t r, std::int64_t c) {
    return Tensor({r, c}, std::vector<T>(static_cast<std::size_t>(r * c), T(0)));
  }
  static Tensor full(std::int64_t r, std::int64_t c, T v) {
    return Tensor({r, c}, std::vector<T>(static_cast<std::size_t>(r * c), v));
  }
  static Tensor scalar(T v) { return Tensor({1, 1}, {v}); }
  static Tensor row(std::vector<T> d) {
    auto n = static_cast<std::int64_t>(d.size());
    return Tensor({1, n}, std::move(d));
  }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t rows() const { return rank() == 2 ? shape[0] : 1; }
  std::int64_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }
  bool is_scalar() const { return numel() == 1; }

  T& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * cols() + c)]; }
  const T& at(std::int64_t r, std::int64_t c) const {
    return data[static_cast<std::size_t>(r * cols() + c)];
  }
  T value() const {
    if (!is_scalar()) throw std::logic_error("Tensor::value: not a scalar");
    return data[0];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) os << 'x';
      os << shape[i];
    }
    os << ')';
    return os.str();
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> d(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) d[i] = static_cast<U>(data[i]);
    return Tensor<U>(shape, std::move(d));
  }
};

}  // namespace trinet
