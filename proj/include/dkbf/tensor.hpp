#pragma once

#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dkbf {

// Base error type for the whole library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor of doubles. When produced under a recording
// Tape, node_id/tape_id tie the tensor back to its tape node; tensors
// built outside a tape carry node_id == -1.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  int node_id = -1;
  std::uint32_t tape_id = 0;

  Tensor() = default;

  Tensor(Shape s, std::vector<double> v, bool rg = false)
      : shape(std::move(s)), values(std::move(v)), requires_grad(rg) {
    if (numel(shape) != static_cast<std::int64_t>(values.size())) {
      throw Error("tensor: shape " + shape_str(shape) + " expects " +
                  std::to_string(numel(shape)) + " values, got " +
                  std::to_string(values.size()));
    }
    for (int e : shape) {
      if (e <= 0) throw Error("tensor: non-positive extent in " + shape_str(shape));
    }
  }

  static Tensor zeros(Shape s, bool rg = false) {
    std::vector<double> v(static_cast<std::size_t>(numel(s)), 0.0);
    return Tensor(std::move(s), std::move(v), rg);
  }

  static Tensor full(Shape s, double fill, bool rg = false) {
    std::vector<double> v(static_cast<std::size_t>(numel(s)), fill);
    return Tensor(std::move(s), std::move(v), rg);
  }

  static Tensor scalar(double x, bool rg = false) { return Tensor({1}, {x}, rg); }

  // 1 x n row vector.
  static Tensor row(std::vector<double> v, bool rg = false) {
    const int n = static_cast<int>(v.size());
    return Tensor({1, n}, std::move(v), rg);
  }

  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
  bool is_scalar() const { return size() == 1; }

  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return rank() >= 2 ? shape[1] : 1; }

  double& at(int i, int j) { return values[static_cast<std::size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * cols() + j]; }

  double item() const {
    if (!is_scalar()) throw Error("tensor: item() on non-scalar " + shape_str(shape));
    return values[0];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

}  // namespace dkbf
