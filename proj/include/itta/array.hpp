#pragma once

#include <cstddef>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace itta {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
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

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Plain row-major buffer of 64-bit reals. Parameters and datasets live in
// Arrays; the autodiff graph copies them into nodes when they are bound.
struct Array {
  Shape shape;
  std::vector<double> data;

  Array() = default;
  Array(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("Array: shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
  }

  static Array filled(Shape s, double v) {
    const std::size_t n = shape_numel(s);
    return Array(std::move(s), std::vector<double>(n, v));
  }
  static Array zeros(Shape s) { return filled(std::move(s), 0.0); }
  static Array scalar(double v) { return Array({}, {v}); }

  std::size_t size() const { return data.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
};

// Bit-level equality: distinguishes -0.0 from 0.0 and treats identical NaNs as equal.
inline bool bit_equal(const Array& a, const Array& b) {
  return a.shape == b.shape &&
         (a.data.empty() ||
          std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0);
}

}  // namespace itta
