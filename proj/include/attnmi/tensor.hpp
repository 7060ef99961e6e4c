#pragma once

#include <cstddef>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "attnmi/errors.hpp"

namespace attnmi {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major array of doubles. `grad` is allocated lazily and, once
// present, always matches `values` in size. Gradients accumulate until
// explicitly zeroed.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), values(numel(shape), fill) {}
  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != numel(shape))
      throw ConfigError("tensor value count " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape));
  }

  std::size_t size() const { return values.size(); }
  bool is_scalar() const { return values.size() == 1; }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
  void zero_grad() { grad.assign(values.size(), 0.0); }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(Shape s, double fill = 0.0) {
  return std::make_shared<Tensor>(std::move(s), fill);
}

inline TensorPtr make_tensor(Shape s, std::vector<double> v) {
  return std::make_shared<Tensor>(std::move(s), std::move(v));
}

}  // namespace attnmi
