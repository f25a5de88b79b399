#include "dnbp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dnbp/error.hpp"

namespace dnbp {

std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int> s, float fill) : shape(std::move(s)), data(shape_size(shape), fill) {}

Tensor::Tensor(std::vector<int> s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_size(shape) != data.size())
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                     " values");
}

Tensor Tensor::row(std::vector<float> values) {
  int n = static_cast<int>(values.size());
  return Tensor({1, n}, std::move(values));
}

int Tensor::cols() const {
  if (shape.empty()) return 0;
  int c = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) c *= shape[i];
  return c;
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); });
}

void Tensor::fill(float v) { std::fill(data.begin(), data.end(), v); }

}  // namespace dnbp
