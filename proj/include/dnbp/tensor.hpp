#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace dnbp {

/// Dense row-major float tensor. The first dimension is treated as the row
/// (batch) axis by most tape operations; the remaining dimensions are
/// flattened into columns.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, float fill = 0.0f);
  Tensor(std::vector<int> shape, std::vector<float> values);

  static Tensor row(std::vector<float> values);
  static Tensor scalar(float v) { return Tensor({1}, std::vector<float>{v}); }

  std::size_t size() const { return data.size(); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const;

  float& operator[](std::size_t i) { return data[i]; }
  float operator[](std::size_t i) const { return data[i]; }
  float& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

  bool all_finite() const;
  void fill(float v);
};

std::size_t shape_size(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

}  // namespace dnbp
