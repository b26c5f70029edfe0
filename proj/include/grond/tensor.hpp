#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grond/error.hpp"

namespace grond {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ArgumentError("tensor dimensions must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

/// Dense row-major float32 array. An empty shape denotes the empty tensor.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(shape_.empty() ? 0 : shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if ((shape_.empty() ? 0 : shape_numel(shape_)) != data_.size())
      throw ArgumentError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Number of elements per leading index (e.g. one image of an N×C×H×W batch).
  std::size_t row_size() const { return shape_.empty() ? 0 : data_.size() / shape_[0]; }

  std::span<float> row(std::size_t i) { return {data_.data() + i * row_size(), row_size()}; }
  std::span<const float> row(std::size_t i) const {
    return {data_.data() + i * row_size(), row_size()};
  }

  Tensor reshaped(Shape shape) const {
    Tensor t = *this;
    if (shape_numel(shape) != data_.size())
      throw ArgumentError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    t.shape_ = std::move(shape);
    return t;
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  float abs_max() const {
    float m = 0.0f;
    for (float v : data_) m = std::max(m, std::fabs(v));
    return m;
  }

  /// Bitwise equality of shape and every float bit pattern.
  bool bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ && data_.size() == other.data_.size() &&
           (data_.empty() ||
            std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.bit_equal(b); }

 private:
  Shape shape_;
  std::vector<float> data_;
};

}  // namespace grond
