#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pisco/error.hpp"

namespace pisco {
inline namespace PISCO_ABI {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Dense row-major array. A rank-0 tensor holds a single scalar.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = 0);
  Tensor(Shape shape, std::vector<Scalar> data);

  static Tensor scalar(Scalar value) { return Tensor(Shape{}, value); }
  static Tensor matrix(std::size_t rows, std::size_t cols, Scalar fill = 0) {
    return Tensor(Shape{rows, cols}, fill);
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Matrix view: rank-2 tensors as-is, lower ranks as a single row.
  std::size_t rows() const noexcept {
    return shape_.size() >= 2 ? data_.size() / shape_.back() : 1;
  }
  std::size_t cols() const noexcept {
    return shape_.empty() ? 1 : shape_.back();
  }

  Scalar* data() noexcept { return data_.data(); }
  const Scalar* data() const noexcept { return data_.data(); }
  std::span<Scalar> values() noexcept { return data_; }
  std::span<const Scalar> values() const noexcept { return data_; }
  std::span<Scalar> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const Scalar> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }
  Scalar& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  Scalar operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  Scalar item() const;

  void fill(Scalar value);
  bool all_finite() const noexcept;
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

}  // namespace PISCO_ABI
}  // namespace pisco
