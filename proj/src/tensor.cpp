#include "pisco/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace pisco {
inline namespace PISCO_ABI {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::io: return "io";
    case ErrorCode::format: return "format";
    case ErrorCode::overflow: return "overflow";
    case ErrorCode::missing_artifact: return "missing_artifact";
    case ErrorCode::config: return "config";
    case ErrorCode::out_of_memory: return "out_of_memory";
  }
  return "unknown";
}

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Tensor::Tensor(Shape shape, Scalar fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {
  for (auto d : shape_) {
    if (d == 0) fail(ErrorCode::invalid_argument, "tensor dims must be positive: " + to_string(shape_));
  }
}

Tensor::Tensor(Shape shape, std::vector<Scalar> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) fail(ErrorCode::invalid_argument, "tensor dims must be positive: " + to_string(shape_));
  }
  if (data_.size() != element_count(shape_)) {
    fail(ErrorCode::shape_mismatch, "tensor data length " + std::to_string(data_.size()) +
                                        " does not match shape " + to_string(shape_));
  }
}

Scalar Tensor::item() const {
  if (data_.size() != 1) {
    fail(ErrorCode::shape_mismatch, "item() on non-scalar tensor " + to_string(shape_));
  }
  return data_[0];
}

void Tensor::fill(Scalar value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (element_count(shape) != data_.size()) {
    fail(ErrorCode::shape_mismatch, "reshape " + to_string(shape_) + " -> " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

}  // namespace PISCO_ABI
}  // namespace pisco
