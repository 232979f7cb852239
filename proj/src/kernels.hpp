#pragma once

#include <cmath>

#include <Eigen/Core>

#include "pisco/tensor.hpp"

namespace pisco {
inline namespace PISCO_ABI {
namespace kernels {

using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline ConstMatMap view(const Tensor& t) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}
inline MatMap view(Tensor& t) {
  return MatMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}
inline ConstMatMap view(const Scalar* data, std::size_t rows, std::size_t cols) {
  return ConstMatMap(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MatMap view(Scalar* data, std::size_t rows, std::size_t cols) {
  return MatMap(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline Scalar gelu(Scalar x) {
  constexpr Scalar k = Scalar(0.7978845608028654);
  const Scalar inner = k * (x + Scalar(0.044715) * x * x * x);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(inner));
}

inline Scalar gelu_grad(Scalar x) {
  constexpr Scalar k = Scalar(0.7978845608028654);
  const Scalar x2 = x * x;
  const Scalar inner = k * (x + Scalar(0.044715) * x2 * x);
  const Scalar t = std::tanh(inner);
  const Scalar dinner = k * (Scalar(1) + Scalar(3 * 0.044715) * x2);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * dinner;
}

// Rotary position embedding on one row of n_heads interleaved pairs.
// Pair i of a head turns by pos * base^(-2i / head_dim); sign = -1 undoes it.
inline void rope_row(Scalar* row, std::size_t width, std::size_t n_heads, std::size_t pos, Scalar base,
                     Scalar sign = 1) {
  const std::size_t dh = width / n_heads;
  for (std::size_t i = 0; i < dh / 2; ++i) {
    const double freq = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / static_cast<double>(dh));
    const double angle = static_cast<double>(pos) * freq;
    const auto c = static_cast<Scalar>(std::cos(angle));
    const auto s = static_cast<Scalar>(sign * std::sin(angle));
    for (std::size_t h = 0; h < n_heads; ++h) {
      Scalar* x = row + h * dh + 2 * i;
      const Scalar a = x[0], b = x[1];
      x[0] = a * c - b * s;
      x[1] = a * s + b * c;
    }
  }
}

}  // namespace kernels
}  // namespace PISCO_ABI
}  // namespace pisco
