#include "mmr/tensor.hpp"

#include <cmath>

namespace mmr {

std::string shape_str(const Shape& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

template <class Real>
bool Tensor<Real>::all_finite() const noexcept {
  for (Real v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

AxisSplit split_axis(const Shape& dims, std::size_t axis) {
  if (axis >= dims.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(dims));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= dims[i];
  s.extent = dims[axis];
  for (std::size_t i = axis + 1; i < dims.size(); ++i) s.inner *= dims[i];
  return s;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace mmr
