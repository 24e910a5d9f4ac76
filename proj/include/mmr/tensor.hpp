#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmr/errors.hpp"

namespace mmr {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& dims);

/// Dense row-major tensor. A rank-0 tensor holds one value.
template <class Real>
class Tensor {
 public:
  Tensor() : data_(1, Real(0)) {}
  explicit Tensor(Shape dims, Real fill = Real(0)) : dims_(std::move(dims)), data_(numel(dims_), fill) {}
  Tensor(Shape dims, std::vector<Real> data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != numel(dims_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match dims " +
                       shape_str(dims_));
    }
  }

  static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }

  const Shape& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  Real* ptr() noexcept { return data_.data(); }
  const Real* ptr() const noexcept { return data_.data(); }
  std::vector<Real>& storage() noexcept { return data_; }
  const std::vector<Real>& storage() const noexcept { return data_; }

  Real& operator[](std::size_t i) noexcept { return data_[i]; }
  Real operator[](std::size_t i) const noexcept { return data_[i]; }
  Real item() const { return data_.at(0); }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

  /// Same data, new extents; element count must be preserved.
  Tensor reshaped(Shape dims) const {
    if (numel(dims) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(dims_) + " to " + shape_str(dims));
    }
    Tensor out(std::move(dims), data_);
    out.requires_grad_ = requires_grad_;
    return out;
  }

  template <class To>
  Tensor<To> cast() const {
    std::vector<To> out(data_.begin(), data_.end());
    Tensor<To> t(dims_, std::move(out));
    t.set_requires_grad(requires_grad_);
    return t;
  }

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  Shape dims_;
  std::vector<Real> data_;
  bool requires_grad_ = false;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

/// Outer/axis/inner decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& dims, std::size_t axis);

}  // namespace mmr
