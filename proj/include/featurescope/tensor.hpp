#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fscope {

using Shape = std::vector<std::size_t>;

/// Cache-line aligned storage. Vectorized reductions peel leading elements
/// according to the address, so a fixed alignment keeps their summation
/// order, and thus their rounding, identical from one allocation to the next.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using AlignedVector = std::vector<double, AlignedAllocator<double>>;

std::string shapeToString(const Shape& shape);
std::size_t shapeProduct(const Shape& shape);

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Dense row-major tensor of 64-bit reals.
///
/// Images and feature tensors are stored height x width x channels with the
/// channel index varying fastest, so a spatial position's channel vector is
/// contiguous.
class NdTensor {
 public:
  NdTensor() = default;
  explicit NdTensor(Shape shape, double fill = 0.0);
  NdTensor(Shape shape, const std::vector<double>& data);

  static NdTensor vector(std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const;

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  const AlignedVector& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  // Rank-3 (height, width, channel) access.
  double& at(std::size_t y, std::size_t x, std::size_t c) noexcept {
    return data_[(y * shape_[1] + x) * shape_[2] + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const noexcept {
    return data_[(y * shape_[1] + x) * shape_[2] + c];
  }

  NdTensor reshaped(Shape shape) const;
  void fill(double value);
  bool allFinite() const noexcept;
  double sum() const noexcept;
  double maxValue() const;

  bool operator==(const NdTensor& other) const = default;

 private:
  Shape shape_;
  AlignedVector data_;
};

}  // namespace fscope
