#include "featurescope/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fscope {

std::string shapeToString(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shapeProduct(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

NdTensor::NdTensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shapeProduct(shape_), fill) {}

NdTensor::NdTensor(Shape shape, const std::vector<double>& data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shapeProduct(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shapeToString(shape_) + " needs " +
                     std::to_string(shapeProduct(shape_)) + " values, got " +
                     std::to_string(data_.size()));
  }
}

NdTensor NdTensor::vector(std::initializer_list<double> values) {
  return NdTensor({values.size()}, std::vector<double>(values));
}

std::size_t NdTensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shapeToString(shape_));
  }
  return shape_[axis];
}

NdTensor NdTensor::reshaped(Shape shape) const {
  if (shapeProduct(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shapeToString(shape_) + " to " +
                     shapeToString(shape));
  }
  NdTensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

void NdTensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool NdTensor::allFinite() const noexcept {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

double NdTensor::sum() const noexcept {
  return std::accumulate(data_.begin(), data_.end(), 0.0);
}

double NdTensor::maxValue() const {
  if (data_.empty()) throw ShapeError("max of empty tensor");
  return *std::max_element(data_.begin(), data_.end());
}

}  // namespace fscope
