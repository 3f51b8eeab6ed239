#include "doamo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace doamo {

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
  }
}

int Tensor::dim(int i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) {
    throw std::out_of_range("dim index out of range for shape " + shape_str(shape_));
  }
  return shape_[i];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " +
                                shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::item(int n) const {
  if (rank() < 1 || n < 0 || n >= shape_[0]) {
    throw std::out_of_range("item index out of range for shape " + shape_str(shape_));
  }
  Shape sub(shape_.begin() + 1, shape_.end());
  const std::size_t stride = shape_numel(sub);
  return Tensor(sub, std::vector<double>(data_.begin() + n * stride,
                                         data_.begin() + (n + 1) * stride));
}

Tensor Tensor::unsqueezed() const {
  Shape s{1};
  s.insert(s.end(), shape_.begin(), shape_.end());
  return Tensor(std::move(s), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_(const Tensor& other, double scale) {
  if (other.numel() != numel()) {
    throw std::invalid_argument("add_: size mismatch " + shape_str(shape_) + " vs " +
                                shape_str(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::min() const {
  return data_.empty() ? std::numeric_limits<double>::quiet_NaN()
                       : *std::min_element(data_.begin(), data_.end());
}

double Tensor::max() const {
  return data_.empty() ? std::numeric_limits<double>::quiet_NaN()
                       : *std::max_element(data_.begin(), data_.end());
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw std::invalid_argument("stack: no tensors");
  Shape s{static_cast<int>(items.size())};
  s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
  std::vector<double> data;
  data.reserve(shape_numel(s));
  for (const Tensor& t : items) {
    if (t.shape() != items[0].shape()) {
      throw std::invalid_argument("stack: shape mismatch " + shape_str(t.shape()) + " vs " +
                                  shape_str(items[0].shape()));
    }
    data.insert(data.end(), t.storage().begin(), t.storage().end());
  }
  return Tensor(std::move(s), std::move(data));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace doamo
