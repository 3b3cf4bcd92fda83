#pragma once

#include <algorithm>
#include <memory>
#include <numeric>
#include <sstream>
#include <vector>

#include "focdec/common.hpp"

namespace focdec {

/// Dense row-major tensor. Copies share the underlying buffer (graph nodes
/// alias freely); clone() makes the storage unique.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(count(shape_), T(0))) {}

  static Tensor full(std::vector<int64_t> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }

  static Tensor from(std::vector<int64_t> shape, std::vector<T> values) {
    if (count(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("Tensor::from: shape/data size mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  bool defined() const { return data_ != nullptr; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }

  T& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  T& at(int64_t i, int64_t j) { return (*data_)[static_cast<size_t>(i * shape_[1] + j)]; }
  const T& at(int64_t i, int64_t j) const {
    return (*data_)[static_cast<size_t>(i * shape_[1] + j)];
  }
  T& at(int64_t i, int64_t j, int64_t k) {
    return (*data_)[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  T& at(int64_t i, int64_t j, int64_t k, int64_t l) {
    return (*data_)[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }
  const T& at(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return (*data_)[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }

  /// Same buffer, new shape (element count must match).
  Tensor reshaped(std::vector<int64_t> shape) const {
    if (count(shape) != size()) throw ShapeError("reshape: element count mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  void fill(T v) { std::fill(data_->begin(), data_->end(), v); }

  void add_(const Tensor& other) {
    const T* src = other.data();
    T* dst = data();
    for (int64_t i = 0, n = size(); i < n; ++i) dst[i] += src[i];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(static_cast<size_t>(size()));
    for (int64_t i = 0; i < size(); ++i) out[static_cast<size_t>(i)] = static_cast<U>((*data_)[static_cast<size_t>(i)]);
    return Tensor<U>::from(shape_, std::move(out));
  }

 private:
  static int64_t count(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d <= 0) throw ShapeError("tensor dims must be positive");
      n *= d;
    }
    return n;
  }

  std::vector<int64_t> shape_;
  std::shared_ptr<std::vector<T>> data_;
};

}  // namespace focdec
