#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "unidiff/errors.hpp"

namespace unidiff {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

/// Dense row-major array. Images and feature maps use (N, C, H, W).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    for (int d : shape_)
      if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape_));
  }
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape_); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 4-D accessors
  T& at(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const { return data_[offset(n, c, y, x)]; }

  T* plane(int n, int c) { return data_.data() + offset(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + offset(n, c, 0, 0); }

  /// Pointer to item n of a batched tensor (any rank >= 1).
  T* item(int n) { return data_.data() + static_cast<std::size_t>(n) * item_size(); }
  const T* item(int n) const { return data_.data() + static_cast<std::size_t>(n) * item_size(); }
  std::size_t item_size() const { return shape_.empty() || shape_[0] == 0 ? 0 : size() / shape_[0]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != size()) throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  /// Rows [begin, end) of the leading dimension.
  Tensor slice(int begin, int end) const {
    Shape s = shape_;
    s[0] = end - begin;
    std::vector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * item_size()),
                       data_.begin() + static_cast<std::ptrdiff_t>(end * item_size()));
    return Tensor(std::move(s), std::move(out));
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  std::size_t offset(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  Shape shape_;
  std::vector<T> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const std::string& what) {
  if (a != b) throw ShapeError(what + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

/// Stack equally shaped tensors along a new leading axis.
template <class T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  Shape s = items[0].shape();
  s.insert(s.begin(), static_cast<int>(items.size()));
  std::vector<T> out;
  out.reserve(shape_size(s));
  for (const auto& t : items) {
    require_same_shape(t.shape(), items[0].shape(), "stack");
    out.insert(out.end(), t.vec().begin(), t.vec().end());
  }
  return Tensor<T>(std::move(s), std::move(out));
}

/// Concatenate batched tensors along the leading axis.
template <class T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape s = parts[0].shape();
  int n = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    Shape a(p.shape().begin() + 1, p.shape().end()), b(s.begin() + 1, s.end());
    require_same_shape(a, b, "concat_batch");
    n += p.dim(0);
    out.insert(out.end(), p.vec().begin(), p.vec().end());
  }
  s[0] = n;
  return Tensor<T>(std::move(s), std::move(out));
}

/// Item n of a batched tensor with the leading axis dropped.
template <class T>
Tensor<T> unstack(const Tensor<T>& t, int n) {
  Shape s(t.shape().begin() + 1, t.shape().end());
  std::vector<T> out(t.item(n), t.item(n) + t.item_size());
  return Tensor<T>(std::move(s), std::move(out));
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.vec().begin(), t.vec().end(), [](T v) { return std::isfinite(v); });
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace unidiff
