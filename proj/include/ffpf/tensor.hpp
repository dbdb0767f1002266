#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ffpf {

/// Extents of a rank-4 [batch, channel, height, width] tensor.
struct Shape {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  constexpr std::int64_t numel() const noexcept { return n * c * h * w; }
  constexpr std::int64_t plane() const noexcept { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + "]";
  }
};

/// Raised when operand extents disagree. `axis()` names the offending axis.
class DimensionError : public std::invalid_argument {
 public:
  DimensionError(const std::string& op, std::string axis, std::int64_t expected,
                 std::int64_t actual)
      : std::invalid_argument(op + ": dimension mismatch on axis " + axis + " (expected " +
                              std::to_string(expected) + ", got " + std::to_string(actual) + ")"),
        axis_(std::move(axis)) {}

  DimensionError(const std::string& op, std::string axis, const std::string& detail)
      : std::invalid_argument(op + ": dimension mismatch on axis " + axis + " (" + detail + ")"),
        axis_(std::move(axis)) {}

  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

/// Dense row-major float tensor, width fastest.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0)
      throw std::invalid_argument("Tensor: negative extent in " + shape.str());
    data_.assign(static_cast<std::size_t>(shape.numel()), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    if (static_cast<std::int64_t>(data_.size()) != shape.numel())
      throw std::invalid_argument("Tensor: " + std::to_string(data_.size()) +
                                  " values do not fill shape " + shape.str());
  }

  const Shape& shape() const noexcept { return shape_; }
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  std::int64_t offset(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(offset(n, c, h, w))];
  }
  const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(offset(n, c, h, w))];
  }

  /// Pointer to the contiguous H*W slice of sample n, channel c.
  T* plane(std::int64_t n, std::int64_t c) { return data() + offset(n, c, 0, 0); }
  const T* plane(std::int64_t n, std::int64_t c) const { return data() + offset(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

/// Largest absolute elementwise difference; throws on shape mismatch.
template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument("max_abs_diff: shapes " + a.shape().str() + " and " +
                                b.shape().str() + " differ");
  T m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Throws std::domain_error naming the first non-finite element. Compiled out in release builds.
template <typename T>
void debug_check_finite([[maybe_unused]] const Tensor<T>& t, [[maybe_unused]] const char* where) {
#ifndef NDEBUG
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t[i]))
      throw std::domain_error(std::string(where) + ": non-finite value at flat index " +
                              std::to_string(i));
#endif
}

}  // namespace ffpf
