// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace repiln {

using Shape = std::vector<std::size_t>;

/// Raised on any shape disagreement between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a serialized blob cannot be decoded.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Shortest round-trip decimal text, locale independent.
std::string format_double(double v);

/// Stand-in for -inf in masked score matrices. Finite so that max-subtraction
/// in softmax never produces inf - inf.
template <typename T>
constexpr T masked_sentinel() {
  return std::numeric_limits<T>::lowest();
}

/// Dense, contiguous, row-major array.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }
  /// 2-D literal, rows must be equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  T item() const;
  bool all_finite() const;
  /// Throws std::domain_error naming `what` if any element is NaN/Inf.
  void check_finite(const std::string& what) const;

  Tensor reshaped(Shape shape) const;
  void fill(T v);

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Max-norm of the elementwise difference. Shapes must agree.
template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

// Serialization: "RPT1", dtype byte (0 f32, 1 f64), rank u8, u32 LE dims,
// LE element payload.
enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

/// Reads either element type and converts to T. `base_offset` is added to
/// error offsets so container readers can report absolute positions.
template <typename T>
Tensor<T> read_tensor(std::istream& is, std::size_t base_offset = 0);

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t);
template <typename T>
Tensor<T> load_tensor(const std::string& path);

}  // namespace repiln
