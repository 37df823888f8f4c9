#pragma once

#include <algorithm>
#include <cstring>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "smartpc/errors.hpp"

namespace smartpc {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<std::size_t>;

namespace detail {

/// Allocator whose value-initialization is default-initialization, so
/// resizing a buffer of scalars leaves them unset instead of zeroing.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  using std::allocator<T>::allocator;
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace detail

template <class T>
using Buffer = std::vector<T, detail::DefaultInitAllocator<T>>;

/// Tag for tensors whose every element is written before it is read.
struct Uninitialized {};
inline constexpr Uninitialized uninitialized{};

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

/// Dense row-major tensor. Rank is usually 1 or 2; rows() is the leading
/// dimension and cols() the product of the rest.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, Uninitialized) : shape_(std::move(shape)), data_(shape_size(shape_)) {}
  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_size();
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t rows() const noexcept { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const noexcept { return rows() == 0 ? 0 : size() / rows(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  Buffer<T>& values() noexcept { return data_; }
  const Buffer<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  Eigen::Map<RowMatrix<T>> matrix() noexcept {
    return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
  }
  Eigen::Map<const RowMatrix<T>> matrix() const noexcept {
    return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(Shape s) {
    if (shape_size(s) != size()) throw InvalidArgument("Tensor::reshape: size mismatch");
    shape_ = std::move(s);
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_, uninitialized);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void check_size() const {
    if (data_.size() != shape_size(shape_))
      throw InvalidArgument("Tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                            shape_string(shape_));
  }

  Shape shape_;
  Buffer<T> data_;
};

/// Exact (bitwise) equality, treating NaNs with equal payloads as equal.
template <class T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.values().begin(), a.values().end(), b.values().begin(), [](T x, T y) {
    return std::memcmp(&x, &y, sizeof(T)) == 0;
  });
}

}  // namespace smartpc
