#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "fss/errors.h"

namespace fss {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& dims);
std::string shape_string(const Shape& dims);

// Dense row-major array. `float` is the production precision; `double` exists
// so gradients can be checked against finite differences.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape dims, T fill = T{0});
  BasicTensor(Shape dims, std::vector<T> values);

  // Same as the (dims, values) constructor but also rejects NaN and Inf.
  // Use for anything read from disk or handed in by a caller.
  static BasicTensor from_external(Shape dims, std::vector<T> values);

  const Shape& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  // Bounds-checked multi-index access.
  T& at(std::initializer_list<std::size_t> index);
  const T& at(std::initializer_list<std::size_t> index) const;

  BasicTensor reshaped(Shape dims) const&;
  BasicTensor reshaped(Shape dims) &&;

  void fill(T v);
  bool all_finite() const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(values_.begin(), values_.end());
    return BasicTensor<U>(dims_, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.dims_ == b.dims_ && a.values_ == b.values_;
  }

 private:
  std::size_t offset_of(std::initializer_list<std::size_t> index) const;

  Shape dims_;
  std::vector<T> values_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Throws ShapeError naming `what` unless `t` has exactly `expected` dims.
template <typename T>
void expect_dims(const BasicTensor<T>& t, const Shape& expected,
                 const char* what);
template <typename T>
void expect_rank(const BasicTensor<T>& t, std::size_t rank, const char* what);

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

}  // namespace fss
