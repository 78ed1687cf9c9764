#include "fss/tensor.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace fss {

std::size_t shape_size(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

namespace {

void check_extents(const Shape& dims) {
  for (std::size_t d : dims) {
    if (d == 0) throw ShapeError("tensor extents must be positive: " + shape_string(dims));
  }
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor(Shape dims, T fill)
    : dims_(std::move(dims)) {
  check_extents(dims_);
  values_.assign(shape_size(dims_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape dims, std::vector<T> values)
    : dims_(std::move(dims)), values_(std::move(values)) {
  check_extents(dims_);
  if (values_.size() != shape_size(dims_)) {
    throw ShapeError("value count " + std::to_string(values_.size()) +
                     " does not match dims " + shape_string(dims_));
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_external(Shape dims, std::vector<T> values) {
  BasicTensor t(std::move(dims), std::move(values));
  if (!t.all_finite()) throw DataError("tensor contains NaN or Inf");
  return t;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  if (axis >= dims_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_string(dims_));
  }
  return dims_[axis];
}

template <typename T>
std::size_t BasicTensor<T>::offset_of(std::initializer_list<std::size_t> index) const {
  if (index.size() != dims_.size()) {
    throw ShapeError("index rank does not match tensor rank " + shape_string(dims_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= dims_[axis]) throw ShapeError("index out of range for " + shape_string(dims_));
    off = off * dims_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
T& BasicTensor<T>::at(std::initializer_list<std::size_t> index) {
  return values_[offset_of(index)];
}

template <typename T>
const T& BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
  return values_[offset_of(index)];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape dims) const& {
  BasicTensor copy = *this;
  return std::move(copy).reshaped(std::move(dims));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape dims) && {
  if (shape_size(dims) != values_.size()) {
    throw ShapeError("cannot reshape " + shape_string(dims_) + " to " + shape_string(dims));
  }
  return BasicTensor(std::move(dims), std::move(values_));
}

template <typename T>
void BasicTensor<T>::fill(T v) {
  std::fill(values_.begin(), values_.end(), v);
}

template <typename T>
bool BasicTensor<T>::all_finite() const {
  return std::all_of(values_.begin(), values_.end(),
                     [](T v) { return std::isfinite(v); });
}

template <typename T>
void expect_dims(const BasicTensor<T>& t, const Shape& expected, const char* what) {
  if (t.dims() != expected) {
    throw ShapeError(std::string(what) + ": expected " + shape_string(expected) +
                     ", got " + shape_string(t.dims()));
  }
}

template <typename T>
void expect_rank(const BasicTensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_string(t.dims()));
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template void expect_dims(const BasicTensor<float>&, const Shape&, const char*);
template void expect_dims(const BasicTensor<double>&, const Shape&, const char*);
template void expect_rank(const BasicTensor<float>&, std::size_t, const char*);
template void expect_rank(const BasicTensor<double>&, std::size_t, const char*);

}  // namespace fss
