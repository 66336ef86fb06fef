#include "sp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace sp {

namespace detail {

namespace {
constexpr std::align_val_t kAlignment{64};

void tune_heap_once() {
#if defined(__GLIBC__)
  static const bool tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)tuned;
#endif
}
}  // namespace

void* allocate_aligned(std::size_t bytes) {
  tune_heap_once();
  return ::operator new(bytes, kAlignment);
}

void free_aligned(void* p) noexcept { ::operator delete(p, kAlignment); }

}  // namespace detail

namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  check_shape(shape_);
  if (product(shape_) != data_.size()) {
    throw ShapeError("data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (shape_.size() <= 1) return 1;
  return data_.size() / shape_.back();
}

std::size_t Tensor::cols() const {
  return shape_.empty() ? 1 : shape_.back();
}

Tensor Tensor::reshaped(Shape shape) const {
  check_shape(shape);
  if (product(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

Tensor Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  Tensor out({c});
  std::copy(data_.begin() + std::ptrdiff_t(r * c), data_.begin() + std::ptrdiff_t((r + 1) * c),
            out.data_.begin());
  return out;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor from_matrix(const RowMatrix& m) {
  Tensor t({std::size_t(m.rows()), std::size_t(m.cols())});
  t.mat() = m;
  return t;
}

void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) {
    throw NumericError(std::string(where) + ": non-finite value encountered");
  }
}

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)),
      grad(value.shape(), 0.0) {}

}  // namespace sp
