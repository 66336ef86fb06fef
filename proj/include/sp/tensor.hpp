#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace sp {

// Error taxonomy shared by every module. Each maps onto one failure class
// named in the public contracts: shape, config, numeric domain, I/O, etc.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
struct InputError : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};
struct ConvergenceError : Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

std::string shape_str(const Shape& shape);

// Cache-line aligned allocation. Eigen chooses its vectorised peeling from
// the buffer address, so a fixed alignment keeps results bitwise
// reproducible across runs and processes.
namespace detail {
// 64-byte aligned blocks. Large activation buffers are recycled through the
// heap instead of being mapped and unmapped on every training step.
void* allocate_aligned(std::size_t bytes);
void free_aligned(void* p) noexcept;
}  // namespace detail

template <class T>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(detail::allocate_aligned(n * sizeof(T))); }
  void deallocate(T* p, std::size_t) noexcept { detail::free_aligned(p); }

  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of doubles. Rank-1 tensors act as row vectors
/// wherever a matrix view is needed.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const;

  // Matrix view: (rows, cols) where rank-1 is (1, n) and rank-k folds all
  // leading axes into rows.
  std::size_t rows() const;
  std::size_t cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }
  std::vector<double> to_vector() const { return {data_.begin(), data_.end()}; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }

  MatrixMap mat() { return {data_.data(), Eigen::Index(rows()), Eigen::Index(cols())}; }
  ConstMatrixMap mat() const {
    return {data_.data(), Eigen::Index(rows()), Eigen::Index(cols())};
  }

  Tensor reshaped(Shape shape) const;
  Tensor row(std::size_t r) const;
  void fill(double v);
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Storage data_;
};

Tensor from_matrix(const RowMatrix& m);

// Throws NumericError naming `where` if any element is NaN/Inf.
void require_finite(const Tensor& t, const char* where);

/// A trainable array with its accumulated gradient.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value);

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad.fill(0.0); }
};

}  // namespace sp
