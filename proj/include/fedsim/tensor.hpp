#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace fedsim {

/// Dense row-major tensor of 64-bit floats.
class Tensor {
 public:
  Tensor() = default;

  /// Zero-filled tensor of the given shape. Dimensions must be positive.
  explicit Tensor(std::vector<std::size_t> shape);

  /// Tensor with explicit contents. Validates that the data length matches
  /// the shape product and that every value is finite.
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols);
  static Tensor vec(std::vector<double> values);
  static Tensor filled(std::vector<std::size_t> shape, double value);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }

  /// Row/column accessors for rank-2 tensors (rank-1 counts as a single row).
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// Rows of `m` selected by index, in the given order.
Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows);

}  // namespace fedsim
