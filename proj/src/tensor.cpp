#include "fedsim/tensor.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "fedsim/error.hpp"

namespace fedsim {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  if (shape.empty()) {
    throw InputError("tensor shape must have at least one dimension");
  }
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) {
      throw InputError("tensor dimensions must be positive");
    }
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw InputError("tensor data length does not match shape (" +
                     std::to_string(data_.size()) + " values)");
  }
  if (!all_finite()) {
    throw InputError("tensor contains non-finite values");
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols) {
  return Tensor({rows, cols});
}

Tensor Tensor::vec(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::filled(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  for (auto& v : t.data_) {
    v = value;
  }
  return t;
}

std::size_t Tensor::rows() const {
  return rank() == 1 ? 1 : shape_[0];
}

std::size_t Tensor::cols() const {
  return rank() == 1 ? shape_[0] : shape_[rank() - 1];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return true;
}

Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
  const std::size_t c = m.cols();
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out.at(i, j) = m.at(rows[i], j);
    }
  }
  return out;
}

}  // namespace fedsim
