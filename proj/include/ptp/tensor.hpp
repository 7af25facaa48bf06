#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ptp {

using Shape = std::vector<std::size_t>;

/// Dense row-major array of doubles. Every extent is positive.
///
/// Most of the library treats a tensor as a matrix whose column count is the
/// last extent and whose row count is the product of the remaining extents.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor row(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* ptr() noexcept { return data_.data(); }
  const double* ptr() const noexcept { return data_.data(); }
  std::vector<double>& storage() noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;
  void fill(double value);
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Throws NumericalError naming `what` when the tensor holds NaN or Inf.
void require_finite(const Tensor& t, const std::string& what);

namespace kernels {

/// out(m x p) = x(m x n) * w(n x p) [+ bias(p)] [+ out when accumulate].
///
/// Each output element is accumulated in ascending k order starting from its
/// initial value, so a row's result is independent of how many rows are in
/// the batch.
void matmul(const double* x, const double* w, double* out, std::size_t m, std::size_t n,
            std::size_t p, const double* bias, bool accumulate);

/// out(n x m) = transpose of in(m x n).
void transpose(const double* in, double* out, std::size_t m, std::size_t n);

}  // namespace kernels

}  // namespace ptp
