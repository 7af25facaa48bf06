#include "ptp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "ptp/error.hpp"

namespace ptp {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return shape.empty() ? 0 : n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

namespace {
void check_shape(const Shape& shape) {
  if (shape.empty()) throw ConfigError("tensor shape must have at least one extent");
  for (std::size_t e : shape) {
    if (e == 0) throw ConfigError("tensor extents must be positive: " + shape_string(shape));
  }
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_size(shape_) != data_.size()) {
    throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                      " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ConfigError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw UsageError("item() on tensor of shape " + shape_string(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void require_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) {
    throw NumericalError("non-finite values in " + what + " of shape " +
                         shape_string(t.shape()));
  }
}

namespace kernels {

namespace {

using v8d = double __attribute__((vector_size(64)));
constexpr std::size_t kTileRows = 4;

inline v8d load(const double* p) {
  v8d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}
inline void store(double* p, v8d v) { std::memcpy(p, &v, sizeof v); }

// Processes columns [j0, j0 + 8 * V) for all rows.
template <std::size_t V>
void matmul_panel(const double* x, const double* w, double* out, std::size_t m, std::size_t n,
                  std::size_t p, const double* bias, bool accumulate, std::size_t j0) {
  auto init = [&](std::size_t i, std::size_t v) {
    v8d a = accumulate ? load(out + i * p + j0 + 8 * v) : v8d{};
    if (bias) a = a + load(bias + j0 + 8 * v);
    return a;
  };
  std::size_t i0 = 0;
  for (; i0 + kTileRows <= m; i0 += kTileRows) {
    v8d acc[kTileRows][V];
    for (std::size_t r = 0; r < kTileRows; ++r)
      for (std::size_t v = 0; v < V; ++v) acc[r][v] = init(i0 + r, v);
    for (std::size_t k = 0; k < n; ++k) {
      const double* wk = w + k * p + j0;
      v8d wv[V];
      for (std::size_t v = 0; v < V; ++v) wv[v] = load(wk + 8 * v);
      for (std::size_t r = 0; r < kTileRows; ++r) {
        const double a = x[(i0 + r) * n + k];
        for (std::size_t v = 0; v < V; ++v) acc[r][v] += a * wv[v];
      }
    }
    for (std::size_t r = 0; r < kTileRows; ++r)
      for (std::size_t v = 0; v < V; ++v) store(out + (i0 + r) * p + j0 + 8 * v, acc[r][v]);
  }
  for (; i0 < m; ++i0) {
    v8d acc[V];
    for (std::size_t v = 0; v < V; ++v) acc[v] = init(i0, v);
    for (std::size_t k = 0; k < n; ++k) {
      const double a = x[i0 * n + k];
      for (std::size_t v = 0; v < V; ++v) acc[v] += a * load(w + k * p + j0 + 8 * v);
    }
    for (std::size_t v = 0; v < V; ++v) store(out + i0 * p + j0 + 8 * v, acc[v]);
  }
}

}  // namespace

void matmul(const double* x, const double* w, double* out, std::size_t m, std::size_t n,
            std::size_t p, const double* bias, bool accumulate) {
  std::size_t j0 = 0;
  for (; j0 + 32 <= p; j0 += 32) matmul_panel<4>(x, w, out, m, n, p, bias, accumulate, j0);
  for (; j0 + 8 <= p; j0 += 8) matmul_panel<1>(x, w, out, m, n, p, bias, accumulate, j0);
  for (; j0 < p; ++j0) {
    for (std::size_t i = 0; i < m; ++i) {
      double a = accumulate ? out[i * p + j0] : 0.0;
      if (bias) a = a + bias[j0];
      for (std::size_t k = 0; k < n; ++k) a += x[i * n + k] * w[k * p + j0];
      out[i * p + j0] = a;
    }
  }
}

void transpose(const double* in, double* out, std::size_t m, std::size_t n) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < m; i0 += kBlock) {
    for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
      const std::size_t i1 = std::min(m, i0 + kBlock);
      const std::size_t j1 = std::min(n, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) out[j * m + i] = in[i * n + j];
      }
    }
  }
}

}  // namespace kernels

}  // namespace ptp
