#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace virm {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Shape/dimension disagreement between operands.
struct ShapeError : Error {
  using Error::Error;
};
// An index (label, env id, ...) outside its valid range.
struct IndexError : Error {
  using Error::Error;
};
// A numeric argument outside its domain (probability, batch size, ...).
struct ValueError : Error {
  using Error::Error;
};
// Malformed input bytes/text (IDX, CSV).
struct FormatError : Error {
  using Error::Error;
};
// Bad experiment configuration (unknown key, wrong type, invalid combo).
struct ConfigError : Error {
  using Error::Error;
};
// Filesystem failures, surfaced with the offending path.
struct IoError : Error {
  using Error::Error;
};

inline std::string shape_string(std::span<const std::size_t> dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << 'x';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of 64-bit floats. Rank 0 is a scalar.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor vector(std::vector<double> vals) {
    const std::size_t n = vals.size();
    return Tensor({n}, std::move(vals));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix initializer");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  // Leading dimension; a scalar counts as one row.
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const {
    if (shape_.size() < 2) return shape_.empty() ? 1 : shape_[0];
    std::size_t c = 1;
    for (std::size_t i = 1; i < shape_.size(); ++i) c *= shape_[i];
    return c;
  }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  const double& operator()(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

  double value() const {
    if (numel() != 1) {
      throw ShapeError("scalar read from tensor of shape " + shape_str());
    }
    return data_[0];
  }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const { return shape_string(shape_); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::span<const double> row(std::size_t i) const {
    const std::size_t c = cols();
    return std::span<const double>(data_.data() + i * c, c);
  }

private:
  static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("zero dimension in shape " + shape_string(shape));
      n *= d;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  }
}

}  // namespace virm
