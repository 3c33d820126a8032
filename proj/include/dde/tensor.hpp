#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dde {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct CorruptFileError : Error {
  using Error::Error;
};
struct FactorError : Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major f64 array. Rank 0 holds a single value.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw DimensionError("tensor data size " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) throw DimensionError("axis out of range for " + shape_str(shape_));
    return shape_[i];
  }

  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_.at(1) + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_.at(1) + j]; }

  double item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool v) {
    requires_grad_ = v;
    return *this;
  }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != data_.size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    Tensor t(std::move(s), data_);
    t.requires_grad_ = requires_grad_;
    return t;
  }

  // Rows [begin, end) along axis 0.
  Tensor rows(std::size_t begin, std::size_t end) const {
    if (rank() == 0 || end > shape_[0] || begin > end)
      throw DimensionError("row slice out of range for " + shape_str(shape_));
    std::size_t stride = data_.size() / shape_[0];
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(s, std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                         data_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Concatenate along axis 0.
inline Tensor concat_rows(const std::vector<const Tensor*>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape s = parts[0]->shape();
  if (s.empty()) throw DimensionError("concat_rows: rank-0 input");
  std::size_t rows = 0;
  for (auto* p : parts) {
    if (p->rank() != s.size() || !std::equal(s.begin() + 1, s.end(), p->shape().begin() + 1))
      throw DimensionError("concat_rows: incompatible shape " + shape_str(p->shape()));
    rows += p->dim(0);
  }
  s[0] = rows;
  std::vector<double> out;
  out.reserve(shape_size(s));
  for (auto* p : parts) out.insert(out.end(), p->vec().begin(), p->vec().end());
  return Tensor(s, std::move(out));
}

}  // namespace dde
