#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "polyv/error.hpp"
#include "polyv/rng.hpp"

namespace polyv {

// Dense n-dimensional array of doubles in row-major order, with an optional
// gradient buffer of the same shape. Constructors reject non-finite values;
// shape product must equal the data length.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  // Entries drawn i.i.d. normal(0, stddev).
  static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev = 1.0);
  static Tensor identity(std::size_t n);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const;

  // 2-D conveniences; throw on rank mismatch.
  std::size_t rows() const;
  std::size_t cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& at(std::size_t i) { return data_[i]; }
  double at(std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols_cached_ + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols_cached_ + c]; }

  double item() const;  // value of a 1-element tensor

  bool has_grad() const { return grad_.has_value(); }
  std::vector<double>& grad();              // allocates zeros on first use
  const std::vector<double>& grad() const;  // throws if absent
  void zero_grad();
  void drop_grad() { grad_.reset(); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

  bool all_finite() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
  std::size_t cols_cached_ = 0;  // last-axis extent, for 2-D at()

  void init_cache();
  void check_finite() const;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

// Flat text format: first line is the space-separated shape, following lines
// hold row-major values at 17 significant digits (round-trip exact).
void write_tensor_text(std::ostream& os, const Tensor& t);
Tensor read_tensor_text(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace polyv
