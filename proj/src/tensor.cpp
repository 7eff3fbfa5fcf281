#include "polyv/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace polyv {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t p = 1;
  for (std::size_t e : shape) p *= e;
  return p;
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {
  init_cache();
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str() + " does not match data length " +
                         std::to_string(data_.size()));
  }
  init_cache();
  check_finite();
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = value;
  t.check_finite();
  return t;
}

Tensor Tensor::randn(std::vector<std::size_t> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = rng.normal(0.0, stddev);
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str());
  }
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (shape_.size() != 2) throw DimensionError("rows() on non-2D tensor " + shape_str());
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() != 2) throw DimensionError("cols() on non-2D tensor " + shape_str());
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor with " + std::to_string(data_.size()) + " elements");
  return data_[0];
}

std::vector<double>& Tensor::grad() {
  if (!grad_) grad_.emplace(data_.size(), 0.0);
  return *grad_;
}

const std::vector<double>& Tensor::grad() const {
  if (!grad_) throw InternalError("gradient accessed before allocation");
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::init_cache() {
  cols_cached_ = shape_.empty() ? 1 : shape_.back();
}

void Tensor::check_finite() const {
  if (!all_finite()) throw DimensionError("tensor constructor given non-finite value");
}

void write_tensor_text(std::ostream& os, const Tensor& t) {
  const auto& shape = t.shape();
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ' ';
    os << shape[i];
  }
  os << '\n';
  std::size_t row_len = shape.empty() ? 1 : shape.back();
  if (row_len == 0) row_len = 1;
  char buf[40];
  for (std::size_t i = 0; i < t.numel(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", t.at(i));
    os << buf;
    os << (((i + 1) % row_len == 0) ? '\n' : ' ');
  }
  if (t.numel() % row_len != 0) os << '\n';
}

Tensor read_tensor_text(std::istream& is) {
  std::string first;
  while (std::getline(is, first)) {
    if (first.find_first_not_of(" \t\r") != std::string::npos) break;
  }
  std::istringstream shape_line(first);
  std::vector<std::size_t> shape;
  std::size_t e;
  while (shape_line >> e) shape.push_back(e);
  std::size_t n = shape_product(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(is >> data[i])) throw IoError("tensor text truncated at element " + std::to_string(i));
  }
  // Consume the rest of the final data line so a caller reading several
  // tensors from one stream lands at the start of the next record.
  is.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path);
  write_tensor_text(os, t);
  if (!os) throw IoError("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open for read: " + path);
  return read_tensor_text(is);
}

}  // namespace polyv
