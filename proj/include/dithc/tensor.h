#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dithc/common.h"
#include "dithc/memory.h"

namespace dithc {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
Shape contiguous_strides(const Shape& s);
std::string shape_str(const Shape& s);

// Dense n-d array handle. Copies share storage; views (transpose, narrow,
// reshape of contiguous data) alias their parent.
class Tensor {
 public:
  Tensor() = default;

  static Tensor empty(const Shape& shape, Dtype dtype);
  static Tensor empty(const Shape& shape, Dtype dtype, MemTier tier);
  static Tensor zeros(const Shape& shape, Dtype dtype);
  static Tensor zeros(const Shape& shape, Dtype dtype, MemTier tier);
  static Tensor full(const Shape& shape, Dtype dtype, double value);
  template <typename T>
  static Tensor from_vector(const Shape& shape, const std::vector<T>& values);
  static Tensor from_doubles(const Shape& shape, Dtype dtype, const std::vector<double>& values);

  bool defined() const { return static_cast<bool>(storage_); }
  std::uint64_t id() const { return id_; }
  const Shape& shape() const { return shape_; }
  const Shape& strides() const { return strides_; }
  std::int64_t offset() const { return offset_; }
  std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const { return shape_numel(shape_); }
  std::size_t nbytes() const { return static_cast<std::size_t>(numel()) * dtype_size(dtype_); }
  Dtype dtype() const { return dtype_; }
  MemTier tier() const;
  bool is_contiguous() const;

  const std::shared_ptr<Storage>& storage() const { return storage_; }

  // Typed pointer to element 0 of this view. T must match dtype.
  template <typename T>
  T* data() const;
  // Untyped pointer to element 0.
  std::byte* raw() const;

  // Views.
  Tensor reshape(const Shape& new_shape) const;
  Tensor transpose_2d() const;
  Tensor narrow(std::size_t axis, std::int64_t start, std::int64_t length) const;
  Tensor as_strided(const Shape& shape, const Shape& strides, std::int64_t offset) const;

  // Copies.
  Tensor contiguous() const;
  Tensor clone() const;
  Tensor clone(MemTier tier) const;
  void copy_from(const Tensor& src);
  void fill(double value);

  // Element access in logical index space (tests and plumbing only).
  double get(std::initializer_list<std::int64_t> idx) const;
  void set(std::initializer_list<std::int64_t> idx, double v);
  std::vector<double> to_doubles() const;
  template <typename T>
  std::vector<T> to_vector() const;

 private:
  Tensor(std::shared_ptr<Storage> storage, Shape shape, Shape strides,
         std::int64_t offset, Dtype dtype);
  std::int64_t flat_offset(std::initializer_list<std::int64_t> idx) const;

  std::shared_ptr<Storage> storage_;
  Shape shape_;
  Shape strides_;
  std::int64_t offset_ = 0;
  Dtype dtype_ = Dtype::F32;
  std::uint64_t id_ = 0;
};

// Bitwise equality of logical contents (same shape and dtype required).
bool bitwise_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);

template <typename T>
T* Tensor::data() const {
  if (dtype_of<T>() != dtype_) throw_argument("Tensor::data: dtype mismatch");
  return reinterpret_cast<T*>(raw());
}

template <typename T>
Tensor Tensor::from_vector(const Shape& shape, const std::vector<T>& values) {
  Tensor t = empty(shape, dtype_of<T>());
  if (static_cast<std::int64_t>(values.size()) != t.numel())
    throw_argument("Tensor::from_vector: value count does not match shape");
  T* p = t.data<T>();
  for (std::size_t i = 0; i < values.size(); ++i) p[i] = values[i];
  return t;
}

template <typename T>
std::vector<T> Tensor::to_vector() const {
  Tensor c = contiguous();
  const T* p = c.data<T>();
  return std::vector<T>(p, p + c.numel());
}

}  // namespace dithc
