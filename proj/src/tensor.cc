#include "dithc/tensor.h"

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

namespace dithc {

namespace {

std::atomic<std::uint64_t> g_next_tensor_id{1};

// Visits every logical index of `shape` in row-major order, passing the
// element offset computed from `strides`.
template <typename F>
void for_each_offset(const Shape& shape, const Shape& strides, std::int64_t base, F&& f) {
  const std::size_t r = shape.size();
  if (shape_numel(shape) == 0) return;
  if (r == 0) {
    f(base);
    return;
  }
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t off = base;
  const std::int64_t inner = shape[r - 1];
  const std::int64_t inner_stride = strides[r - 1];
  for (;;) {
    for (std::int64_t i = 0; i < inner; ++i) f(off + i * inner_stride);
    std::size_t ax = r - 1;
    for (;;) {
      if (ax == 0) return;
      --ax;
      ++idx[ax];
      off += strides[ax];
      if (idx[ax] < shape[ax]) break;
      off -= strides[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
}

double load(const std::byte* base, Dtype d, std::int64_t i) {
  if (d == Dtype::F32) return reinterpret_cast<const float*>(base)[i];
  return reinterpret_cast<const double*>(base)[i];
}

void store(std::byte* base, Dtype d, std::int64_t i, double v) {
  if (d == Dtype::F32)
    reinterpret_cast<float*>(base)[i] = static_cast<float>(v);
  else
    reinterpret_cast<double*>(base)[i] = v;
}

}  // namespace

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

Shape contiguous_strides(const Shape& s) {
  Shape st(s.size());
  std::int64_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= std::max<std::int64_t>(s[i], 1);
  }
  return st;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(std::shared_ptr<Storage> storage, Shape shape, Shape strides, std::int64_t offset,
               Dtype dtype)
    : storage_(std::move(storage)),
      shape_(std::move(shape)),
      strides_(std::move(strides)),
      offset_(offset),
      dtype_(dtype),
      id_(g_next_tensor_id.fetch_add(1)) {}

Tensor Tensor::empty(const Shape& shape, Dtype dtype) { return empty(shape, dtype, default_tier()); }

Tensor Tensor::empty(const Shape& shape, Dtype dtype, MemTier tier) {
  for (auto e : shape)
    if (e < 0) throw_argument("Tensor::empty: negative extent in " + shape_str(shape));
  const std::size_t bytes = static_cast<std::size_t>(shape_numel(shape)) * dtype_size(dtype);
  auto st = std::make_shared<Storage>(MemorySystem::current().allocate(std::max<std::size_t>(bytes, 1), tier));
  return Tensor(std::move(st), shape, contiguous_strides(shape), 0, dtype);
}

Tensor Tensor::zeros(const Shape& shape, Dtype dtype) { return zeros(shape, dtype, default_tier()); }

Tensor Tensor::zeros(const Shape& shape, Dtype dtype, MemTier tier) {
  Tensor t = empty(shape, dtype, tier);
  std::memset(t.raw(), 0, t.nbytes());
  return t;
}

Tensor Tensor::full(const Shape& shape, Dtype dtype, double value) {
  Tensor t = empty(shape, dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from_doubles(const Shape& shape, Dtype dtype, const std::vector<double>& values) {
  Tensor t = empty(shape, dtype);
  if (static_cast<std::int64_t>(values.size()) != t.numel())
    throw_argument("Tensor::from_doubles: value count does not match shape");
  std::byte* p = t.raw();
  for (std::size_t i = 0; i < values.size(); ++i) store(p, dtype, static_cast<std::int64_t>(i), values[i]);
  return t;
}

MemTier Tensor::tier() const {
  if (!storage_) throw_argument("Tensor::tier: undefined tensor");
  return storage_->tier();
}

bool Tensor::is_contiguous() const {
  std::int64_t expect = 1;
  for (std::size_t i = shape_.size(); i-- > 0;) {
    if (shape_[i] == 1) continue;
    if (strides_[i] != expect) return false;
    expect *= shape_[i];
  }
  return true;
}

std::byte* Tensor::raw() const {
  if (!storage_) throw_argument("Tensor::raw: undefined tensor");
  return storage_->data() + offset_ * static_cast<std::int64_t>(dtype_size(dtype_));
}

Tensor Tensor::reshape(const Shape& new_shape) const {
  Shape s = new_shape;
  int infer = -1;
  std::int64_t known = 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == -1) {
      if (infer >= 0) throw_argument("reshape: more than one inferred axis");
      infer = static_cast<int>(i);
    } else {
      known *= s[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || numel() % known != 0)
      throw_argument("reshape: cannot infer axis for " + shape_str(new_shape));
    s[infer] = numel() / known;
  }
  if (shape_numel(s) != numel())
    throw_argument("reshape: " + shape_str(shape_) + " -> " + shape_str(new_shape) + " changes element count");
  if (is_contiguous()) return Tensor(storage_, s, contiguous_strides(s), offset_, dtype_);
  return contiguous().reshape(s);
}

Tensor Tensor::transpose_2d() const {
  if (rank() != 2) throw_argument("transpose_2d: expected rank 2, got " + shape_str(shape_));
  return Tensor(storage_, {shape_[1], shape_[0]}, {strides_[1], strides_[0]}, offset_, dtype_);
}

Tensor Tensor::narrow(std::size_t axis, std::int64_t start, std::int64_t length) const {
  if (axis >= rank()) throw_argument("narrow: axis out of range");
  if (start < 0 || length < 0 || start + length > shape_[axis])
    throw_argument("narrow: range out of bounds for " + shape_str(shape_));
  Shape s = shape_;
  s[axis] = length;
  return Tensor(storage_, s, strides_, offset_ + start * strides_[axis], dtype_);
}

Tensor Tensor::as_strided(const Shape& shape, const Shape& strides, std::int64_t offset) const {
  if (shape.size() != strides.size()) throw_argument("as_strided: rank mismatch");
  const std::int64_t cap = static_cast<std::int64_t>(storage_->bytes() / dtype_size(dtype_));
  std::int64_t hi = offset;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] < 0 || strides[i] < 0) throw_argument("as_strided: negative extent or stride");
    if (shape[i] > 0) hi += (shape[i] - 1) * strides[i];
  }
  if (offset < 0 || (shape_numel(shape) > 0 && hi >= cap)) throw_argument("as_strided: view exceeds storage");
  return Tensor(storage_, shape, strides, offset, dtype_);
}

Tensor Tensor::contiguous() const {
  if (is_contiguous()) return *this;
  return clone();
}

Tensor Tensor::clone() const { return clone(default_tier()); }

Tensor Tensor::clone(MemTier tier) const {
  Tensor out = empty(shape_, dtype_, tier);
  out.copy_from(*this);
  return out;
}

void Tensor::copy_from(const Tensor& src) {
  if (src.shape_ != shape_) throw_argument("copy_from: shape " + shape_str(src.shape_) + " vs " + shape_str(shape_));
  if (src.dtype_ != dtype_) throw_argument("copy_from: dtype mismatch");
  if (is_contiguous() && src.is_contiguous()) {
    std::memmove(raw(), src.raw(), nbytes());
    return;
  }
  const std::size_t es = dtype_size(dtype_);
  const std::byte* sbase = src.storage_->data();
  std::vector<std::int64_t> soffs;
  soffs.reserve(static_cast<std::size_t>(numel()));
  for_each_offset(src.shape_, src.strides_, src.offset_, [&](std::int64_t o) { soffs.push_back(o); });
  std::byte* dbase = storage_->data();
  std::size_t k = 0;
  for_each_offset(shape_, strides_, offset_, [&](std::int64_t o) {
    std::memcpy(dbase + o * es, sbase + soffs[k++] * es, es);
  });
}

void Tensor::fill(double value) {
  std::byte* base = storage_->data();
  const Dtype d = dtype_;
  for_each_offset(shape_, strides_, offset_, [&](std::int64_t o) { store(base, d, o, value); });
}

std::int64_t Tensor::flat_offset(std::initializer_list<std::int64_t> idx) const {
  if (idx.size() != rank()) throw_argument("index rank mismatch for " + shape_str(shape_));
  std::int64_t off = offset_;
  std::size_t ax = 0;
  for (auto i : idx) {
    if (i < 0 || i >= shape_[ax]) throw_argument("index out of range for " + shape_str(shape_));
    off += i * strides_[ax++];
  }
  return off;
}

double Tensor::get(std::initializer_list<std::int64_t> idx) const {
  return load(storage_->data(), dtype_, flat_offset(idx));
}

void Tensor::set(std::initializer_list<std::int64_t> idx, double v) {
  store(storage_->data(), dtype_, flat_offset(idx), v);
}

std::vector<double> Tensor::to_doubles() const {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(numel()));
  const std::byte* base = storage_->data();
  for_each_offset(shape_, strides_, offset_, [&](std::int64_t o) { out.push_back(load(base, dtype_, o)); });
  return out;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  Tensor ca = a.contiguous(), cb = b.contiguous();
  return std::memcmp(ca.raw(), cb.raw(), ca.nbytes()) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw_argument("max_abs_diff: shape mismatch");
  auto x = a.to_doubles(), y = b.to_doubles();
  double m = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = std::abs(x[i] - y[i]);
    if (d > m || std::isnan(d)) m = std::isnan(d) ? INFINITY : d;
  }
  return m;
}

double max_abs(const Tensor& a) {
  double m = 0;
  for (double v : a.to_doubles()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace dithc
