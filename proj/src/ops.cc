#include "dithc/ops.h"

#include <cmath>

#include "dithc/threading.h"

namespace dithc::ops {

namespace {

void same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) throw_argument(std::string(op) + ": mixed dtypes");
}

std::int64_t last_dim(const Tensor& a) { return a.rank() == 0 ? 1 : a.shape().back(); }

template <typename F>
void dispatch(Dtype d, F&& f) {
  if (d == Dtype::F32)
    f(float{});
  else
    f(double{});
}

constexpr std::size_t kGrain = 1 << 14;

}  // namespace

Tensor add(const Tensor& a_in, const Tensor& b_in, double alpha) {
  same_dtype(a_in, b_in, "add");
  instrument::count_kernel();
  Tensor a = a_in.contiguous(), b = b_in.contiguous();
  const std::int64_t n = a.numel();
  const std::int64_t cols = last_dim(a);
  enum { Full, Row, Scalar } mode;
  if (b.shape() == a.shape())
    mode = Full;
  else if (b.numel() == 1)
    mode = Scalar;
  else if (b.rank() == 1 && b.numel() == cols)
    mode = Row;
  else
    throw_argument("add: cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
  Tensor out = Tensor::empty(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    const T* pb = b.data<T>();
    T* po = out.data<T>();
    const T al = static_cast<T>(alpha);
    parallel_for(static_cast<std::size_t>(n), kGrain, [&](std::size_t s, std::size_t e) {
      for (std::size_t i = s; i < e; ++i) {
        const T bv = mode == Full ? pb[i] : mode == Scalar ? pb[0] : pb[static_cast<std::int64_t>(i) % cols];
        po[i] = pa[i] + al * bv;
      }
    });
  });
  return out;
}

Tensor scale(const Tensor& a_in, double s) {
  instrument::count_kernel();
  Tensor a = a_in.contiguous();
  Tensor out = Tensor::empty(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    T* po = out.data<T>();
    const T sv = static_cast<T>(s);
    parallel_for(static_cast<std::size_t>(a.numel()), kGrain, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) po[i] = pa[i] * sv;
    });
  });
  return out;
}

Tensor tanh_elem(const Tensor& a_in) {
  instrument::count_kernel();
  Tensor a = a_in.contiguous();
  Tensor out = Tensor::empty(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    T* po = out.data<T>();
    parallel_for(static_cast<std::size_t>(a.numel()), kGrain / 8, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) po[i] = std::tanh(pa[i]);
    });
  });
  return out;
}

Tensor transpose_2d(const Tensor& a) { return a.transpose_2d().contiguous(); }

Tensor reshape(const Tensor& a, const Shape& new_shape) { return a.reshape(new_shape); }

Tensor sum_rows(const Tensor& a) { return sum_row_groups(a, 1).reshape({last_dim(a)}); }

Tensor sum_row_groups(const Tensor& a_in, std::int64_t groups) {
  instrument::count_kernel();
  Tensor a = a_in.contiguous();
  const std::int64_t cols = last_dim(a);
  const std::int64_t rows = cols ? a.numel() / cols : 0;
  if (groups <= 0 || rows % groups != 0) throw_argument("sum_row_groups: rows not divisible by groups");
  const std::int64_t per = rows / groups;
  Tensor out = Tensor::zeros({groups, cols}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    T* po = out.data<T>();
    // Parallel over groups and column blocks; rows are always ascending.
    const std::int64_t cb = 256;
    const std::int64_t nblk = (cols + cb - 1) / cb;
    WorkerPool::current().run(static_cast<std::size_t>(groups * nblk), [&](std::size_t task) {
      const std::int64_t g = static_cast<std::int64_t>(task) / nblk;
      const std::int64_t c0 = (static_cast<std::int64_t>(task) % nblk) * cb;
      const std::int64_t c1 = std::min(cols, c0 + cb);
      T* dst = po + g * cols;
      for (std::int64_t r = g * per; r < (g + 1) * per; ++r) {
        const T* src = pa + r * cols;
        for (std::int64_t c = c0; c < c1; ++c) dst[c] += src[c];
      }
    });
  });
  return out;
}

Tensor mul(const Tensor& a_in, const Tensor& b_in) {
  same_dtype(a_in, b_in, "mul");
  if (a_in.shape() != b_in.shape()) throw_argument("mul: shape mismatch");
  instrument::count_kernel();
  Tensor a = a_in.contiguous(), b = b_in.contiguous();
  Tensor out = Tensor::empty(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    const T* pb = b.data<T>();
    T* po = out.data<T>();
    parallel_for(static_cast<std::size_t>(a.numel()), kGrain, [&](std::size_t s, std::size_t e) {
      for (std::size_t i = s; i < e; ++i) po[i] = pa[i] * pb[i];
    });
  });
  return out;
}

namespace {
struct GroupGeom {
  std::int64_t cols, rows, groups, per;
};

GroupGeom group_geom(const Tensor& x, const Tensor& v, const char* op) {
  const std::int64_t cols = last_dim(x);
  if (last_dim(v) != cols) throw_argument(std::string(op) + ": column mismatch");
  const std::int64_t rows = cols ? x.numel() / cols : 0;
  const std::int64_t groups = cols ? v.numel() / cols : 0;
  if (groups <= 0 || rows % groups != 0) throw_argument(std::string(op) + ": rows not divisible by groups");
  return {cols, rows, groups, rows / groups};
}
}  // namespace

Tensor mul_row_groups(const Tensor& x_in, const Tensor& v_in) {
  same_dtype(x_in, v_in, "mul_row_groups");
  instrument::count_kernel();
  Tensor x = x_in.contiguous(), v = v_in.contiguous();
  const auto g = group_geom(x, v, "mul_row_groups");
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>();
    const T* pv = v.data<T>();
    T* po = out.data<T>();
    parallel_for(static_cast<std::size_t>(g.rows), 16, [&](std::size_t s, std::size_t e) {
      for (std::int64_t r = static_cast<std::int64_t>(s); r < static_cast<std::int64_t>(e); ++r) {
        const T* vr = pv + (r / g.per) * g.cols;
        for (std::int64_t c = 0; c < g.cols; ++c) po[r * g.cols + c] = px[r * g.cols + c] * vr[c];
      }
    });
  });
  return out;
}

void add_gated_inplace(Tensor& x, const Tensor& y_in, const Tensor& v_in) {
  same_dtype(x, y_in, "add_gated_inplace");
  same_dtype(x, v_in, "add_gated_inplace");
  if (x.shape() != y_in.shape()) throw_argument("add_gated_inplace: shape mismatch");
  if (!x.is_contiguous()) throw_argument("add_gated_inplace: destination must be contiguous");
  instrument::count_kernel();
  Tensor y = y_in.contiguous(), v = v_in.contiguous();
  const auto g = group_geom(x, v, "add_gated_inplace");
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* px = x.data<T>();
    const T* py = y.data<T>();
    const T* pv = v.data<T>();
    parallel_for(static_cast<std::size_t>(g.rows), 16, [&](std::size_t s, std::size_t e) {
      for (std::int64_t r = static_cast<std::int64_t>(s); r < static_cast<std::int64_t>(e); ++r) {
        const T* vr = pv + (r / g.per) * g.cols;
        for (std::int64_t c = 0; c < g.cols; ++c) px[r * g.cols + c] += py[r * g.cols + c] * vr[c];
      }
    });
  });
}

Tensor sum_products_row_groups(const Tensor& x_in, const Tensor& y_in, std::int64_t groups) {
  same_dtype(x_in, y_in, "sum_products_row_groups");
  if (x_in.shape() != y_in.shape()) throw_argument("sum_products_row_groups: shape mismatch");
  instrument::count_kernel();
  Tensor x = x_in.contiguous(), y = y_in.contiguous();
  const std::int64_t cols = last_dim(x);
  const std::int64_t rows = cols ? x.numel() / cols : 0;
  if (groups <= 0 || rows % groups != 0) throw_argument("sum_products_row_groups: rows not divisible by groups");
  const std::int64_t per = rows / groups;
  Tensor out = Tensor::zeros({groups, cols}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>();
    const T* py = y.data<T>();
    T* po = out.data<T>();
    WorkerPool::current().run(static_cast<std::size_t>(groups), [&](std::size_t gi) {
      const std::int64_t gr = static_cast<std::int64_t>(gi);
      T* dst = po + gr * cols;
      for (std::int64_t r = gr * per; r < (gr + 1) * per; ++r)
        for (std::int64_t c = 0; c < cols; ++c) dst[c] += px[r * cols + c] * py[r * cols + c];
    });
  });
  return out;
}

double sum_squares(const Tensor& a_in) {
  Tensor a = a_in.contiguous();
  double acc = 0;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* p = a.data<T>();
    for (std::int64_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(p[i]) * static_cast<double>(p[i]);
  });
  return acc;
}

}  // namespace dithc::ops
