#pragma once

#include "dithc/tensor.h"

namespace dithc::ops {

// out = a + alpha * b. b may match a's shape, be a vector over a's last
// axis (broadcast over rows), or hold a single element.
Tensor add(const Tensor& a, const Tensor& b, double alpha = 1.0);
Tensor scale(const Tensor& a, double s);
Tensor tanh_elem(const Tensor& a);
Tensor transpose_2d(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& new_shape);

// Column sums of a rows x cols matrix. Each column is summed in ascending
// row order, independent of the worker count.
Tensor sum_rows(const Tensor& a);
// Column sums per row group: a is (G*R) x cols, result is G x cols.
Tensor sum_row_groups(const Tensor& a, std::int64_t groups);

// Elementwise product, used for gating.
Tensor mul(const Tensor& a, const Tensor& b);

// y[r, :] = x[r, :] * v[g(r), :] where g(r) = r / (rows / groups).
Tensor mul_row_groups(const Tensor& x, const Tensor& v);
// x[r, :] += y[r, :] * v[g(r), :] in place (gated residual).
void add_gated_inplace(Tensor& x, const Tensor& y, const Tensor& v);
// Per-group column sums of x * y: result[g, c] = sum over rows r in group g
// of x[r, c] * y[r, c], rows ascending.
Tensor sum_products_row_groups(const Tensor& x, const Tensor& y, std::int64_t groups);

// Sum of squares over all elements, accumulated sequentially in double.
double sum_squares(const Tensor& a);

}  // namespace dithc::ops
