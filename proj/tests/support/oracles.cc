#include "support/oracles.h"

#include <algorithm>
#include <cmath>

namespace dithc::testing {

Tensor random_tensor(const Shape& shape, Dtype dtype, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = d(rng);
  return Tensor::from_doubles(shape, dtype, v);
}

Tensor random_normal(const Shape& shape, Dtype dtype, Rng& rng, double stddev) {
  std::normal_distribution<double> d(0.0, stddev);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = d(rng);
  return Tensor::from_doubles(shape, dtype, v);
}

double rel_err(double a, double b, double floor) {
  const double den = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / den;
}

double max_rel_err(const Tensor& a, const Tensor& b, double floor) {
  auto x = a.to_doubles(), y = b.to_doubles();
  if (x.size() != y.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, rel_err(x[i], y[i], floor));
  return m;
}

Tensor finite_diff(const std::function<double()>& loss, Tensor& x, double h) {
  Tensor g = Tensor::zeros(x.shape(), Dtype::F64);
  double* px = x.data<double>();
  double* pg = g.data<double>();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double keep = px[i];
    px[i] = keep + h;
    const double up = loss();
    px[i] = keep - h;
    const double down = loss();
    px[i] = keep;
    pg[i] = (up - down) / (2 * h);
  }
  return g;
}

double dot(const Tensor& a, const Tensor& b) {
  auto x = a.to_doubles(), y = b.to_doubles();
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

Tensor naive_attention(const Tensor& Q, const Tensor& K, const Tensor& V, double scale) {
  const std::int64_t B = Q.dim(0), H = Q.dim(1), N = Q.dim(2), Dh = Q.dim(3);
  Tensor O = Tensor::zeros({B, N, H, Dh}, Dtype::F64);
  std::vector<double> s(static_cast<std::size_t>(N));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t i = 0; i < N; ++i) {
        double m = -INFINITY;
        for (std::int64_t j = 0; j < N; ++j) {
          double d = 0;
          for (std::int64_t k = 0; k < Dh; ++k) d += Q.get({b, h, i, k}) * K.get({b, h, j, k});
          s[j] = d * scale;
          m = std::max(m, s[j]);
        }
        double z = 0;
        for (std::int64_t j = 0; j < N; ++j) {
          s[j] = std::exp(s[j] - m);
          z += s[j];
        }
        for (std::int64_t k = 0; k < Dh; ++k) {
          double acc = 0;
          for (std::int64_t j = 0; j < N; ++j) acc += s[j] / z * V.get({b, h, j, k});
          O.set({b, i, h, k}, acc);
        }
      }
  return O;
}

namespace {
template <typename T>
void adamw_unfused_typed(Tensor& param, const Tensor& grad, nn::AdamWState& st, const nn::AdamWHyper& h) {
  st.t += 1;
  const nn::AdamWScalars sc = nn::adamw_scalars(h, st.t);
  const std::int64_t n = param.numel();
  const T decay = static_cast<T>(sc.decay), b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T omb1 = static_cast<T>(sc.one_m_b1), omb2 = static_cast<T>(sc.one_m_b2);
  const T bc2 = static_cast<T>(sc.bc2), eps = static_cast<T>(h.eps), step = static_cast<T>(sc.step_size);
  T* p = param.data<T>();
  const T* g = grad.data<T>();
  T* m = st.m.data<T>();
  T* v = st.v.data<T>();
  std::vector<T> p1(static_cast<std::size_t>(n)), d(static_cast<std::size_t>(n));
  // 1: decoupled weight decay
  for (std::int64_t i = 0; i < n; ++i) p1[i] = p[i] * decay;
  // 2: first moment
  for (std::int64_t i = 0; i < n; ++i) m[i] = b1 * m[i] + omb1 * g[i];
  // 3: second moment
  for (std::int64_t i = 0; i < n; ++i) v[i] = b2 * v[i] + omb2 * g[i] * g[i];
  // 4: bias-corrected denominator
  for (std::int64_t i = 0; i < n; ++i) d[i] = std::sqrt(v[i] / bc2) + eps;
  // 5: update
  for (std::int64_t i = 0; i < n; ++i) p[i] = p1[i] - step * (m[i] / d[i]);
}
}  // namespace

void adamw_unfused_step(Tensor& param, const Tensor& grad, nn::AdamWState& state, const nn::AdamWHyper& h) {
  if (!state.m.defined()) state = nn::AdamWState::zeros_like(param);
  if (param.dtype() == Dtype::F32)
    adamw_unfused_typed<float>(param, grad, state, h);
  else
    adamw_unfused_typed<double>(param, grad, state, h);
}

}  // namespace dithc::testing
