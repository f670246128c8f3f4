#include "dithc/nn.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "dithc/ops.h"
#include "dithc/threading.h"

namespace dithc::nn {

namespace {

template <typename F>
void dispatch(Dtype d, F&& f) {
  if (d == Dtype::F32)
    f(float{});
  else
    f(double{});
}

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw_argument(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.dtype() != b.dtype()) throw_argument(std::string(op) + ": mixed dtypes");
}

std::int64_t cols_of(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

constexpr std::size_t kGrain = 1 << 12;

// Elementwise map y[i] = f(x[i]) over contiguous copies.
template <typename Fn>
Tensor map1(const Tensor& x_in, Fn fn) {
  instrument::count_kernel();
  Tensor x = x_in.contiguous();
  Tensor y = Tensor::empty(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>();
    T* py = y.data<T>();
    parallel_for(static_cast<std::size_t>(x.numel()), kGrain, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) py[i] = fn(px[i]);
    });
  });
  return y;
}

template <typename Fn>
Tensor map2(const Tensor& x_in, const Tensor& d_in, const char* op, Fn fn) {
  same_shape(x_in, d_in, op);
  instrument::count_kernel();
  Tensor x = x_in.contiguous(), d = d_in.contiguous();
  Tensor y = Tensor::empty(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>();
    const T* pd = d.data<T>();
    T* py = y.data<T>();
    parallel_for(static_cast<std::size_t>(x.numel()), kGrain, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) py[i] = fn(px[i], pd[i]);
    });
  });
  return y;
}

template <typename T>
constexpr T kGeluK0 = static_cast<T>(0.79788456080286535587989211986876);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluC = static_cast<T>(0.044715);

}  // namespace

Tensor gelu_fwd(const Tensor& x) {
  return map1(x, [](auto v) {
    using T = decltype(v);
    const T u = kGeluK0<T> * (v + kGeluC<T> * v * v * v);
    return T(0.5) * v * (T(1) + std::tanh(u));
  });
}

Tensor gelu_bwd(const Tensor& x, const Tensor& dy) {
  return map2(x, dy, "gelu_bwd", [](auto v, auto d) {
    using T = decltype(v);
    const T u = kGeluK0<T> * (v + kGeluC<T> * v * v * v);
    const T t = std::tanh(u);
    const T du = kGeluK0<T> * (T(1) + T(3) * kGeluC<T> * v * v);
    return d * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
  });
}

Tensor silu_fwd(const Tensor& x) {
  return map1(x, [](auto v) {
    using T = decltype(v);
    return v / (T(1) + std::exp(-v));
  });
}

Tensor silu_bwd(const Tensor& x, const Tensor& dy) {
  return map2(x, dy, "silu_bwd", [](auto v, auto d) {
    using T = decltype(v);
    const T s = T(1) / (T(1) + std::exp(-v));
    return d * (s * (T(1) + v * (T(1) - s)));
  });
}

Tensor softmax_fwd(const Tensor& x_in) {
  instrument::count_kernel();
  Tensor x = x_in.contiguous();
  Tensor y = Tensor::empty(x.shape(), x.dtype());
  const std::int64_t n = cols_of(x);
  const std::int64_t rows = n ? x.numel() / n : 0;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>();
    T* py = y.data<T>();
    parallel_for(static_cast<std::size_t>(rows), 8, [&](std::size_t b, std::size_t e) {
      for (std::int64_t r = static_cast<std::int64_t>(b); r < static_cast<std::int64_t>(e); ++r) {
        const T* xr = px + r * n;
        T* yr = py + r * n;
        T m = -std::numeric_limits<T>::infinity();
        for (std::int64_t i = 0; i < n; ++i) m = std::max(m, xr[i]);
        T s = 0;
        for (std::int64_t i = 0; i < n; ++i) {
          yr[i] = std::exp(xr[i] - m);
          s += yr[i];
        }
        for (std::int64_t i = 0; i < n; ++i) yr[i] /= s;
      }
    });
  });
  return y;
}

Tensor softmax_bwd(const Tensor& y_in, const Tensor& dy_in) {
  same_shape(y_in, dy_in, "softmax_bwd");
  instrument::count_kernel();
  Tensor y = y_in.contiguous(), dy = dy_in.contiguous();
  Tensor dx = Tensor::empty(y.shape(), y.dtype());
  const std::int64_t n = cols_of(y);
  const std::int64_t rows = n ? y.numel() / n : 0;
  dispatch(y.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* py = y.data<T>();
    const T* pd = dy.data<T>();
    T* px = dx.data<T>();
    parallel_for(static_cast<std::size_t>(rows), 8, [&](std::size_t b, std::size_t e) {
      for (std::int64_t r = static_cast<std::int64_t>(b); r < static_cast<std::int64_t>(e); ++r) {
        T dot = 0;
        for (std::int64_t i = 0; i < n; ++i) dot += pd[r * n + i] * py[r * n + i];
        for (std::int64_t i = 0; i < n; ++i) px[r * n + i] = py[r * n + i] * (pd[r * n + i] - dot);
      }
    });
  });
  return dx;
}

namespace {

// Shared normalisation core. Modulation rows: gamma/beta hold `groups`
// rows of D values (groups = 0 means no affine at all).
NormOut norm_forward(const Tensor& h_in, const Tensor& gamma_in, const Tensor& beta_in, double eps,
                     const char* op) {
  instrument::count_kernel();
  Tensor h = h_in.contiguous();
  const std::int64_t D = cols_of(h);
  if (D < 1) throw_argument(std::string(op) + ": D must be >= 1");
  const std::int64_t rows = h.numel() / D;
  const bool affine = gamma_in.defined() || beta_in.defined();
  Tensor gamma, beta;
  std::int64_t groups = 0;
  if (affine) {
    if (!gamma_in.defined() || !beta_in.defined()) throw_argument(std::string(op) + ": gamma and beta go together");
    gamma = gamma_in.contiguous();
    beta = beta_in.contiguous();
    if (gamma.shape() != beta.shape()) throw_argument(std::string(op) + ": gamma/beta shape mismatch");
    if (gamma.dtype() != h.dtype() || beta.dtype() != h.dtype()) throw_argument(std::string(op) + ": mixed dtypes");
    if (cols_of(gamma) != D) throw_argument(std::string(op) + ": modulation length does not match D");
    groups = gamma.numel() / D;
    if (groups < 1 || rows % groups != 0) throw_argument(std::string(op) + ": rows not divisible by modulation groups");
  }
  NormOut out{Tensor::empty(h.shape(), h.dtype()), Tensor::empty({rows}, h.dtype()), Tensor::empty({rows}, h.dtype())};
  dispatch(h.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* ph = h.data<T>();
    const T* pg = affine ? gamma.data<T>() : nullptr;
    const T* pb = affine ? beta.data<T>() : nullptr;
    T* py = out.y.data<T>();
    T* pm = out.mean.data<T>();
    T* pr = out.rstd.data<T>();
    const std::int64_t per = affine ? rows / groups : rows;
    parallel_for(static_cast<std::size_t>(rows), 8, [&](std::size_t b, std::size_t e) {
      for (std::int64_t r = static_cast<std::int64_t>(b); r < static_cast<std::int64_t>(e); ++r) {
        const T* x = ph + r * D;
        double s = 0;
        for (std::int64_t i = 0; i < D; ++i) s += x[i];
        const T mean = static_cast<T>(s / static_cast<double>(D));
        double q = 0;
        for (std::int64_t i = 0; i < D; ++i) {
          const double c = static_cast<double>(x[i] - mean);
          q += c * c;
        }
        const T rstd = static_cast<T>(1.0 / std::sqrt(q / static_cast<double>(D) + eps));
        pm[r] = mean;
        pr[r] = rstd;
        T* y = py + r * D;
        if (affine) {
          const T* g = pg + (r / per) * D;
          const T* bb = pb + (r / per) * D;
          for (std::int64_t i = 0; i < D; ++i) y[i] = g[i] * ((x[i] - mean) * rstd) + bb[i];
        } else {
          for (std::int64_t i = 0; i < D; ++i) y[i] = (x[i] - mean) * rstd;
        }
      }
    });
  });
  return out;
}

NormGrads norm_backward(const Tensor& h_in, const Tensor& gamma_in, const Tensor& mean_in, const Tensor& rstd_in,
                        const Tensor& dy_in, const char* op) {
  same_shape(h_in, dy_in, op);
  instrument::count_kernel();
  Tensor h = h_in.contiguous(), dy = dy_in.contiguous();
  Tensor mean = mean_in.contiguous(), rstd = rstd_in.contiguous();
  const std::int64_t D = cols_of(h);
  const std::int64_t rows = h.numel() / D;
  if (mean.numel() != rows || rstd.numel() != rows) throw_argument(std::string(op) + ": saved stats do not match rows");
  const bool affine = gamma_in.defined();
  Tensor gamma;
  std::int64_t groups = 1;
  if (affine) {
    gamma = gamma_in.contiguous();
    if (cols_of(gamma) != D) throw_argument(std::string(op) + ": modulation length does not match D");
    groups = gamma.numel() / D;
    if (groups < 1 || rows % groups != 0) throw_argument(std::string(op) + ": rows not divisible by modulation groups");
  }
  const std::int64_t per = rows / groups;
  NormGrads g;
  g.dh = Tensor::empty(h.shape(), h.dtype());
  Tensor nhat;  // only needed for dgamma
  if (affine) nhat = Tensor::empty(h.shape(), h.dtype());
  dispatch(h.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* ph = h.data<T>();
    const T* pd = dy.data<T>();
    const T* pm = mean.data<T>();
    const T* pr = rstd.data<T>();
    const T* pg = affine ? gamma.data<T>() : nullptr;
    T* pdh = g.dh.data<T>();
    T* pn = affine ? nhat.data<T>() : nullptr;
    parallel_for(static_cast<std::size_t>(rows), 8, [&](std::size_t b, std::size_t e) {
      for (std::int64_t r = static_cast<std::int64_t>(b); r < static_cast<std::int64_t>(e); ++r) {
        const T* x = ph + r * D;
        const T* d = pd + r * D;
        const T* gr = affine ? pg + (r / per) * D : nullptr;
        const T mu = pm[r], rs = pr[r];
        double sg = 0, sgn = 0;
        for (std::int64_t i = 0; i < D; ++i) {
          const T n = (x[i] - mu) * rs;
          const T gi = affine ? d[i] * gr[i] : d[i];
          if (pn) pn[r * D + i] = n;
          sg += gi;
          sgn += static_cast<double>(gi) * n;
        }
        const T mg = static_cast<T>(sg / static_cast<double>(D));
        const T mgn = static_cast<T>(sgn / static_cast<double>(D));
        T* out = pdh + r * D;
        for (std::int64_t i = 0; i < D; ++i) {
          const T n = (x[i] - mu) * rs;
          const T gi = affine ? d[i] * gr[i] : d[i];
          out[i] = rs * (gi - mg - n * mgn);
        }
      }
    });
  });
  if (affine) {
    g.dbeta = ops::sum_row_groups(dy, groups).reshape(gamma.shape());
    g.dgamma = ops::sum_products_row_groups(dy, nhat, groups).reshape(gamma.shape());
  }
  return g;
}

}  // namespace

NormOut layernorm_fwd(const Tensor& h, const Tensor& gamma, const Tensor& beta, double eps) {
  if (gamma.defined() && gamma.numel() != cols_of(h)) throw_argument("layernorm_fwd: gamma must have length D");
  return norm_forward(h, gamma, beta, eps, "layernorm_fwd");
}

NormGrads layernorm_bwd(const Tensor& h, const Tensor& gamma, const Tensor& mean, const Tensor& rstd,
                        const Tensor& dy) {
  return norm_backward(h, gamma, mean, rstd, dy, "layernorm_bwd");
}

NormOut adaln_modulate(const Tensor& h, const Tensor& gamma_t, const Tensor& beta_t, double eps) {
  if (!gamma_t.defined() || !beta_t.defined()) throw_argument("adaln_modulate: gamma_t and beta_t are required");
  return norm_forward(h, gamma_t, beta_t, eps, "adaln_modulate");
}

NormGrads adaln_bwd(const Tensor& h, const Tensor& gamma_t, const Tensor& mean, const Tensor& rstd,
                    const Tensor& dy) {
  if (!gamma_t.defined()) throw_argument("adaln_bwd: gamma_t is required");
  return norm_backward(h, gamma_t, mean, rstd, dy, "adaln_bwd");
}

// ------------------------------------------------------------------ attention

namespace {

struct HeadView {
  std::int64_t B, H, N, Dh;
};

HeadView check_qkv(const Tensor& Q, const Tensor& K, const Tensor& V) {
  if (Q.rank() != 4 || K.rank() != 4 || V.rank() != 4) throw_argument("attention: Q, K, V must be [B, H, N, Dh]");
  if (Q.shape() != K.shape() || Q.shape() != V.shape())
    throw_argument("attention: Q/K/V shapes differ: " + shape_str(Q.shape()) + ", " + shape_str(K.shape()) + ", " +
                   shape_str(V.shape()));
  if (Q.dtype() != K.dtype() || Q.dtype() != V.dtype()) throw_argument("attention: mixed dtypes");
  return {Q.dim(0), Q.dim(1), Q.dim(2), Q.dim(3)};
}

// Copies head (b, h) of a [B, H, N, Dh] view into a dense N x Dh block.
template <typename T>
void gather_head(const Tensor& X, const T* base, std::int64_t b, std::int64_t h, std::int64_t N, std::int64_t Dh,
                 T* out) {
  const auto& s = X.strides();
  const T* p = base + b * s[0] + h * s[1];
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t d = 0; d < Dh; ++d) out[n * Dh + d] = p[n * s[2] + d * s[3]];
}

// Workspace from the current memory system in the flow's default tier, so
// arena peak accounting sees every byte the kernels touch.
template <typename T>
struct Scratch {
  Allocation a;
  T* p;
  explicit Scratch(std::int64_t n)
      : a(MemorySystem::current().allocate(std::max<std::size_t>(1, static_cast<std::size_t>(n) * sizeof(T)))),
        p(reinterpret_cast<T*>(a.data())) {}
};

template <typename T>
void attention_fwd_typed(const Tensor& Q, const Tensor& K, const Tensor& V, const HeadView& hv, T scale,
                         std::int64_t tile, AttentionOut& out) {
  const auto [B, H, N, Dh] = hv;
  const T* q0 = Q.data<T>();
  const T* k0 = K.data<T>();
  const T* v0 = V.data<T>();
  T* o = out.O.data<T>();
  T* st = out.stats.data<T>();
  WorkerPool::current().run(static_cast<std::size_t>(B * H), [&](std::size_t task) {
    const std::int64_t b = static_cast<std::int64_t>(task) / H, h = static_cast<std::int64_t>(task) % H;
    Scratch<T> qs(N * Dh), ks(N * Dh), vs(N * Dh), ss(tile * tile), acc(tile * Dh), rm(tile), rl(tile);
    gather_head(Q, q0, b, h, N, Dh, qs.p);
    gather_head(K, k0, b, h, N, Dh, ks.p);
    gather_head(V, v0, b, h, N, Dh, vs.p);
    for (std::int64_t i0 = 0; i0 < N; i0 += tile) {
      const std::int64_t ti = std::min(tile, N - i0);
      std::fill(acc.p, acc.p + ti * Dh, T(0));
      std::fill(rm.p, rm.p + ti, -std::numeric_limits<T>::infinity());
      std::fill(rl.p, rl.p + ti, T(0));
      for (std::int64_t j0 = 0; j0 < N; j0 += tile) {
        const std::int64_t tj = std::min(tile, N - j0);
        for (std::int64_t r = 0; r < ti; ++r) {
          const T* qr = qs.p + (i0 + r) * Dh;
          T* srow = ss.p + r * tile;
          T tmax = -std::numeric_limits<T>::infinity();
          for (std::int64_t c = 0; c < tj; ++c) {
            const T* kc = ks.p + (j0 + c) * Dh;
            T dot = 0;
            for (std::int64_t d = 0; d < Dh; ++d) dot += qr[d] * kc[d];
            srow[c] = dot * scale;
            tmax = std::max(tmax, srow[c]);
          }
          const T m_new = std::max(rm.p[r], tmax);
          const T corr = rm.p[r] == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(rm.p[r] - m_new);
          T* ar = acc.p + r * Dh;
          T l = rl.p[r] * corr;
          for (std::int64_t d = 0; d < Dh; ++d) ar[d] *= corr;
          for (std::int64_t c = 0; c < tj; ++c) {
            const T p = std::exp(srow[c] - m_new);
            l += p;
            const T* vc = vs.p + (j0 + c) * Dh;
            for (std::int64_t d = 0; d < Dh; ++d) ar[d] += p * vc[d];
          }
          rl.p[r] = l;
          rm.p[r] = m_new;
        }
      }
      for (std::int64_t r = 0; r < ti; ++r) {
        const std::int64_t n = i0 + r;
        T* orow = o + ((b * N + n) * H + h) * Dh;
        for (std::int64_t d = 0; d < Dh; ++d) orow[d] = acc.p[r * Dh + d] / rl.p[r];
        T* srow = st + ((b * H + h) * N + n) * 2;
        srow[0] = rm.p[r];
        srow[1] = std::log(rl.p[r]);
      }
    }
  });
}

template <typename T>
void attention_bwd_typed(const Tensor& Q, const Tensor& K, const Tensor& V, const Tensor& O, const Tensor& dO,
                         const Tensor& stats, const HeadView& hv, T scale, std::int64_t tile, AttentionGrads& g) {
  const auto [B, H, N, Dh] = hv;
  const T* q0 = Q.data<T>();
  const T* k0 = K.data<T>();
  const T* v0 = V.data<T>();
  const T* po = O.data<T>();
  const T* pdo = dO.data<T>();
  const T* pst = stats.data<T>();
  T* dq = g.dQ.data<T>();
  T* dk = g.dK.data<T>();
  T* dv = g.dV.data<T>();
  WorkerPool::current().run(static_cast<std::size_t>(B * H), [&](std::size_t task) {
    const std::int64_t b = static_cast<std::int64_t>(task) / H, h = static_cast<std::int64_t>(task) % H;
    Scratch<T> qs(N * Dh), ks(N * Dh), vs(N * Dh), dos(N * Dh), dqs(N * Dh), dks(N * Dh), dvs(N * Dh),
        P(tile * tile), dS(tile * tile), Drow(N);
    gather_head(Q, q0, b, h, N, Dh, qs.p);
    gather_head(K, k0, b, h, N, Dh, ks.p);
    gather_head(V, v0, b, h, N, Dh, vs.p);
    for (std::int64_t n = 0; n < N; ++n) {
      const T* orow = po + ((b * N + n) * H + h) * Dh;
      const T* drow = pdo + ((b * N + n) * H + h) * Dh;
      T s = 0;
      for (std::int64_t d = 0; d < Dh; ++d) {
        dos.p[n * Dh + d] = drow[d];
        s += drow[d] * orow[d];
      }
      Drow.p[n] = s;
    }
    std::fill(dqs.p, dqs.p + N * Dh, T(0));
    std::fill(dks.p, dks.p + N * Dh, T(0));
    std::fill(dvs.p, dvs.p + N * Dh, T(0));
    const T* sbase = pst + (b * H + h) * N * 2;
    for (std::int64_t i0 = 0; i0 < N; i0 += tile) {
      const std::int64_t ti = std::min(tile, N - i0);
      for (std::int64_t j0 = 0; j0 < N; j0 += tile) {
        const std::int64_t tj = std::min(tile, N - j0);
        // Recompute the probability tile from the saved row stats.
        for (std::int64_t r = 0; r < ti; ++r) {
          const T* qr = qs.p + (i0 + r) * Dh;
          const T m = sbase[(i0 + r) * 2], lse = sbase[(i0 + r) * 2 + 1];
          for (std::int64_t c = 0; c < tj; ++c) {
            const T* kc = ks.p + (j0 + c) * Dh;
            T dot = 0;
            for (std::int64_t d = 0; d < Dh; ++d) dot += qr[d] * kc[d];
            P.p[r * tile + c] = std::exp(dot * scale - m - lse);
          }
        }
        for (std::int64_t r = 0; r < ti; ++r) {
          const T* dor = dos.p + (i0 + r) * Dh;
          for (std::int64_t c = 0; c < tj; ++c) {
            const T* vc = vs.p + (j0 + c) * Dh;
            T dp = 0;
            for (std::int64_t d = 0; d < Dh; ++d) dp += dor[d] * vc[d];
            const T p = P.p[r * tile + c];
            dS.p[r * tile + c] = p * (dp - Drow.p[i0 + r]);
          }
        }
        for (std::int64_t c = 0; c < tj; ++c) {
          T* dvc = dvs.p + (j0 + c) * Dh;
          T* dkc = dks.p + (j0 + c) * Dh;
          for (std::int64_t r = 0; r < ti; ++r) {
            const T p = P.p[r * tile + c];
            const T ds = dS.p[r * tile + c] * scale;
            const T* dor = dos.p + (i0 + r) * Dh;
            const T* qr = qs.p + (i0 + r) * Dh;
            for (std::int64_t d = 0; d < Dh; ++d) {
              dvc[d] += p * dor[d];
              dkc[d] += ds * qr[d];
            }
          }
        }
        for (std::int64_t r = 0; r < ti; ++r) {
          T* dqr = dqs.p + (i0 + r) * Dh;
          for (std::int64_t c = 0; c < tj; ++c) {
            const T ds = dS.p[r * tile + c] * scale;
            const T* kc = ks.p + (j0 + c) * Dh;
            for (std::int64_t d = 0; d < Dh; ++d) dqr[d] += ds * kc[d];
          }
        }
      }
    }
    for (std::int64_t n = 0; n < N; ++n) {
      const std::int64_t off = ((b * N + n) * H + h) * Dh;
      std::copy(dqs.p + n * Dh, dqs.p + (n + 1) * Dh, dq + off);
      std::copy(dks.p + n * Dh, dks.p + (n + 1) * Dh, dk + off);
      std::copy(dvs.p + n * Dh, dvs.p + (n + 1) * Dh, dv + off);
    }
  });
}

}  // namespace

AttentionOut attention_fwd(const Tensor& Q, const Tensor& K, const Tensor& V, double scale, std::int64_t tile) {
  const HeadView hv = check_qkv(Q, K, V);
  if (tile < 1) throw_argument("attention_fwd: tile must be >= 1");
  instrument::count_kernel();
  AttentionOut out{Tensor::empty({hv.B, hv.N, hv.H, hv.Dh}, Q.dtype()), Tensor::empty({hv.B, hv.H, hv.N, 2}, Q.dtype())};
  dispatch(Q.dtype(), [&](auto tag) {
    using T = decltype(tag);
    attention_fwd_typed<T>(Q, K, V, hv, static_cast<T>(scale), tile, out);
  });
  return out;
}

AttentionGrads attention_bwd(const Tensor& Q, const Tensor& K, const Tensor& V, const Tensor& O_in,
                             const Tensor& dO_in, const Tensor& stats_in, double scale, std::int64_t tile) {
  const HeadView hv = check_qkv(Q, K, V);
  if (tile < 1) throw_argument("attention_bwd: tile must be >= 1");
  const Shape tok{hv.B, hv.N, hv.H, hv.Dh};
  if (O_in.shape() != tok || dO_in.shape() != tok) throw_argument("attention_bwd: O/dO must be [B, N, H, Dh]");
  if (stats_in.shape() != Shape{hv.B, hv.H, hv.N, 2}) throw_argument("attention_bwd: stats shape mismatch");
  if (O_in.dtype() != Q.dtype() || dO_in.dtype() != Q.dtype() || stats_in.dtype() != Q.dtype())
    throw_argument("attention_bwd: mixed dtypes");
  instrument::count_kernel();
  Tensor O = O_in.contiguous(), dO = dO_in.contiguous(), stats = stats_in.contiguous();
  AttentionGrads g{Tensor::empty(tok, Q.dtype()), Tensor::empty(tok, Q.dtype()), Tensor::empty(tok, Q.dtype())};
  dispatch(Q.dtype(), [&](auto tag) {
    using T = decltype(tag);
    attention_bwd_typed<T>(Q, K, V, O, dO, stats, hv, static_cast<T>(scale), tile, g);
  });
  return g;
}

// ------------------------------------------------------------------ fused ops

void fused_scale_add(Tensor& y, const Tensor& a_in, double s) {
  same_shape(y, a_in, "fused_scale_add");
  if (!y.is_contiguous()) throw_argument("fused_scale_add: destination must be contiguous");
  instrument::count_kernel();
  Tensor a = a_in.contiguous();
  dispatch(y.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* py = y.data<T>();
    const T* pa = a.data<T>();
    const T sv = static_cast<T>(s);
    parallel_for(static_cast<std::size_t>(y.numel()), kGrain * 4, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) py[i] = py[i] + sv * pa[i];
    });
  });
}

AdamWState AdamWState::zeros_like(const Tensor& param, MemTier tier) {
  return AdamWState{Tensor::zeros(param.shape(), param.dtype(), tier), Tensor::zeros(param.shape(), param.dtype(), tier), 0};
}

AdamWScalars adamw_scalars(const AdamWHyper& h, std::int64_t t) {
  const double td = static_cast<double>(t);
  return AdamWScalars{1.0 - h.lr * h.weight_decay, 1.0 - h.beta1, 1.0 - h.beta2, 1.0 - std::pow(h.beta2, td),
                      h.lr / (1.0 - std::pow(h.beta1, td))};
}

void adamw_fused_step(Tensor& param, const Tensor& grad_in, AdamWState& state, const AdamWHyper& h) {
  same_shape(param, grad_in, "adamw_fused_step");
  if (!state.m.defined() || !state.v.defined()) state = AdamWState::zeros_like(param);
  same_shape(param, state.m, "adamw_fused_step");
  same_shape(param, state.v, "adamw_fused_step");
  if (!param.is_contiguous() || !state.m.is_contiguous() || !state.v.is_contiguous())
    throw_argument("adamw_fused_step: param and state must be contiguous");
  instrument::count_kernel();
  Tensor grad = grad_in.contiguous();
  state.t += 1;
  const AdamWScalars sc = adamw_scalars(h, state.t);
  dispatch(param.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* p = param.data<T>();
    const T* g = grad.data<T>();
    T* m = state.m.data<T>();
    T* v = state.v.data<T>();
    const T decay = static_cast<T>(sc.decay), b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
    const T omb1 = static_cast<T>(sc.one_m_b1), omb2 = static_cast<T>(sc.one_m_b2);
    const T bc2 = static_cast<T>(sc.bc2), eps = static_cast<T>(h.eps), step = static_cast<T>(sc.step_size);
    parallel_for(static_cast<std::size_t>(param.numel()), kGrain * 4, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        T pi = p[i] * decay;
        const T gi = g[i];
        const T mi = b1 * m[i] + omb1 * gi;
        const T vi = b2 * v[i] + omb2 * gi * gi;
        const T d = std::sqrt(vi / bc2) + eps;
        pi = pi - step * (mi / d);
        m[i] = mi;
        v[i] = vi;
        p[i] = pi;
      }
    });
  });
}

}  // namespace dithc::nn
