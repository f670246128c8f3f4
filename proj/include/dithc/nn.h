#pragma once

#include <cstdint>

#include "dithc/tensor.h"

namespace dithc::nn {

// tanh-approximated GELU and its exact analytic derivative.
Tensor gelu_fwd(const Tensor& x);
Tensor gelu_bwd(const Tensor& x, const Tensor& dy);

Tensor silu_fwd(const Tensor& x);
Tensor silu_bwd(const Tensor& x, const Tensor& dy);

// Softmax over the last axis, max-subtracted.
Tensor softmax_fwd(const Tensor& x);
Tensor softmax_bwd(const Tensor& y, const Tensor& dy);

struct NormOut {
  Tensor y;
  Tensor mean;  // [rows]
  Tensor rstd;  // [rows]
};

struct NormGrads {
  Tensor dh;
  Tensor dgamma;
  Tensor dbeta;
};

constexpr double kLayerNormEps = 1e-6;

// Row-wise LayerNorm over the last axis. gamma/beta are optional length-D
// affines; pass undefined tensors for a unit affine.
NormOut layernorm_fwd(const Tensor& h, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps);
// dgamma/dbeta are undefined when gamma was undefined.
NormGrads layernorm_bwd(const Tensor& h, const Tensor& gamma, const Tensor& mean, const Tensor& rstd,
                        const Tensor& dy);

// y = gamma_t * LayerNorm(h) + beta_t. gamma_t and beta_t are either
// length D (shared by all rows) or G x D, where consecutive blocks of
// rows/G rows share one modulation row.
NormOut adaln_modulate(const Tensor& h, const Tensor& gamma_t, const Tensor& beta_t,
                       double eps = kLayerNormEps);
NormGrads adaln_bwd(const Tensor& h, const Tensor& gamma_t, const Tensor& mean, const Tensor& rstd,
                    const Tensor& dy);

constexpr std::int64_t kAttentionTile = 64;

struct AttentionOut {
  Tensor O;      // [B, N, H, Dh], contiguous (token-major, heads interleaved)
  Tensor stats;  // [B, H, N, 2]: running max and log-denominator per query row
};

struct AttentionGrads {
  Tensor dQ, dK, dV;  // each [B, N, H, Dh], contiguous
};

// Streaming attention. Q, K, V are [B, H, N, Dh] views with arbitrary
// strides. Keys are processed in tiles of `tile` rows with a running max
// and denominator; no N x N buffer is formed.
AttentionOut attention_fwd(const Tensor& Q, const Tensor& K, const Tensor& V, double scale,
                           std::int64_t tile = kAttentionTile);
// Recomputes probabilities tile by tile from the saved stats. O and dO are
// in the [B, N, H, Dh] layout returned by attention_fwd.
AttentionGrads attention_bwd(const Tensor& Q, const Tensor& K, const Tensor& V, const Tensor& O,
                             const Tensor& dO, const Tensor& stats, double scale,
                             std::int64_t tile = kAttentionTile);

// y <- y + s * a in one pass.
void fused_scale_add(Tensor& y, const Tensor& a, double s);

struct AdamWHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  Tensor m;
  Tensor v;
  std::int64_t t = 0;

  // Zero moments shaped like `param`, placed in `tier`.
  static AdamWState zeros_like(const Tensor& param, MemTier tier = MemTier::Slow);
};

// Per-step scalars, shared with the unfused reference so both evaluate the
// same constants.
struct AdamWScalars {
  double decay;      // 1 - lr * weight_decay
  double one_m_b1;   // 1 - beta1
  double one_m_b2;   // 1 - beta2
  double bc2;        // 1 - beta2^t
  double step_size;  // lr / (1 - beta1^t)
};
AdamWScalars adamw_scalars(const AdamWHyper& h, std::int64_t t);

// Single pass over param, grad, m, v. Per element, in order:
//   p = p * decay
//   m = beta1 * m + (1 - beta1) * g
//   v = beta2 * v + (1 - beta2) * g * g
//   d = sqrt(v / bc2) + eps
//   p = p - step_size * (m / d)
void adamw_fused_step(Tensor& param, const Tensor& grad, AdamWState& state, const AdamWHyper& h);

}  // namespace dithc::nn
