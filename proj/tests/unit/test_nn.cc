#include <doctest.h>

#include <cmath>

#include "dithc/nn.h"
#include "dithc/ops.h"
#include "support/oracles.h"

using namespace dithc;
using namespace dithc::testing;

namespace {

// Normwise relative error: max |a - b| / max |b|.
double norm_rel(const Tensor& a, const Tensor& b) {
  const double den = std::max(max_abs(b), 1e-300);
  return max_abs_diff(a, b) / den;
}

// Worst normwise error of an analytic gradient against central differences
// over `seeds` random draws. make(seed) fills x, w and returns the analytic
// gradient of <f(x), w>; loss() evaluates <f(x), w>.
template <typename Setup>
double worst_fd(int seeds, Setup setup) {
  double worst = 0;
  for (int s = 0; s < seeds; ++s) worst = std::max(worst, setup(s));
  return worst;
}

Tensor qkv_view(const Tensor& packed, int which, std::int64_t B, std::int64_t H, std::int64_t N, std::int64_t Dh) {
  const std::int64_t D = H * Dh;
  return packed.as_strided({B, H, N, Dh}, {N * 3 * D, Dh, 3 * D, 1}, which * D);
}

}  // namespace

TEST_SUITE("nn") {
  TEST_CASE("gelu values and gradient") {
    auto x = Tensor::from_vector<double>({2}, {0.0, 10.0});
    auto y = nn::gelu_fwd(x).to_vector<double>();
    CHECK(y[0] == 0.0);
    CHECK(std::abs(y[1] - 10.0) < 1e-6);
    const double worst = worst_fd(20, [](int seed) {
      Rng rng(100 + seed);
      Tensor xs = random_tensor({17}, Dtype::F64, rng, -4, 4);
      Tensor w = random_tensor({17}, Dtype::F64, rng);
      auto fd = finite_diff([&] { return dot(nn::gelu_fwd(xs), w); }, xs);
      return norm_rel(nn::gelu_bwd(xs, w), fd);
    });
    CHECK(worst <= 1e-6);
  }

  TEST_CASE("silu values and gradient") {
    auto x = Tensor::from_vector<double>({2}, {0.0, 20.0});
    auto y = nn::silu_fwd(x).to_vector<double>();
    CHECK(y[0] == 0.0);
    CHECK(std::abs(y[1] - 20.0) < 1e-6);
    const double worst = worst_fd(20, [](int seed) {
      Rng rng(200 + seed);
      Tensor xs = random_tensor({17}, Dtype::F64, rng, -6, 6);
      Tensor w = random_tensor({17}, Dtype::F64, rng);
      auto fd = finite_diff([&] { return dot(nn::silu_fwd(xs), w); }, xs);
      return norm_rel(nn::silu_bwd(xs, w), fd);
    });
    CHECK(worst <= 1e-6);
  }

  TEST_CASE("softmax: uniform rows, shift invariance, row sums, gradient") {
    auto u = Tensor::full({2, 5}, Dtype::F64, 3.0);
    for (double v : nn::softmax_fwd(u).to_doubles()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
    auto x = Tensor::from_vector<double>({1, 4}, {1, 2, 3, 4});
    auto xs = ops::add(x, Tensor::from_vector<double>({1}, {3.0}));
    CHECK(bitwise_equal(nn::softmax_fwd(x), nn::softmax_fwd(xs)));
    Rng rng(300);
    auto r32 = random_tensor({6, 33}, Dtype::F32, rng, -5, 5);
    auto y32 = nn::softmax_fwd(r32);
    for (int i = 0; i < 6; ++i) {
      double s = 0;
      for (int j = 0; j < 33; ++j) s += y32.get({i, j});
      CHECK(std::abs(s - 1) <= 1e-6);
    }
    auto r64 = random_tensor({6, 33}, Dtype::F64, rng, -5, 5);
    auto y64 = nn::softmax_fwd(r64);
    for (int i = 0; i < 6; ++i) {
      double s = 0;
      for (int j = 0; j < 33; ++j) s += y64.get({i, j});
      CHECK(std::abs(s - 1) <= 1e-12);
    }
    const double worst = worst_fd(20, [](int seed) {
      Rng g(310 + seed);
      Tensor xs = random_tensor({3, 7}, Dtype::F64, g, -3, 3);
      Tensor w = random_tensor({3, 7}, Dtype::F64, g);
      auto fd = finite_diff([&] { return dot(nn::softmax_fwd(xs), w); }, xs);
      return norm_rel(nn::softmax_bwd(nn::softmax_fwd(xs), w), fd);
    });
    CHECK(worst <= 1e-6);
  }

  TEST_CASE("layernorm identities") {
    auto c32 = Tensor::full({2, 9}, Dtype::F32, 0.1);
    auto one = Tensor::full({9}, Dtype::F32, 1.0), zero = Tensor::zeros({9}, Dtype::F32);
    CHECK(max_abs(nn::layernorm_fwd(c32, one, zero).y) == 0.0);
    auto c64 = Tensor::full({2, 9}, Dtype::F64, 2.5);
    CHECK(max_abs(nn::layernorm_fwd(c64, Tensor(), Tensor()).y) == 0.0);
    Rng rng(400);
    auto h = random_tensor({4, 12}, Dtype::F64, rng, -2, 2);
    auto beta = random_tensor({12}, Dtype::F64, rng);
    auto y = nn::layernorm_fwd(h, Tensor::full({12}, Dtype::F64, 1.0), beta).y;
    double mb = 0;
    for (double v : beta.to_doubles()) mb += v / 12;
    for (int r = 0; r < 4; ++r) {
      double my = 0;
      for (int c = 0; c < 12; ++c) my += y.get({r, c}) / 12;
      CHECK(std::abs(my - mb) < 1e-12);
    }
  }

  TEST_CASE("layernorm gradients for h, gamma and beta") {
    double worst = 0;
    for (int seed = 0; seed < 20; ++seed) {
      Rng rng(410 + seed);
      Tensor h = random_tensor({5, 8}, Dtype::F64, rng, -2, 2);
      Tensor gamma = random_tensor({8}, Dtype::F64, rng, 0.5, 1.5);
      Tensor beta = random_tensor({8}, Dtype::F64, rng);
      Tensor w = random_tensor({5, 8}, Dtype::F64, rng);
      auto loss = [&] { return dot(nn::layernorm_fwd(h, gamma, beta).y, w); };
      auto f = nn::layernorm_fwd(h, gamma, beta);
      auto g = nn::layernorm_bwd(h, gamma, f.mean, f.rstd, w);
      worst = std::max(worst, norm_rel(g.dh, finite_diff(loss, h)));
      worst = std::max(worst, norm_rel(g.dgamma, finite_diff(loss, gamma)));
      worst = std::max(worst, norm_rel(g.dbeta, finite_diff(loss, beta)));
    }
    CHECK(worst <= 1e-6);
  }

  TEST_CASE("adaln modulation identities and gradients") {
    Rng rng(500);
    auto h = random_tensor({6, 8}, Dtype::F64, rng);
    auto plain = nn::layernorm_fwd(h, Tensor(), Tensor()).y;
    auto mod = nn::adaln_modulate(h, Tensor::full({8}, Dtype::F64, 1.0), Tensor::zeros({8}, Dtype::F64)).y;
    CHECK(bitwise_equal(plain, mod));
    auto beta = random_tensor({8}, Dtype::F64, rng);
    auto flat = nn::adaln_modulate(h, Tensor::zeros({8}, Dtype::F64), beta).y;
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 8; ++c) CHECK(flat.get({r, c}) == beta.get({c}));
    CHECK_THROWS_AS(nn::adaln_modulate(h, Tensor::zeros({7}, Dtype::F64), Tensor::zeros({7}, Dtype::F64)),
                    ArgumentError);
    double worst = 0;
    for (int seed = 0; seed < 20; ++seed) {
      Rng g(510 + seed);
      Tensor x = random_tensor({6, 8}, Dtype::F64, g, -2, 2);
      Tensor gm = random_tensor({2, 8}, Dtype::F64, g, 0.5, 1.5);  // two modulation groups
      Tensor bt = random_tensor({2, 8}, Dtype::F64, g);
      Tensor w = random_tensor({6, 8}, Dtype::F64, g);
      auto loss = [&] { return dot(nn::adaln_modulate(x, gm, bt).y, w); };
      auto f = nn::adaln_modulate(x, gm, bt);
      auto gr = nn::adaln_bwd(x, gm, f.mean, f.rstd, w);
      worst = std::max(worst, norm_rel(gr.dh, finite_diff(loss, x)));
      worst = std::max(worst, norm_rel(gr.dgamma, finite_diff(loss, gm)));
      worst = std::max(worst, norm_rel(gr.dbeta, finite_diff(loss, bt)));
    }
    CHECK(worst <= 1e-6);
  }

  TEST_CASE("attention: N = 1 returns V, identical keys average V") {
    Rng rng(600);
    auto v = random_tensor({1, 1, 1, 4}, Dtype::F64, rng);
    auto q = random_tensor({1, 1, 1, 4}, Dtype::F64, rng);
    auto o = nn::attention_fwd(q, q, v, 0.5).O;
    CHECK(o.to_doubles() == v.to_doubles());
    auto Q = random_tensor({1, 1, 5, 3}, Dtype::F64, rng);
    auto K = Tensor::full({1, 1, 5, 3}, Dtype::F64, 0.7);
    auto V = random_tensor({1, 1, 5, 3}, Dtype::F64, rng);
    auto O = nn::attention_fwd(Q, K, V, 1.0, 2).O;
    for (int d = 0; d < 3; ++d) {
      double mean = 0;
      for (int j = 0; j < 5; ++j) mean += V.get({0, 0, j, d}) / 5;
      for (int i = 0; i < 5; ++i) CHECK(std::abs(O.get({0, i, 0, d}) - mean) < 1e-14);
    }
  }

  TEST_CASE("attention matches the materialized oracle") {
    for (Dtype dt : {Dtype::F32, Dtype::F64}) {
      Rng rng(610);
      auto q = random_tensor({1, 1, 64, 32}, dt, rng);
      auto k = random_tensor({1, 1, 64, 32}, dt, rng);
      auto v = random_tensor({1, 1, 64, 32}, dt, rng);
      const double scale = 1.0 / std::sqrt(32.0);
      auto o = nn::attention_fwd(q, k, v, scale, 16).O;
      auto ref = naive_attention(q, k, v, scale);
      CHECK(norm_rel(o, ref) <= (dt == Dtype::F32 ? 1e-5 : 1e-12));
    }
  }

  TEST_CASE("attention on strided multi-head views; outputs stay in V's column range") {
    Rng rng(620);
    const std::int64_t B = 2, H = 3, N = 10, Dh = 4;
    auto packed = random_tensor({B * N, 3 * H * Dh}, Dtype::F64, rng);
    auto Q = qkv_view(packed, 0, B, H, N, Dh), K = qkv_view(packed, 1, B, H, N, Dh), V = qkv_view(packed, 2, B, H, N, Dh);
    auto o = nn::attention_fwd(Q, K, V, 0.5, 3).O;
    CHECK(max_rel_err(o, naive_attention(Q, K, V, 0.5), 1e-3) <= 1e-12);
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h)
        for (int d = 0; d < Dh; ++d) {
          double lo = INFINITY, hi = -INFINITY;
          for (int j = 0; j < N; ++j) {
            lo = std::min(lo, V.get({b, h, j, d}));
            hi = std::max(hi, V.get({b, h, j, d}));
          }
          for (int i = 0; i < N; ++i) {
            const double x = o.get({b, i, h, d});
            CHECK(x >= lo - 1e-12);
            CHECK(x <= hi + 1e-12);
          }
        }
  }

  TEST_CASE("attention backward: zero upstream, N = 1, finite differences") {
    Rng rng(630);
    auto q = random_tensor({1, 2, 6, 3}, Dtype::F64, rng);
    auto k = random_tensor({1, 2, 6, 3}, Dtype::F64, rng);
    auto v = random_tensor({1, 2, 6, 3}, Dtype::F64, rng);
    auto f = nn::attention_fwd(q, k, v, 0.7, 4);
    auto g0 = nn::attention_bwd(q, k, v, f.O, Tensor::zeros({1, 6, 2, 3}, Dtype::F64), f.stats, 0.7, 4);
    CHECK(max_abs(g0.dQ) == 0.0);
    CHECK(max_abs(g0.dK) == 0.0);
    CHECK(max_abs(g0.dV) == 0.0);

    auto q1 = random_tensor({1, 1, 1, 3}, Dtype::F64, rng);
    auto f1 = nn::attention_fwd(q1, q1, q1, 1.0);
    auto dO = random_tensor({1, 1, 1, 3}, Dtype::F64, rng);
    auto g1 = nn::attention_bwd(q1, q1, q1, f1.O, dO, f1.stats, 1.0);
    CHECK(g1.dV.to_doubles() == dO.to_doubles());
    CHECK(max_abs(g1.dQ) == 0.0);
    CHECK(max_abs(g1.dK) == 0.0);

    double worst = 0;
    for (int seed = 0; seed < 20; ++seed) {
      Rng g(640 + seed);
      const std::int64_t N = seed == 0 ? 48 : 9;
      Tensor Q = random_tensor({1, 1, N, 4}, Dtype::F64, g);
      Tensor K = random_tensor({1, 1, N, 4}, Dtype::F64, g);
      Tensor V = random_tensor({1, 1, N, 4}, Dtype::F64, g);
      Tensor W = random_tensor({1, N, 1, 4}, Dtype::F64, g);
      const double sc = 0.5;
      auto loss = [&] { return dot(nn::attention_fwd(Q, K, V, sc, 5).O, W); };
      auto fw = nn::attention_fwd(Q, K, V, sc, 5);
      auto gr = nn::attention_bwd(Q, K, V, fw.O, W, fw.stats, sc, 5);
      worst = std::max(worst, norm_rel(gr.dQ.reshape({1, 1, N, 4}), finite_diff(loss, Q)));
      worst = std::max(worst, norm_rel(gr.dK.reshape({1, 1, N, 4}), finite_diff(loss, K)));
      worst = std::max(worst, norm_rel(gr.dV.reshape({1, 1, N, 4}), finite_diff(loss, V)));
    }
    CHECK(worst <= 1e-6);
  }

  TEST_CASE("attention backward never forms an N x N buffer") {
    MemoryConfig cfg;
    cfg.fast_capacity_bytes = kUnbounded;
    MemorySystem ms(cfg);
    MemoryScope scope(ms);
    TierScope fast(MemTier::Fast);
    const std::int64_t N = 512, Dh = 16;
    Rng rng(650);
    auto q = random_tensor({1, 1, N, Dh}, Dtype::F64, rng);
    auto k = random_tensor({1, 1, N, Dh}, Dtype::F64, rng);
    auto v = random_tensor({1, 1, N, Dh}, Dtype::F64, rng);
    auto f = nn::attention_fwd(q, k, v, 0.25);
    auto dO = random_tensor({1, N, 1, Dh}, Dtype::F64, rng);
    const auto base = ms.fast().used_bytes();
    ms.fast().reset_peak();
    auto g = nn::attention_bwd(q, k, v, f.O, dO, f.stats, 0.25);
    const auto extra = ms.fast().peak_bytes() - base;
    CHECK(extra < static_cast<std::size_t>(N * N) * sizeof(double));
  }

  TEST_CASE("fused_scale_add") {
    Rng rng(700);
    auto y = random_tensor({3, 4}, Dtype::F64, rng);
    auto keep = y.clone();
    auto a = random_tensor({3, 4}, Dtype::F64, rng);
    nn::fused_scale_add(y, a, 0.0);
    CHECK(bitwise_equal(y, keep));
    auto z = y.clone();
    nn::fused_scale_add(z, ops::scale(y, -1.0), 1.0);
    CHECK(max_abs(z) == 0.0);
    auto w = y.clone();
    nn::fused_scale_add(w, a, -0.37);
    CHECK(bitwise_equal(w, ops::add(y, ops::scale(a, -0.37), 1.0)));
    CHECK_THROWS_AS(nn::fused_scale_add(w, Tensor::zeros({4, 3}, Dtype::F64), 1.0), ArgumentError);
  }

  TEST_CASE("adamw: zero grad, first step closed form, unfused equality") {
    Rng rng(800);
    nn::AdamWHyper h;
    h.lr = 1e-3;
    auto p = random_tensor({10}, Dtype::F64, rng);
    auto keep = p.clone();
    nn::AdamWState st;
    nn::adamw_fused_step(p, Tensor::zeros({10}, Dtype::F64), st, h);
    CHECK(bitwise_equal(p, keep));
    CHECK(st.t == 1);

    auto g = random_tensor({10}, Dtype::F64, rng);
    nn::AdamWState s1;
    auto p1 = keep.clone();
    nn::adamw_fused_step(p1, g, s1, h);
    for (int i = 0; i < 10; ++i) {
      CHECK(s1.m.get({i}) == (1 - h.beta1) * g.get({i}));
      CHECK(s1.v.get({i}) == (1 - h.beta2) * g.get({i}) * g.get({i}));
    }

    h.weight_decay = 0.05;
    auto pf = random_tensor({37}, Dtype::F64, rng);
    auto pu = pf.clone();
    nn::AdamWState sf, su;
    for (int step = 0; step < 10; ++step) {
      auto gs = random_tensor({37}, Dtype::F64, rng, -3, 3);
      nn::adamw_fused_step(pf, gs, sf, h);
      adamw_unfused_step(pu, gs, su, h);
    }
    CHECK(bitwise_equal(pf, pu));
    CHECK(bitwise_equal(sf.m, su.m));
    CHECK(bitwise_equal(sf.v, su.v));
    CHECK(sf.t == 10);
  }
}
