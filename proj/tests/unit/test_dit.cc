#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "dithc/dit.h"
#include "dithc/gemm.h"
#include "dithc/nn.h"
#include "dithc/ops.h"
#include "support/oracles.h"

using namespace dithc;
using namespace dithc::testing;
using dit::DiTConfig;

namespace {

double norm_rel(const Tensor& a, const Tensor& b) {
  return max_abs_diff(a, b) / std::max(max_abs(b), 1e-300);
}

DiTConfig tiny() {
  DiTConfig c;
  c.H = c.W = 4;
  c.C = 2;
  c.p = 2;
  c.D = 8;
  c.L = 2;
  c.heads = 2;
  c.num_classes = 3;
  c.T = 10;
  c.freq_dim = 8;
  return c;
}

void randomize(Parameter& p, Rng& rng, double sd) { p.value().copy_from(random_normal(p.value().shape(), p.value().dtype(), rng, sd)); }

// Index-walk oracle for the patch layout.
double patch_elem(const Tensor& x, const DiTConfig& c, std::int64_t row, std::int64_t col) {
  const std::int64_t N = c.N(), b = row / N, n = row % N, gw = c.W / c.p;
  const std::int64_t py = col / (c.p * c.C), px = (col / c.C) % c.p, ch = col % c.C;
  return x.get({b, (n / gw) * c.p + py, (n % gw) * c.p + px, ch});
}

}  // namespace

TEST_SUITE("dit") {
  TEST_CASE("config invariants and named sizes") {
    CHECK(DiTConfig::toy().N() == 64);
    CHECK(DiTConfig::by_name("XL/2").D == 1152);
    CHECK(DiTConfig::by_name("XL/2").L == 28);
    CHECK(DiTConfig::by_name("S/2").heads == 6);
    CHECK_THROWS_AS(DiTConfig::by_name("M/3"), ConfigError);
    DiTConfig c;
    c.H = 15;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = DiTConfig{};
    c.heads = 5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("schedule") {
    auto s = dit::Schedule::linear(1000);
    CHECK(s.betas.front() == doctest::Approx(1e-4));
    CHECK(s.betas.back() == doctest::Approx(2e-2));
    for (std::size_t i = 0; i < s.betas.size(); ++i) {
      CHECK((s.betas[i] > 0 && s.betas[i] < 1));
      if (i) CHECK(s.alpha_bars[i] < s.alpha_bars[i - 1]);
    }
  }

  TEST_CASE("patchify rows and identity projection") {
    DiTConfig c = tiny();
    c.C = 4;
    c.D = 16;
    Rng rng(1);
    Tensor x = random_tensor({1, 4, 4, 4}, Dtype::F32, rng);
    Tensor eye = Tensor::zeros({16, 16}, Dtype::F32);
    for (int i = 0; i < 16; ++i) eye.set({i, i}, 1.0);
    Tensor z = dit::patchify(x, eye, Tensor::zeros({16}, Dtype::F32), c);
    CHECK(z.shape() == Shape{4, 16});
    for (std::int64_t r = 0; r < 4; ++r)
      for (std::int64_t k = 0; k < 16; ++k) REQUIRE(z.get({r, k}) == patch_elem(x, c, r, k));
  }

  TEST_CASE("patchify matches a per-patch product") {
    const DiTConfig c = tiny();
    Rng rng(2);
    Tensor x = random_tensor({3, 4, 4, 2}, Dtype::F32, rng);
    Tensor w = random_tensor({8, 8}, Dtype::F32, rng);
    Tensor b = random_tensor({8}, Dtype::F32, rng);
    Tensor z = dit::patchify(x, w, b, c);
    for (std::int64_t r = 0; r < 3 * c.N(); ++r)
      for (std::int64_t j = 0; j < 8; ++j) {
        float acc = 0;
        for (std::int64_t k = 0; k < 8; ++k)
          acc += static_cast<float>(patch_elem(x, c, r, k)) * static_cast<float>(w.get({k, j}));
        REQUIRE(z.get({r, j}) == static_cast<double>(acc + static_cast<float>(b.get({j}))));
      }
  }

  TEST_CASE("depatchify inverts the layout") {
    const DiTConfig c = tiny();
    Rng rng(3);
    Tensor x = random_tensor({2, 4, 4, 2}, Dtype::F64, rng);
    CHECK(bitwise_equal(dit::depatchify(dit::patchify_layout(x, c), c), x));
    Tensor tok = random_tensor({2 * c.N(), c.patch_dim()}, Dtype::F64, rng);
    Tensor img = dit::depatchify(tok, c);
    for (std::int64_t r = 0; r < tok.dim(0); ++r)
      for (std::int64_t k = 0; k < tok.dim(1); ++k) REQUIRE(patch_elem(img, c, r, k) == tok.get({r, k}));
    CHECK_THROWS_AS(dit::depatchify(Tensor::zeros({5, 8}, Dtype::F64), c), ArgumentError);
  }

  TEST_CASE("single patch config is a plain linear map") {
    DiTConfig c = tiny();
    c.p = 4;
    Rng rng(4);
    Tensor x = random_tensor({1, 4, 4, 2}, Dtype::F64, rng);
    CHECK(dit::patchify_layout(x, c).shape() == Shape{1, 32});
    CHECK(bitwise_equal(dit::patchify_layout(x, c), x.reshape({1, 32})));
  }

  TEST_CASE("timestep embedding separates low timesteps") {
    auto e = dit::timestep_embedding(Tensor::from_vector<double>({2}, {0.0, 1.0}), 256, Dtype::F64);
    CHECK(max_abs_diff(e.narrow(0, 0, 1), e.narrow(0, 1, 1)) > 0.1);
    CHECK(e.get({0, 0}) == 1.0);
    CHECK(e.get({0, 128}) == 0.0);
  }

  TEST_CASE("condition embedding and modulation widths") {
    const DiTConfig c = tiny();
    dit::DiT m(c, Dtype::F64);
    m.init(5, dit::InitMode::Random);
    Tensor t = Tensor::from_vector<double>({2}, {0.0, 1.0}), y = Tensor::from_vector<double>({2}, {3.0, 3.0});
    Tensor in[2] = {t, y};
    Tensor cond = m.cond->forward(in)[0];
    CHECK(cond.shape() == Shape{2, c.D});
    CHECK(max_abs_diff(cond.narrow(0, 0, 1), cond.narrow(0, 1, 1)) > 0);
    Tensor cin[1] = {cond};
    CHECK(m.mods[0]->forward(cin)[0].shape() == Shape{2, 6 * c.D});
    Tensor bad[2] = {Tensor::from_vector<double>({1}, {10.0}), Tensor::from_vector<double>({1}, {0.0})};
    CHECK_THROWS_AS(m.cond->forward(bad), ArgumentError);
    Tensor bad_y[2] = {Tensor::from_vector<double>({1}, {0.0}), Tensor::from_vector<double>({1}, {4.0})};
    CHECK_THROWS_AS(m.cond->forward(bad_y), ArgumentError);
  }

  TEST_CASE("zero gates make a block the identity") {
    const DiTConfig c = tiny();
    dit::Block blk("b", c, Dtype::F32);
    Rng rng(6);
    for (auto* p : blk.parameters()) randomize(*p, rng, 0.3);
    Tensor z = random_tensor({2 * c.N(), c.D}, Dtype::F32, rng);
    Tensor mod = random_tensor({2, 6 * c.D}, Dtype::F32, rng);
    mod.narrow(1, 2 * c.D, c.D).fill(0.0);
    mod.narrow(1, 5 * c.D, c.D).fill(0.0);
    CHECK(bitwise_equal(blk.forward(z, mod), z));
  }

  TEST_CASE("single token attention half is the value path") {
    DiTConfig c = tiny();
    c.H = c.W = 2;
    c.heads = 1;
    dit::AttentionHalf att("a", c, Dtype::F64);
    Rng rng(7);
    for (auto* p : att.parameters()) randomize(*p, rng, 0.3);
    Tensor z = random_tensor({1, c.D}, Dtype::F64, rng);
    Tensor mod = random_tensor({1, 6 * c.D}, Dtype::F64, rng);
    Tensor in[2] = {z, mod};
    Tensor out = att.forward(in)[0];
    // Composed from primitive ops with softmax over one key equal to 1.
    const std::int64_t D = c.D;
    Tensor gamma = ops::add(mod.narrow(1, D, D).contiguous(), Tensor::full({1}, Dtype::F64, 1.0));
    Tensor h = nn::adaln_modulate(z, gamma, mod.narrow(1, 0, D).contiguous()).y;
    Tensor v = gemm_naive(h, att.qkv_w.value().narrow(1, 2 * D, D).contiguous());
    v = ops::add(v, att.qkv_b.value().narrow(0, 2 * D, D).contiguous());
    Tensor a = ops::add(gemm_naive(v, att.o_w.value()), att.o_b.value());
    Tensor ref = ops::add(z, ops::mul(a, mod.narrow(1, 2 * D, D).contiguous()));
    CHECK(norm_rel(out, ref) <= 1e-14);
  }

  TEST_CASE("block gradients match finite differences") {
    DiTConfig c = tiny();
    c.D = 16;
    c.heads = 2;
    for (int seed = 0; seed < 3; ++seed) {
      dit::Block blk("b", c, Dtype::F64);
      Rng rng(40 + seed);
      for (auto* p : blk.parameters()) randomize(*p, rng, 0.3);
      Tensor z = random_normal({c.N(), c.D}, Dtype::F64, rng);
      Tensor mod = random_normal({1, 6 * c.D}, Dtype::F64, rng, 0.5);
      Tensor w = random_normal({c.N(), c.D}, Dtype::F64, rng);
      auto loss = [&] { return dot(blk.forward(z, mod), w); };
      blk.forward(z, mod);
      auto [dz, dmod] = blk.backward(w);
      CHECK(norm_rel(dz, finite_diff(loss, z)) <= 1e-5);
      CHECK(norm_rel(dmod, finite_diff(loss, mod)) <= 1e-5);
      for (auto* p : blk.parameters()) {
        INFO(p->name());
        CHECK(norm_rel(p->grad(), finite_diff(loss, p->value())) <= 1e-5);
        p->zero_grad();
      }
    }
  }

  TEST_CASE("ddpm noising") {
    auto s = dit::Schedule::linear(1000);
    Rng rng(8);
    Tensor x0 = random_normal({2, 64}, Dtype::F64, rng), eps = random_normal({2, 64}, Dtype::F64, rng);
    // With a tiny first beta, abar_0 -> 1.
    Tensor a = dit::ddpm_noise(x0, {0, 0}, eps, dit::Schedule::linear(1000, 1e-8, 2e-2));
    CHECK(max_abs_diff(a, x0) <= 1e-3);
    Tensor b = dit::ddpm_noise(x0, {999, 999}, eps, s);
    CHECK(max_abs_diff(b, eps) <= 0.01 * max_abs(x0));
    Tensor c = dit::ddpm_noise(x0, {3, 500}, eps, s);
    for (std::int64_t e = 0; e < 2; ++e)
      for (std::int64_t i = 0; i < 64; ++i) {
        const double ab = s.alpha_bars[e == 0 ? 3 : 500];
        REQUIRE(c.get({e, i}) == std::sqrt(ab) * x0.get({e, i}) + std::sqrt(1 - ab) * eps.get({e, i}));
      }
    CHECK_THROWS_AS(dit::ddpm_noise(x0, {0, 1000}, eps, s), ArgumentError);
    CHECK_THROWS_AS(dit::ddpm_noise(x0, {0}, eps, s), ArgumentError);
    // Variance of x_t for unit-variance inputs.
    Tensor X = random_normal({1, 200000}, Dtype::F64, rng), E = random_normal({1, 200000}, Dtype::F64, rng);
    for (std::int64_t t : {100, 400, 800}) {
      auto v = dit::ddpm_noise(X, {t}, E, s).to_doubles();
      double m = 0, q = 0;
      for (double e : v) m += e, q += e * e;
      m /= static_cast<double>(v.size());
      const double var = q / static_cast<double>(v.size()) - m * m;
      const double ab = s.alpha_bars[static_cast<std::size_t>(t)];
      CHECK(std::abs(var - (ab + (1 - ab))) < 0.02);
    }
  }

  TEST_CASE("shape closure over random configs") {
    Rng rng(9);
    for (int trial = 0; trial < 12; ++trial) {
      DiTConfig c;
      c.p = 1 + static_cast<std::int64_t>(rng() % 3);
      c.H = c.p * (1 + static_cast<std::int64_t>(rng() % 3));
      c.W = c.p * (1 + static_cast<std::int64_t>(rng() % 3));
      c.C = 1 + static_cast<std::int64_t>(rng() % 3);
      c.heads = 1 + static_cast<std::int64_t>(rng() % 3);
      c.D = c.heads * (1 + static_cast<std::int64_t>(rng() % 4));
      c.L = static_cast<std::int64_t>(rng() % 3);
      c.num_classes = 2;
      c.T = 20;
      c.freq_dim = 8;
      dit::DiT m(c, Dtype::F32);
      m.init(trial, dit::InitMode::Random);
      const std::int64_t B = 1 + static_cast<std::int64_t>(rng() % 3);
      Tensor x = random_normal({B, c.H, c.W, c.C}, Dtype::F32, rng);
      Tensor out = m.forward(x, Tensor::full({B}, Dtype::F32, 7), Tensor::full({B}, Dtype::F32, 1));
      CHECK(out.shape() == x.shape());
      m.backward(out);
    }
  }

  TEST_CASE("end-to-end gradients match finite differences") {
    const DiTConfig c = tiny();
    dit::DiT m(c, Dtype::F64);
    m.init(11, dit::InitMode::Random);
    Rng rng(12);
    Tensor x = random_normal({2, c.H, c.W, c.C}, Dtype::F64, rng);
    Tensor eps = random_normal({2, c.H, c.W, c.C}, Dtype::F64, rng);
    Tensor t = Tensor::from_vector<double>({2}, {2.0, 7.0}), y = Tensor::from_vector<double>({2}, {1.0, 3.0});
    auto loss = [&] { return dit::mse(m.forward(x, t, y), eps); };
    Tensor out = m.forward(x, t, y);
    m.backward(dit::mse_grad(out, eps));
    double worst = 0;
    for (auto* p : m.parameters()) {
      Tensor g = p->grad();
      REQUIRE(g.defined());
      const double e = norm_rel(g, finite_diff(loss, p->value()));
      INFO(p->name() << " " << e);
      CHECK(e <= 1e-4);
      worst = std::max(worst, e);
    }
    MESSAGE("worst parameter gradient error " << worst);
  }

  TEST_CASE("adaLN-Zero init makes blocks transparent") {
    const DiTConfig c = tiny();
    dit::DiT m(c, Dtype::F32);
    m.init(13, dit::InitMode::AdaLNZero);
    Rng rng(14);
    // Give the head something to project; the gates stay zero.
    randomize(m.final_layer->w, rng, 0.5);
    randomize(m.final_layer->ada_w, rng, 0.5);
    for (auto& mod : m.mods) {
      randomize(mod->w, rng, 0.5);
      for (std::int64_t k : {2, 5}) mod->w.value().narrow(1, k * c.D, c.D).fill(0.0);
    }
    Tensor x = random_normal({2, c.H, c.W, c.C}, Dtype::F32, rng);
    Tensor t = Tensor::from_vector<float>({2}, {1.f, 5.f}), y = Tensor::from_vector<float>({2}, {0.f, 2.f});
    Tensor out = m.forward(x, t, y);
    Tensor xin[1] = {x};
    Tensor z = m.patch->forward(xin)[0];
    Tensor ty[2] = {t, y};
    Tensor cond = m.cond->forward(ty)[0];
    Tensor fin[2] = {z, cond};
    CHECK(bitwise_equal(out, m.final_layer->forward(fin)[0]));
    // Default init: zero head, zero output.
    m.init(13);
    CHECK(max_abs(m.forward(x, t, y)) == 0.0);
  }

  TEST_CASE("checkpoint round trip is byte exact") {
    const DiTConfig c = tiny();
    dit::DiT a(c, Dtype::F32), b(c, Dtype::F32);
    a.init(15, dit::InitMode::Random);
    b.init(16, dit::InitMode::Random);
    const auto path = (std::filesystem::temp_directory_path() / "dithc_ckpt_test.bin").string();
    dit::save_checkpoint(path, a.parameters());
    dit::load_checkpoint(path, b.parameters());
    CHECK(dit::checkpoint_bytes(a.parameters()) == dit::checkpoint_bytes(b.parameters()));
    const auto bytes = dit::checkpoint_bytes(a.parameters());
    CHECK(std::string(bytes.begin(), bytes.begin() + 6) == "DITHC1");
    dit::DiT other(tiny(), Dtype::F64);
    CHECK_THROWS_AS(dit::load_checkpoint(path, other.parameters()), ConfigError);
    std::FILE* f = std::fopen(path.c_str(), "r+b");
    std::fputc('X', f);
    std::fclose(f);
    CHECK_THROWS_AS(dit::load_checkpoint(path, b.parameters()), ConfigError);
    std::filesystem::remove(path);
  }
}
