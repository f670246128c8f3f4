#include "dithc/dit.h"

#include <cmath>
#include <cstring>
#include <random>

#include "dithc/gemm.h"
#include "dithc/nn.h"
#include "dithc/ops.h"
#include "dithc/threading.h"

namespace dithc::dit {

void DiTConfig::validate() const {
  auto bad = [](const std::string& m) { throw ConfigError("DiTConfig: " + m); };
  if (H <= 0 || W <= 0 || C <= 0 || p <= 0 || D <= 0 || L < 0 || heads <= 0) bad("extents must be positive");
  if (H % p != 0 || W % p != 0) bad("H and W must be divisible by p");
  if (D % heads != 0) bad("D must be divisible by the head count");
  if (num_classes < 1 || T < 1 || mlp_ratio < 1) bad("num_classes, T and mlp_ratio must be positive");
  if (freq_dim < 2 || freq_dim % 2 != 0) bad("freq_dim must be even");
}

DiTConfig DiTConfig::toy() { return DiTConfig{}; }

DiTConfig DiTConfig::by_name(const std::string& name) {
  DiTConfig c;
  if (name == "toy") return c;
  c.H = c.W = 32;
  c.num_classes = 1000;
  if (name == "S/2") c.D = 384, c.L = 12, c.heads = 6;
  else if (name == "B/2") c.D = 768, c.L = 12, c.heads = 12;
  else if (name == "L/2") c.D = 1024, c.L = 24, c.heads = 16;
  else if (name == "XL/2") c.D = 1152, c.L = 28, c.heads = 16;
  else throw ConfigError("unknown model '" + name + "' (expected toy, S/2, B/2, L/2, XL/2)");
  return c;
}

Schedule Schedule::linear(std::int64_t T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("Schedule: T must be positive");
  if (!(beta_start > 0 && beta_end < 1 && beta_start <= beta_end)) throw ConfigError("Schedule: need 0 < b0 <= b1 < 1");
  Schedule s;
  double abar = 1.0;
  for (std::int64_t i = 0; i < T; ++i) {
    double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
    s.betas.push_back(b);
    s.alphas.push_back(1.0 - b);
    abar *= 1.0 - b;
    s.alpha_bars.push_back(abar);
  }
  return s;
}

namespace {

template <typename F>
auto by_dtype(Dtype d, F&& f) {
  if (d == Dtype::F32) return f(float{});
  return f(double{});
}

// Contiguous copy of columns [k*D, (k+1)*D) of a [B, n*D] tensor.
Tensor chunk(const Tensor& mod, std::int64_t k, std::int64_t D) { return mod.narrow(1, k * D, D).contiguous(); }

Tensor one_plus(const Tensor& t) { return ops::add(t, Tensor::full({1}, t.dtype(), 1.0)); }

void check_dtype(const Tensor& t, Dtype d, const char* what) {
  if (t.dtype() != d) throw_argument(std::string(what) + ": dtype mismatch");
}

Tensor Tt(const Tensor& a) { return a.transpose_2d(); }

// Recomputed instead of saved: the modulated norm input of a half block.
Tensor modulated(const Tensor& z, const Tensor& gamma, const Tensor& shift) {
  return nn::adaln_modulate(z, gamma, shift).y;
}

std::vector<Tensor> one(Tensor t) {
  std::vector<Tensor> v;
  v.push_back(std::move(t));
  return v;
}

}  // namespace

Tensor patchify_layout(const Tensor& x_in, const DiTConfig& cfg) {
  if (x_in.rank() != 4 || x_in.dim(1) != cfg.H || x_in.dim(2) != cfg.W || x_in.dim(3) != cfg.C)
    throw_argument("patchify: expected [B," + std::to_string(cfg.H) + "," + std::to_string(cfg.W) + "," +
                   std::to_string(cfg.C) + "], got " + shape_str(x_in.shape()));
  if (cfg.H % cfg.p || cfg.W % cfg.p) throw_argument("patchify: H and W must be divisible by p");
  const Tensor x = x_in.contiguous();
  const std::int64_t B = x.dim(0), p = cfg.p, C = cfg.C, gw = cfg.W / p, N = cfg.N(), P = cfg.patch_dim();
  Tensor out = Tensor::empty({B * N, P}, x.dtype());
  const std::size_t es = dtype_size(x.dtype());
  const std::byte* src = x.raw();
  std::byte* dst = out.raw();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t n = 0; n < N; ++n) {
      const std::int64_t hp = n / gw, wp = n % gw;
      for (std::int64_t py = 0; py < p; ++py) {
        const std::int64_t row = hp * p + py;
        const std::byte* s = src + ((((b * cfg.H + row) * cfg.W) + wp * p) * C) * static_cast<std::int64_t>(es);
        std::byte* d = dst + ((b * N + n) * P + py * p * C) * static_cast<std::int64_t>(es);
        std::memcpy(d, s, static_cast<std::size_t>(p * C) * es);
      }
    }
  return out;
}

Tensor depatchify_layout(const Tensor& tok_in, const DiTConfig& cfg) {
  const std::int64_t N = cfg.N(), P = cfg.patch_dim(), p = cfg.p, C = cfg.C, gw = cfg.W / p;
  if (tok_in.rank() != 2 || tok_in.dim(1) != P || tok_in.dim(0) % N != 0)
    throw_argument("depatchify: expected [B*" + std::to_string(N) + "," + std::to_string(P) + "], got " +
                   shape_str(tok_in.shape()));
  const Tensor tok = tok_in.contiguous();
  const std::int64_t B = tok.dim(0) / N;
  Tensor out = Tensor::empty({B, cfg.H, cfg.W, C}, tok.dtype());
  const std::int64_t es = static_cast<std::int64_t>(dtype_size(tok.dtype()));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t n = 0; n < N; ++n) {
      const std::int64_t hp = n / gw, wp = n % gw;
      for (std::int64_t py = 0; py < p; ++py) {
        const std::int64_t row = hp * p + py;
        std::memcpy(out.raw() + (((b * cfg.H + row) * cfg.W + wp * p) * C) * es,
                    tok.raw() + ((b * N + n) * P + py * p * C) * es, static_cast<std::size_t>(p * C * es));
      }
    }
  return out;
}

Tensor patchify(const Tensor& x, const Tensor& w_embed, const Tensor& bias, const DiTConfig& cfg) {
  return matmul_bias(patchify_layout(x, cfg), w_embed, bias);
}

Tensor timestep_embedding(const Tensor& t, std::int64_t dim, Dtype dtype) {
  if (t.rank() != 1) throw_argument("timestep_embedding: t must be [B]");
  if (dim < 2 || dim % 2) throw_argument("timestep_embedding: dim must be even");
  const std::int64_t B = t.dim(0), half = dim / 2;
  const auto tv = t.to_doubles();
  std::vector<double> vals(static_cast<std::size_t>(B * dim));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t k = 0; k < half; ++k) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double a = tv[static_cast<std::size_t>(b)] * f;
      vals[static_cast<std::size_t>(b * dim + k)] = std::cos(a);
      vals[static_cast<std::size_t>(b * dim + half + k)] = std::sin(a);
    }
  return Tensor::from_doubles({B, dim}, dtype, vals);
}

Tensor ddpm_noise(const Tensor& x0_in, const std::vector<std::int64_t>& t, const Tensor& eps_in, const Schedule& s) {
  if (x0_in.shape() != eps_in.shape() || x0_in.dtype() != eps_in.dtype())
    throw_argument("ddpm_noise: eps must match x0 in shape and dtype");
  if (x0_in.rank() < 1 || static_cast<std::int64_t>(t.size()) != x0_in.dim(0))
    throw_argument("ddpm_noise: need one timestep per example");
  for (auto ti : t)
    if (ti < 0 || ti >= s.T()) throw_argument("ddpm_noise: timestep " + std::to_string(ti) + " out of range");
  const Tensor x0 = x0_in.contiguous(), eps = eps_in.contiguous();
  Tensor out = Tensor::empty(x0.shape(), x0.dtype());
  const std::int64_t per = x0.dim(0) ? x0.numel() / x0.dim(0) : 0;
  by_dtype(x0.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* a = x0.data<T>();
    const T* e = eps.data<T>();
    T* o = out.data<T>();
    for (std::size_t b = 0; b < t.size(); ++b) {
      const double ab = s.alpha_bars[static_cast<std::size_t>(t[b])];
      const T sa = static_cast<T>(std::sqrt(ab)), sn = static_cast<T>(std::sqrt(1.0 - ab));
      for (std::int64_t i = 0; i < per; ++i) {
        const std::int64_t k = static_cast<std::int64_t>(b) * per + i;
        o[k] = sa * a[k] + sn * e[k];
      }
    }
    return 0;
  });
  return out;
}

double mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) throw_argument("mse: shape mismatch");
  const auto a = pred.to_doubles(), b = target.to_doubles();
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return a.empty() ? 0.0 : s / static_cast<double>(a.size());
}

Tensor mse_grad(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) throw_argument("mse_grad: shape mismatch");
  return ops::scale(ops::add(pred, target, -1.0), 2.0 / static_cast<double>(pred.numel()));
}

void ParamModule::flush_grads() {
  auto staged = std::move(staged_);
  staged_.clear();
  for (auto& [p, g] : staged) p->accumulate_grad(g);
}

std::vector<Parameter*> ParamModule::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

Parameter& ParamModule::add_param(const std::string& local, const Shape& shape, Dtype dtype) {
  params_.push_back(std::make_unique<Parameter>(name_ + "." + local, Tensor::zeros(shape, dtype)));
  return *params_.back();
}

PatchEmbed::PatchEmbed(const DiTConfig& cfg, Dtype dt)
    : ParamModule("x_embed"),
      w(add_param("weight", {cfg.patch_dim(), cfg.D}, dt)),
      b(add_param("bias", {cfg.D}, dt)),
      cfg_(cfg) {}

std::vector<Tensor> PatchEmbed::forward(std::span<const Tensor> in) {
  if (in.size() != 1) throw_argument("PatchEmbed: expects one input");
  check_dtype(in[0], w.value().dtype(), "PatchEmbed");
  Tensor P = patchify_layout(in[0], cfg_);
  Tensor z = matmul_bias(P, w.value(), b.value());
  saved_ = {P};
  return one(z);
}

std::vector<Tensor> PatchEmbed::backward(std::span<const Tensor> gout) {
  const Tensor& dz = gout[0];
  if (dz.defined()) {
    stage(w, matmul(Tt(saved_[0]), dz));
    stage(b, ops::sum_rows(dz));
  }
  flush_grads();
  clear_saved();
  return {Tensor()};
}

CondEmbed::CondEmbed(const DiTConfig& cfg, Dtype dt)
    : ParamModule("t_embed"),
      w1(add_param("mlp0.weight", {cfg.freq_dim, cfg.D}, dt)),
      b1(add_param("mlp0.bias", {cfg.D}, dt)),
      w2(add_param("mlp2.weight", {cfg.D, cfg.D}, dt)),
      b2(add_param("mlp2.bias", {cfg.D}, dt)),
      table(add_param("label_table", {cfg.num_classes + 1, cfg.D}, dt)),
      cfg_(cfg) {}

std::vector<Tensor> CondEmbed::forward(std::span<const Tensor> in) {
  if (in.size() != 2) throw_argument("CondEmbed: expects (t, y)");
  const Tensor &t = in[0], &y = in[1];
  if (t.rank() != 1 || y.rank() != 1 || t.dim(0) != y.dim(0)) throw_argument("CondEmbed: t and y must be [B]");
  const auto tv = t.to_doubles(), yv = y.to_doubles();
  labels_.clear();
  for (std::size_t i = 0; i < tv.size(); ++i) {
    if (!(tv[i] >= 0 && tv[i] < static_cast<double>(cfg_.T)) || tv[i] != std::floor(tv[i]))
      throw_argument("CondEmbed: timestep out of range [0, T)");
    if (!(yv[i] >= 0 && yv[i] <= static_cast<double>(cfg_.num_classes)) || yv[i] != std::floor(yv[i]))
      throw_argument("CondEmbed: label out of range [0, num_classes]");
    labels_.push_back(static_cast<std::int64_t>(yv[i]));
  }
  const Dtype dt = w1.value().dtype();
  Tensor temb = timestep_embedding(t, cfg_.freq_dim, dt);
  Tensor h = matmul_bias(temb, w1.value(), b1.value());
  Tensor c = matmul_bias(nn::silu_fwd(h), w2.value(), b2.value());
  const std::int64_t D = cfg_.D;
  Tensor ye = Tensor::empty({t.dim(0), D}, dt);
  for (std::size_t i = 0; i < labels_.size(); ++i)
    ye.narrow(0, static_cast<std::int64_t>(i), 1).copy_from(table.value().narrow(0, labels_[i], 1));
  c = ops::add(c, ye);
  saved_ = {temb, h};
  return one(c);
}

std::vector<Tensor> CondEmbed::backward(std::span<const Tensor> gout) {
  const Tensor& dc = gout[0];
  if (dc.defined()) {
    const Tensor &temb = saved_[0], &h = saved_[1];
    stage(w2, matmul(Tt(nn::silu_fwd(h)), dc));
    stage(b2, ops::sum_rows(dc));
    Tensor dh = nn::silu_bwd(h, matmul(dc, Tt(w2.value())));
    stage(w1, matmul(Tt(temb), dh));
    stage(b1, ops::sum_rows(dh));
    // Rows scattered in ascending batch order.
    Tensor dtab = Tensor::zeros(table.value().shape(), dc.dtype());
    const Tensor dcc = dc.contiguous();
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      Tensor row = dtab.narrow(0, labels_[i], 1);
      row.copy_from(ops::add(row, dcc.narrow(0, static_cast<std::int64_t>(i), 1)));
    }
    stage(table, dtab);
  }
  flush_grads();
  clear_saved();
  return {Tensor(), Tensor()};
}

Modulation::Modulation(const std::string& name, const DiTConfig& cfg, std::int64_t chunks, Dtype dt)
    : ParamModule(name), w(add_param("weight", {cfg.D, chunks * cfg.D}, dt)), b(add_param("bias", {chunks * cfg.D}, dt)) {}

std::vector<Tensor> Modulation::forward(std::span<const Tensor> in) {
  if (in.size() != 1) throw_argument("Modulation: expects one input");
  const Tensor& c = in[0];
  saved_ = {c};
  return one(matmul_bias(nn::silu_fwd(c), w.value(), b.value()));
}

std::vector<Tensor> Modulation::backward(std::span<const Tensor> gout) {
  const Tensor& dmod = gout[0];
  Tensor dc;
  if (dmod.defined()) {
    const Tensor& c = saved_[0];
    stage(w, matmul(Tt(nn::silu_fwd(c)), dmod));
    stage(b, ops::sum_rows(dmod));
    dc = nn::silu_bwd(c, matmul(dmod, Tt(w.value())));
  }
  flush_grads();
  clear_saved();
  return one(dc);
}

namespace {

struct QKV {
  Tensor q, k, v;
};

// [B*N, 3D] -> three [B, H, N, Dh] strided views.
QKV split_heads(const Tensor& qkv, const DiTConfig& cfg, std::int64_t B) {
  const std::int64_t N = cfg.N(), D = cfg.D, H = cfg.heads, Dh = cfg.head_dim();
  const Shape shape{B, H, N, Dh}, strides{N * 3 * D, Dh, 3 * D, 1};
  return {qkv.as_strided(shape, strides, qkv.offset()), qkv.as_strided(shape, strides, qkv.offset() + D),
          qkv.as_strided(shape, strides, qkv.offset() + 2 * D)};
}

void check_half_inputs(std::span<const Tensor> in, const DiTConfig& cfg, const char* who) {
  if (in.size() != 2) throw_argument(std::string(who) + ": expects (z, mod)");
  const Tensor &z = in[0], &mod = in[1];
  if (z.rank() != 2 || z.dim(1) != cfg.D || z.dim(0) % cfg.N() != 0)
    throw_argument(std::string(who) + ": z must be [B*N, D], got " + shape_str(z.shape()));
  if (mod.rank() != 2 || mod.dim(0) * cfg.N() != z.dim(0) || mod.dim(1) != 6 * cfg.D)
    throw_argument(std::string(who) + ": mod must be [B, 6D], got " + shape_str(mod.shape()));
}

}  // namespace

AttentionHalf::AttentionHalf(const std::string& name, const DiTConfig& cfg, Dtype dt)
    : ParamModule(name),
      qkv_w(add_param("qkv.weight", {cfg.D, 3 * cfg.D}, dt)),
      qkv_b(add_param("qkv.bias", {3 * cfg.D}, dt)),
      o_w(add_param("o_proj.weight", {cfg.D, cfg.D}, dt)),
      o_b(add_param("o_proj.bias", {cfg.D}, dt)),
      cfg_(cfg) {}

// saved_: z, shift, gamma, gate, mean, rstd, qkv, O, stats, a
std::vector<Tensor> AttentionHalf::forward(std::span<const Tensor> in) {
  check_half_inputs(in, cfg_, "AttentionHalf");
  const Tensor &z = in[0], &mod = in[1];
  const std::int64_t D = cfg_.D, B = mod.dim(0);
  Tensor shift = chunk(mod, 0, D), gamma = one_plus(chunk(mod, 1, D)), gate = chunk(mod, 2, D);
  auto n1 = nn::adaln_modulate(z, gamma, shift);
  Tensor qkv = matmul_bias(n1.y, qkv_w.value(), qkv_b.value());
  n1.y = Tensor();
  auto heads = split_heads(qkv, cfg_, B);
  auto att = nn::attention_fwd(heads.q, heads.k, heads.v, 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim())));
  Tensor O = att.O.reshape({z.dim(0), D});
  Tensor a = matmul_bias(O, o_w.value(), o_b.value());
  Tensor out = z.clone();
  ops::add_gated_inplace(out, a, gate);
  saved_ = {z, shift, gamma, gate, n1.mean, n1.rstd, qkv, O, att.stats, a};
  return one(out);
}

std::vector<Tensor> AttentionHalf::backward(std::span<const Tensor> gout) {
  const Tensor& dout = gout[0];
  if (!dout.defined()) {
    clear_saved();
    return {Tensor(), Tensor()};
  }
  const Tensor &z = saved_[0], &shift = saved_[1], &gamma = saved_[2], &gate = saved_[3], &mean = saved_[4],
               &rstd = saved_[5], &qkv = saved_[6], &O = saved_[7], &stats = saved_[8], &a = saved_[9];
  const std::int64_t D = cfg_.D, B = gate.dim(0), R = z.dim(0), N = cfg_.N(), H = cfg_.heads, Dh = cfg_.head_dim();
  Tensor dgate = ops::sum_products_row_groups(dout, a, B);
  Tensor da = ops::mul_row_groups(dout, gate);
  stage(o_w, matmul(Tt(O), da));
  stage(o_b, ops::sum_rows(da));
  Tensor dO = matmul(da, Tt(o_w.value()));
  da = Tensor();
  auto heads = split_heads(qkv, cfg_, B);
  auto g = nn::attention_bwd(heads.q, heads.k, heads.v, O.reshape({B, N, H, Dh}), dO.reshape({B, N, H, Dh}), stats,
                             1.0 / std::sqrt(static_cast<double>(Dh)));
  dO = Tensor();
  Tensor dqkv = Tensor::empty({R, 3 * D}, z.dtype());
  dqkv.narrow(1, 0, D).copy_from(g.dQ.reshape({R, D}));
  dqkv.narrow(1, D, D).copy_from(g.dK.reshape({R, D}));
  dqkv.narrow(1, 2 * D, D).copy_from(g.dV.reshape({R, D}));
  g = {};
  stage(qkv_w, matmul(Tt(modulated(z, gamma, shift)), dqkv));
  stage(qkv_b, ops::sum_rows(dqkv));
  Tensor dh1 = matmul(dqkv, Tt(qkv_w.value()));
  dqkv = Tensor();
  auto ng = nn::adaln_bwd(z, gamma, mean, rstd, dh1);
  Tensor dz = ops::add(dout, ng.dh);
  Tensor dmod = Tensor::zeros({B, 6 * D}, z.dtype());
  dmod.narrow(1, 0, D).copy_from(ng.dbeta);
  dmod.narrow(1, D, D).copy_from(ng.dgamma);
  dmod.narrow(1, 2 * D, D).copy_from(dgate);
  flush_grads();
  clear_saved();
  return {dz, dmod};
}

MlpHalf::MlpHalf(const std::string& name, const DiTConfig& cfg, Dtype dt)
    : ParamModule(name),
      up_w(add_param("up.weight", {cfg.D, cfg.mlp_ratio * cfg.D}, dt)),
      up_b(add_param("up.bias", {cfg.mlp_ratio * cfg.D}, dt)),
      down_w(add_param("down.weight", {cfg.mlp_ratio * cfg.D, cfg.D}, dt)),
      down_b(add_param("down.bias", {cfg.D}, dt)),
      cfg_(cfg) {}

// saved_: z, shift, gamma, gate, mean, rstd, u, f
std::vector<Tensor> MlpHalf::forward(std::span<const Tensor> in) {
  check_half_inputs(in, cfg_, "MlpHalf");
  const Tensor &z = in[0], &mod = in[1];
  const std::int64_t D = cfg_.D;
  Tensor shift = chunk(mod, 3, D), gamma = one_plus(chunk(mod, 4, D)), gate = chunk(mod, 5, D);
  auto n2 = nn::adaln_modulate(z, gamma, shift);
  Tensor u = matmul_bias(n2.y, up_w.value(), up_b.value());
  n2.y = Tensor();
  Tensor f = matmul_bias(nn::gelu_fwd(u), down_w.value(), down_b.value());
  Tensor out = z.clone();
  ops::add_gated_inplace(out, f, gate);
  saved_ = {z, shift, gamma, gate, n2.mean, n2.rstd, u, f};
  return one(out);
}

std::vector<Tensor> MlpHalf::backward(std::span<const Tensor> gout) {
  const Tensor& dout = gout[0];
  if (!dout.defined()) {
    clear_saved();
    return {Tensor(), Tensor()};
  }
  const Tensor &z = saved_[0], &shift = saved_[1], &gamma = saved_[2], &gate = saved_[3], &mean = saved_[4],
               &rstd = saved_[5], &u = saved_[6], &f = saved_[7];
  const std::int64_t D = cfg_.D, B = gate.dim(0);
  Tensor dgate = ops::sum_products_row_groups(dout, f, B);
  Tensor df = ops::mul_row_groups(dout, gate);
  stage(down_w, matmul(Tt(nn::gelu_fwd(u)), df));
  stage(down_b, ops::sum_rows(df));
  Tensor du = nn::gelu_bwd(u, matmul(df, Tt(down_w.value())));
  df = Tensor();
  stage(up_w, matmul(Tt(modulated(z, gamma, shift)), du));
  stage(up_b, ops::sum_rows(du));
  Tensor dh2 = matmul(du, Tt(up_w.value()));
  du = Tensor();
  auto ng = nn::adaln_bwd(z, gamma, mean, rstd, dh2);
  Tensor dz = ops::add(dout, ng.dh);
  Tensor dmod = Tensor::zeros({B, 6 * D}, z.dtype());
  dmod.narrow(1, 3 * D, D).copy_from(ng.dbeta);
  dmod.narrow(1, 4 * D, D).copy_from(ng.dgamma);
  dmod.narrow(1, 5 * D, D).copy_from(dgate);
  flush_grads();
  clear_saved();
  return {dz, dmod};
}

FinalLayer::FinalLayer(const DiTConfig& cfg, Dtype dt)
    : ParamModule("final"),
      ada_w(add_param("adaLN.weight", {cfg.D, 2 * cfg.D}, dt)),
      ada_b(add_param("adaLN.bias", {2 * cfg.D}, dt)),
      w(add_param("linear.weight", {cfg.D, cfg.patch_dim()}, dt)),
      b(add_param("linear.bias", {cfg.patch_dim()}, dt)),
      cfg_(cfg) {}

// saved_: z, c, shift, gamma, mean, rstd
std::vector<Tensor> FinalLayer::forward(std::span<const Tensor> in) {
  if (in.size() != 2) throw_argument("FinalLayer: expects (z, c)");
  const Tensor &z = in[0], &c = in[1];
  const std::int64_t D = cfg_.D;
  if (z.rank() != 2 || z.dim(1) != D || c.rank() != 2 || c.dim(1) != D || c.dim(0) * cfg_.N() != z.dim(0))
    throw_argument("FinalLayer: expects z [B*N, D] and c [B, D]");
  Tensor mod = matmul_bias(nn::silu_fwd(c), ada_w.value(), ada_b.value());
  Tensor shift = chunk(mod, 0, D), gamma = one_plus(chunk(mod, 1, D));
  mod = Tensor();
  auto n = nn::adaln_modulate(z, gamma, shift);
  Tensor tok = matmul_bias(n.y, w.value(), b.value());
  saved_ = {z, c, shift, gamma, n.mean, n.rstd};
  return one(depatchify_layout(tok, cfg_));
}

std::vector<Tensor> FinalLayer::backward(std::span<const Tensor> gout) {
  const Tensor& deps = gout[0];
  if (!deps.defined()) {
    clear_saved();
    return {Tensor(), Tensor()};
  }
  const Tensor &z = saved_[0], &c = saved_[1], &shift = saved_[2], &gamma = saved_[3], &mean = saved_[4],
               &rstd = saved_[5];
  const std::int64_t D = cfg_.D, B = c.dim(0);
  Tensor dtok = patchify_layout(deps, cfg_);
  stage(w, matmul(Tt(modulated(z, gamma, shift)), dtok));
  stage(b, ops::sum_rows(dtok));
  auto ng = nn::adaln_bwd(z, gamma, mean, rstd, matmul(dtok, Tt(w.value())));
  Tensor dmod = Tensor::empty({B, 2 * D}, z.dtype());
  dmod.narrow(1, 0, D).copy_from(ng.dbeta);
  dmod.narrow(1, D, D).copy_from(ng.dgamma);
  stage(ada_w, matmul(Tt(nn::silu_fwd(c)), dmod));
  stage(ada_b, ops::sum_rows(dmod));
  Tensor dc = nn::silu_bwd(c, matmul(dmod, Tt(ada_w.value())));
  flush_grads();
  clear_saved();
  return {ng.dh, dc};
}

Block::Block(const std::string& name, const DiTConfig& cfg, Dtype dtype)
    : attn(std::make_shared<AttentionHalf>(name + ".attn", cfg, dtype)),
      mlp(std::make_shared<MlpHalf>(name + ".mlp", cfg, dtype)) {}

Tensor Block::forward(const Tensor& z, const Tensor& mod) {
  Tensor a[2] = {z, mod};
  Tensor z1 = attn->forward(a)[0];
  Tensor b[2] = {z1, mod};
  return mlp->forward(b)[0];
}

std::pair<Tensor, Tensor> Block::backward(const Tensor& dz) {
  Tensor g[1] = {dz};
  auto gm = mlp->backward(g);
  Tensor g1[1] = {gm[0]};
  auto ga = attn->backward(g1);
  return {ga[0], ops::add(ga[1], gm[1])};
}

std::vector<Parameter*> Block::parameters() {
  auto p = attn->parameters();
  for (auto* q : mlp->parameters()) p.push_back(q);
  return p;
}

DiT::DiT(const DiTConfig& cfg, Dtype dtype) : cfg_(cfg), dtype_(dtype) {
  cfg_.validate();
  const auto x = graph_.add_input("x_t");
  const auto t = graph_.add_input("t");
  const auto y = graph_.add_input("y");
  patch = std::make_shared<PatchEmbed>(cfg_, dtype);
  cond = std::make_shared<CondEmbed>(cfg_, dtype);
  auto z = graph_.add_node(patch, {x}, 1)[0];
  const auto c = graph_.add_node(cond, {t, y}, 1)[0];
  for (std::int64_t l = 0; l < cfg_.L; ++l) {
    const std::string nm = "blocks." + std::to_string(l);
    mods.push_back(std::make_shared<Modulation>(nm + ".adaLN", cfg_, 6, dtype));
    attns.push_back(std::make_shared<AttentionHalf>(nm + ".attn", cfg_, dtype));
    mlps.push_back(std::make_shared<MlpHalf>(nm + ".mlp", cfg_, dtype));
    const auto m = graph_.add_node(mods.back(), {c}, 1)[0];
    z = graph_.add_node(attns.back(), {z, m}, 1)[0];
    z = graph_.add_node(mlps.back(), {z, m}, 1)[0];
  }
  final_layer = std::make_shared<FinalLayer>(cfg_, dtype);
  graph_.set_outputs({graph_.add_node(final_layer, {z, c}, 1)[0]});
}

void DiT::init(std::uint64_t seed, InitMode mode) {
  std::mt19937_64 rng(seed);
  auto fill = [&](Parameter& p, auto&& draw) {
    std::vector<double> v(static_cast<std::size_t>(p.value().numel()));
    for (auto& e : v) e = draw();
    p.value().copy_from(Tensor::from_doubles(p.value().shape(), dtype_, v));
  };
  auto xavier = [&](Parameter& p) {
    const double fi = static_cast<double>(p.value().dim(0)), fo = static_cast<double>(p.value().dim(1));
    std::uniform_real_distribution<double> d(-std::sqrt(6.0 / (fi + fo)), std::sqrt(6.0 / (fi + fo)));
    fill(p, [&] { return d(rng); });
  };
  auto normal = [&](Parameter& p, double sd) {
    std::normal_distribution<double> d(0.0, sd);
    fill(p, [&] { return d(rng); });
  };
  auto zero = [&](Parameter& p) { p.value().fill(0.0); };
  // Random mode gives every tensor a nonzero value so gradient checks see
  // all paths; adaLN-Zero zeroes the gates and the output head.
  const bool rnd = mode == InitMode::Random;
  auto bias = [&](Parameter& p) { rnd ? normal(p, 0.1) : zero(p); };
  xavier(patch->w);
  bias(patch->b);
  normal(cond->w1, 0.02);
  bias(cond->b1);
  normal(cond->w2, 0.02);
  bias(cond->b2);
  normal(cond->table, 0.02);
  for (std::size_t l = 0; l < mods.size(); ++l) {
    xavier(attns[l]->qkv_w);
    bias(attns[l]->qkv_b);
    xavier(attns[l]->o_w);
    bias(attns[l]->o_b);
    xavier(mlps[l]->up_w);
    bias(mlps[l]->up_b);
    xavier(mlps[l]->down_w);
    bias(mlps[l]->down_b);
    rnd ? normal(mods[l]->w, 0.2) : zero(mods[l]->w);
    bias(mods[l]->b);
  }
  rnd ? normal(final_layer->ada_w, 0.2) : zero(final_layer->ada_w);
  bias(final_layer->ada_b);
  rnd ? xavier(final_layer->w) : zero(final_layer->w);
  bias(final_layer->b);
}

Tensor DiT::forward(const Tensor& x_t, const Tensor& t, const Tensor& y) { return graph_.forward({x_t, t, y})[0]; }

void DiT::backward(const Tensor& d_eps_hat) { graph_.backward({d_eps_hat}); }

std::int64_t DiT::num_parameters() {
  std::int64_t n = 0;
  for (auto* p : parameters()) n += p->value().numel();
  return n;
}

std::int64_t DiT::matmul_parameters() {
  std::int64_t n = 0;
  for (auto* p : parameters())
    if (p->value().rank() == 2 && p != &cond->table) n += p->value().numel();
  return n;
}

}  // namespace dithc::dit
