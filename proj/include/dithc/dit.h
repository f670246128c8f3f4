#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dithc/module.h"
#include "dithc/tensor.h"

namespace dithc::dit {

struct DiTConfig {
  std::int64_t H = 16, W = 16, C = 4;
  std::int64_t p = 2;
  std::int64_t D = 64;
  std::int64_t L = 4;
  std::int64_t heads = 4;
  std::int64_t num_classes = 10;
  std::int64_t T = 1000;
  std::int64_t mlp_ratio = 4;
  std::int64_t freq_dim = 256;

  std::int64_t N() const { return (H / p) * (W / p); }
  std::int64_t patch_dim() const { return p * p * C; }
  std::int64_t head_dim() const { return D / heads; }
  void validate() const;  // ConfigError on violated invariants

  static DiTConfig toy();
  // "toy", "S/2", "B/2", "L/2", "XL/2" (32x32x4 latents for the named sizes).
  static DiTConfig by_name(const std::string& name);
};

// Linear betas, alphas and cumulative products, in double.
struct Schedule {
  std::vector<double> betas, alphas, alpha_bars;
  std::int64_t T() const { return static_cast<std::int64_t>(betas.size()); }
  static Schedule linear(std::int64_t T, double beta_start = 1e-4, double beta_end = 2e-2);
};

// [B, H, W, C] <-> [B*N, p*p*C]. Patches in row-major order; inside a
// patch the order is (row, column, channel).
Tensor patchify_layout(const Tensor& x, const DiTConfig& cfg);
Tensor depatchify_layout(const Tensor& tokens, const DiTConfig& cfg);
// Linear projection of the flattened patches: [B*N, D].
Tensor patchify(const Tensor& x, const Tensor& w_embed, const Tensor& bias, const DiTConfig& cfg);
inline Tensor depatchify(const Tensor& tokens, const DiTConfig& cfg) { return depatchify_layout(tokens, cfg); }

// [B, dim] sinusoidal embedding (cos half, then sin half).
Tensor timestep_embedding(const Tensor& t, std::int64_t dim, Dtype dtype);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per example along axis 0.
Tensor ddpm_noise(const Tensor& x0, const std::vector<std::int64_t>& t, const Tensor& eps, const Schedule& s);

double mse(const Tensor& pred, const Tensor& target);
Tensor mse_grad(const Tensor& pred, const Tensor& target);

enum class InitMode { AdaLNZero, Random };

// Base for layers holding named parameters.
class ParamModule : public Module {
 public:
  explicit ParamModule(std::string name) : name_(std::move(name)) {}
  std::string name() const override { return name_; }
  std::vector<Parameter*> parameters() override;
  std::vector<Tensor> saved_tensors() const override { return saved_; }
  void clear_saved() override { saved_.clear(); }

 protected:
  Parameter& add_param(const std::string& local, const Shape& shape, Dtype dtype);
  // Gradients are staged during backward and accumulated together once the
  // weights are no longer read, so accumulation hooks may move them.
  void stage(Parameter& p, Tensor g) { staged_.emplace_back(&p, std::move(g)); }
  void flush_grads();
  std::string name_;
  std::vector<std::pair<Parameter*, Tensor>> staged_;
  std::vector<std::unique_ptr<Parameter>> params_;
  std::vector<Tensor> saved_;
};

// x [B,H,W,C] -> z [B*N, D].
class PatchEmbed : public ParamModule {
 public:
  PatchEmbed(const DiTConfig& cfg, Dtype dtype);
  std::vector<Tensor> forward(std::span<const Tensor> in) override;
  std::vector<Tensor> backward(std::span<const Tensor> gout) override;
  Parameter &w, &b;

 private:
  DiTConfig cfg_;
};

// (t [B], y [B]) -> c [B, D]: timestep MLP plus label table (row
// num_classes is the null label).
class CondEmbed : public ParamModule {
 public:
  CondEmbed(const DiTConfig& cfg, Dtype dtype);
  std::vector<Tensor> forward(std::span<const Tensor> in) override;
  std::vector<Tensor> backward(std::span<const Tensor> gout) override;
  Parameter &w1, &b1, &w2, &b2, &table;

 private:
  DiTConfig cfg_;
  std::vector<std::int64_t> labels_;
};

// c [B, D] -> six modulation vectors [B, 6D]:
// shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp.
class Modulation : public ParamModule {
 public:
  Modulation(const std::string& name, const DiTConfig& cfg, std::int64_t chunks, Dtype dtype);
  std::vector<Tensor> forward(std::span<const Tensor> in) override;
  std::vector<Tensor> backward(std::span<const Tensor> gout) override;
  Parameter &w, &b;
};

// (z, mod) -> z + gate_msa * o_proj(MSA(adaln(z; 1 + scale_msa, shift_msa))).
class AttentionHalf : public ParamModule {
 public:
  AttentionHalf(const std::string& name, const DiTConfig& cfg, Dtype dtype);
  std::vector<Tensor> forward(std::span<const Tensor> in) override;
  std::vector<Tensor> backward(std::span<const Tensor> gout) override;
  Parameter &qkv_w, &qkv_b, &o_w, &o_b;

 private:
  DiTConfig cfg_;
};

// (z, mod) -> z + gate_mlp * down(gelu(up(adaln(z; 1 + scale_mlp, shift_mlp)))).
class MlpHalf : public ParamModule {
 public:
  MlpHalf(const std::string& name, const DiTConfig& cfg, Dtype dtype);
  std::vector<Tensor> forward(std::span<const Tensor> in) override;
  std::vector<Tensor> backward(std::span<const Tensor> gout) override;
  Parameter &up_w, &up_b, &down_w, &down_b;

 private:
  DiTConfig cfg_;
};

// (z, c) -> eps_hat [B,H,W,C] through its own shift/scale modulation.
class FinalLayer : public ParamModule {
 public:
  FinalLayer(const DiTConfig& cfg, Dtype dtype);
  std::vector<Tensor> forward(std::span<const Tensor> in) override;
  std::vector<Tensor> backward(std::span<const Tensor> gout) override;
  Parameter &ada_w, &ada_b, &w, &b;

 private:
  DiTConfig cfg_;
};

// One transformer block driven by externally supplied modulation:
// forward(z, mod) -> z', backward(dz') -> (dz, dmod).
class Block {
 public:
  Block(const std::string& name, const DiTConfig& cfg, Dtype dtype);
  Tensor forward(const Tensor& z, const Tensor& mod);
  std::pair<Tensor, Tensor> backward(const Tensor& dz);
  std::vector<Parameter*> parameters();
  std::shared_ptr<AttentionHalf> attn;
  std::shared_ptr<MlpHalf> mlp;
};

class DiT {
 public:
  DiT(const DiTConfig& cfg, Dtype dtype);

  void init(std::uint64_t seed, InitMode mode = InitMode::AdaLNZero);
  // x_t [B,H,W,C]; t, y [B] holding integer values.
  Tensor forward(const Tensor& x_t, const Tensor& t, const Tensor& y);
  void backward(const Tensor& d_eps_hat);

  const DiTConfig& config() const { return cfg_; }
  Dtype dtype() const { return dtype_; }
  ModuleGraph& graph() { return graph_; }
  std::vector<Parameter*> parameters() { return graph_.parameters(); }
  std::int64_t num_parameters();
  // Parameters feeding matrix products, for FLOP accounting.
  std::int64_t matmul_parameters();

  std::shared_ptr<PatchEmbed> patch;
  std::shared_ptr<CondEmbed> cond;
  std::vector<std::shared_ptr<Modulation>> mods;
  std::vector<std::shared_ptr<AttentionHalf>> attns;
  std::vector<std::shared_ptr<MlpHalf>> mlps;
  std::shared_ptr<FinalLayer> final_layer;

 private:
  DiTConfig cfg_;
  Dtype dtype_;
  ModuleGraph graph_;
};

// Checkpoint container. Values are written in the tensors' dtype.
void save_checkpoint(const std::string& path, const std::vector<Parameter*>& params);
void load_checkpoint(const std::string& path, const std::vector<Parameter*>& params);
std::vector<std::uint8_t> checkpoint_bytes(const std::vector<Parameter*>& params);

}  // namespace dithc::dit
