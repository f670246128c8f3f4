#include "dithc/trainer.h"

#include <chrono>
#include <cmath>

namespace dithc::train {

const char* const kFlopsFormula =
    "flops_per_step = 6 * matmul_params * (batch * tokens) + 12 * depth * batch * tokens^2 * hidden";

double analytic_flops(const dit::DiTConfig& cfg, std::int64_t matmul_params, std::int64_t batch) {
  const double N = static_cast<double>(cfg.N());
  const double B = static_cast<double>(batch);
  return 6.0 * static_cast<double>(matmul_params) * B * N +
         12.0 * static_cast<double>(cfg.L) * B * N * N * static_cast<double>(cfg.D);
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { throw ConfigError("train config: " + m); };
  model.validate();
  if (batch < 1) bad("per-rank batch must be >= 1");
  if (steps < 0) bad("steps must be >= 0");
  if (clusters < 1) bad("clusters must be >= 1");
  if (lookahead < 1) bad("lookahead must be >= 1");
  if (dataset_size < 1) bad("dataset size must be >= 1");
  if (fast_capacity == 0) bad("fast capacity must be positive");
  if (!(adam.lr > 0) || !std::isfinite(adam.lr)) bad("learning rate must be positive");
  if (!(base_bytes_per_sec >= 0)) bad("base transfer rate must be >= 0");
}

// ------------------------------------------------------------------ dataset

namespace {

std::mt19937_64 keyed_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b),    static_cast<std::uint32_t>(b >> 32),
                    static_cast<std::uint32_t>(salt)};
  return std::mt19937_64(seq);
}

constexpr std::uint64_t kSaltMeans = 1, kSaltExample = 2, kSaltNoise = 3;

}  // namespace

SyntheticDataset::SyntheticDataset(const dit::DiTConfig& cfg, std::int64_t size, std::uint64_t seed)
    : cfg_(cfg), size_(size), seed_(seed) {
  auto rng = keyed_rng(seed, 0, 0, kSaltMeans);
  std::normal_distribution<double> nd(0.0, 1.0);
  means_.resize(static_cast<std::size_t>(cfg.num_classes * cfg.C));
  for (auto& m : means_) m = nd(rng);
}

double SyntheticDataset::class_mean(std::int64_t cls, std::int64_t channel) const {
  return means_.at(static_cast<std::size_t>(cls * cfg_.C + channel));
}

SyntheticDataset::Batch SyntheticDataset::batch(const dit::Schedule& s, std::int64_t step, std::int64_t global_batch,
                                                std::int64_t global_begin, std::int64_t count, Dtype dtype) const {
  const std::int64_t per = cfg_.H * cfg_.W * cfg_.C;
  std::vector<double> x0(static_cast<std::size_t>(count * per)), eps(x0.size()), tv, yv;
  std::vector<std::int64_t> ts;
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::int64_t i = 0; i < count; ++i) {
    const std::int64_t g = global_begin + i;
    const std::int64_t ex = (step * global_batch + g) % size_;
    const std::int64_t cls = label(ex);
    auto erng = keyed_rng(seed_, static_cast<std::uint64_t>(ex), 0, kSaltExample);
    for (std::int64_t k = 0; k < per; ++k)
      x0[static_cast<std::size_t>(i * per + k)] = nd(erng) + class_mean(cls, k % cfg_.C);
    auto nrng = keyed_rng(seed_, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(g), kSaltNoise);
    const std::int64_t t = static_cast<std::int64_t>(nrng() % static_cast<std::uint64_t>(s.T()));
    for (std::int64_t k = 0; k < per; ++k) eps[static_cast<std::size_t>(i * per + k)] = nd(nrng);
    ts.push_back(t);
    tv.push_back(static_cast<double>(t));
    yv.push_back(static_cast<double>(cls));
  }
  Batch b;
  Shape shape{count, cfg_.H, cfg_.W, cfg_.C};
  Tensor x0t = Tensor::from_doubles(shape, dtype, x0);
  b.eps = Tensor::from_doubles(shape, dtype, eps);
  b.x_t = dit::ddpm_noise(x0t, ts, b.eps, s);
  b.t = Tensor::from_doubles({count}, dtype, tv);
  b.y = Tensor::from_doubles({count}, dtype, yv);
  return b;
}

// ------------------------------------------------------------------ trainer

namespace {
MemoryConfig memory_config(const TrainConfig& c) {
  MemoryConfig m;
  m.fast_capacity_bytes = c.fast_capacity;
  m.alignment_bytes = kAccountingGranule;
  m.throttle = c.throttle;
  m.base_bytes_per_sec = c.throttle == ThrottlePreset::Off ? 0 : c.base_bytes_per_sec;
  return m;
}
}  // namespace

Trainer::Trainer(const TrainConfig& cfg, comm::Communicator* comm)
    : cfg_(cfg), comm_(comm), sched_(dit::Schedule::linear(cfg.model.T)),
      data_(cfg.model, cfg.dataset_size, cfg.seed) {
  cfg_.validate();
  trace_.set_enabled(cfg_.trace);
  ms_ = std::make_unique<MemorySystem>(memory_config(cfg_), &trace_);
  pool_ = std::make_unique<WorkerPool>(static_cast<std::size_t>(cfg_.clusters), 1);
  TileConfig tc = default_tile_config();
  if (tc.clusters != cfg_.clusters) {
    tc.clusters = cfg_.clusters;
    set_default_tile_config(tc);
  }

  MemoryScope mscope(*ms_);
  PoolScope pscope(*pool_);
  TierScope tscope(cfg_.automem ? MemTier::Slow : MemTier::Fast);
  model_ = std::make_unique<dit::DiT>(cfg_.model, cfg_.dtype);
  model_->init(cfg_.seed);
  flops_ = analytic_flops(cfg_.model, model_->matmul_parameters(), cfg_.batch);

  if (cfg_.automem) {
    automem::AutoMemOptions o;
    o.lookahead = cfg_.lookahead;
    am_ = std::make_unique<automem::AutoMem>(*ms_, o);
    am_->wrap_graph(model_->graph());
    auto b = data_.batch(sched_, 0, cfg_.batch * world_size(), cfg_.batch * rank(), cfg_.batch, cfg_.dtype);
    am_->warmup([&] { model_->forward(b.x_t, b.t, b.y); });
  }
  for (auto* p : model_->parameters()) opt_.push_back(nn::AdamWState::zeros_like(p->value(), default_tier()));
  if (comm_ && comm_->size() > 1) {
    reducer_ = std::make_unique<GradReducer>(*comm_, model_->parameters(), cfg_.bucket_bytes, cfg_.overlap,
                                             cfg_.trace ? &trace_ : nullptr);
    if (am_) am_->set_grad_offload_blocking(true);
  }
}

Trainer::~Trainer() {
  MemoryScope mscope(*ms_);
  reducer_.reset();
  opt_.clear();
  am_.reset();
  model_.reset();
}

StepMetrics Trainer::step() {
  MemoryScope mscope(*ms_);
  PoolScope pscope(*pool_);
  TierScope tscope(cfg_.automem ? MemTier::Slow : MemTier::Fast);
  const int R = world_size();
  const std::size_t tb0 = ms_->transfers().bytes_moved();
  const std::size_t cb0 = comm_ ? comm_->bytes_sent() : 0;
  const auto t0 = std::chrono::steady_clock::now();

  double local = 0;
  try {
    auto params = model_->parameters();
    for (auto* p : params) p->zero_grad();
    auto b = data_.batch(sched_, step_, cfg_.batch * R, cfg_.batch * rank(), cfg_.batch, cfg_.dtype);
    if (reducer_) reducer_->begin_step();
    {
      Tensor out = model_->forward(b.x_t, b.t, b.y);
      local = dit::mse(out, b.eps);
      Tensor g = dit::mse_grad(out, b.eps);
      out = Tensor();
      model_->backward(g);
    }
    if (reducer_) reducer_->finish();
    if (am_) am_->end_step();
    for (std::size_t i = 0; i < params.size(); ++i)
      nn::adamw_fused_step(params[i]->value(), params[i]->grad(), opt_[i], cfg_.adam);
  } catch (const std::exception& e) {
    if (am_) am_->abort_step();
    if (comm_ && R > 1) comm_->abort(e.what());
    throw;
  }
  double loss = local;
  if (comm_ && R > 1) loss = comm_->allreduce_scalar(local) / R;

  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  StepMetrics m;
  m.step = ++step_;
  m.wall_s = wall;
  m.model_flops = flops_;
  m.achieved_flops = wall > 0 ? flops_ / wall : 0;
  m.fast_peak = ms_->fast().peak_bytes();
  m.slow_peak = ms_->slow().peak_bytes();
  m.transfer_bytes = ms_->transfers().bytes_moved() - tb0;
  m.collective_bytes = comm_ ? comm_->bytes_sent() - cb0 : 0;
  m.loss = loss;
  return m;
}

}  // namespace dithc::train
