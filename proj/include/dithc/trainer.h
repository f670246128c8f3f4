#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dithc/automem.h"
#include "dithc/comm.h"
#include "dithc/dit.h"
#include "dithc/memory.h"
#include "dithc/nn.h"
#include "dithc/parallel.h"
#include "dithc/threading.h"
#include "dithc/trace.h"

namespace dithc::train {

struct TrainConfig {
  std::string model_name = "toy";
  dit::DiTConfig model = dit::DiTConfig::toy();
  Dtype dtype = Dtype::F32;
  std::int64_t batch = 8;  // per rank
  int steps = 10;
  std::uint64_t seed = 0;
  nn::AdamWHyper adam;
  bool automem = false;
  int lookahead = 1;
  std::size_t fast_capacity = kUnbounded;
  ThrottlePreset throttle = ThrottlePreset::Off;
  double base_bytes_per_sec = 8e9;
  int clusters = 4;
  bool overlap = true;
  std::size_t bucket_bytes = kDefaultBucketBytes;
  std::int64_t dataset_size = 512;
  bool trace = false;

  // ConfigError on any invalid field; called before anything is allocated.
  void validate() const;
};

struct StepMetrics {
  int step = 0;
  double wall_s = 0;
  double model_flops = 0;     // analytic, this rank
  double achieved_flops = 0;  // model_flops / wall_s
  std::size_t fast_peak = 0;
  std::size_t slow_peak = 0;
  std::size_t transfer_bytes = 0;
  std::size_t collective_bytes = 0;
  double loss = 0;  // mean over the global batch
};

// 6 * matmul params * tokens + 12 * L * B * N^2 * D per training step.
double analytic_flops(const dit::DiTConfig& cfg, std::int64_t matmul_params, std::int64_t batch);
extern const char* const kFlopsFormula;

// Fixed pool of unit-Gaussian latents around per-class channel means.
// Every random draw is keyed by (seed, ...) so batches do not depend on
// how examples are split over ranks.
class SyntheticDataset {
 public:
  SyntheticDataset(const dit::DiTConfig& cfg, std::int64_t size, std::uint64_t seed);

  std::int64_t size() const { return size_; }
  std::int64_t label(std::int64_t example) const { return example % cfg_.num_classes; }
  double class_mean(std::int64_t cls, std::int64_t channel) const;

  struct Batch {
    Tensor x_t, t, y, eps;
  };
  // Examples global_begin .. global_begin + count - 1 of step `step`.
  Batch batch(const dit::Schedule& s, std::int64_t step, std::int64_t global_batch, std::int64_t global_begin,
              std::int64_t count, Dtype dtype) const;

 private:
  dit::DiTConfig cfg_;
  std::int64_t size_;
  std::uint64_t seed_;
  std::vector<double> means_;  // [classes, C]
};

// One rank of the training loop. All allocations happen inside the
// trainer's own memory system; without AutoMem everything is Fast.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg, comm::Communicator* comm = nullptr);
  ~Trainer();

  StepMetrics step();
  int steps_done() const { return step_; }

  dit::DiT& model() { return *model_; }
  MemorySystem& memory() { return *ms_; }
  automem::AutoMem* automem() { return am_.get(); }
  GradReducer* reducer() { return reducer_.get(); }
  Trace& trace() { return trace_; }
  WorkerPool& pool() { return *pool_; }
  const TrainConfig& config() const { return cfg_; }
  int world_size() const { return comm_ ? comm_->size() : 1; }
  int rank() const { return comm_ ? comm_->rank() : 0; }
  double flops_per_step() const { return flops_; }

 private:
  TrainConfig cfg_;
  comm::Communicator* comm_;
  Trace trace_;
  std::unique_ptr<MemorySystem> ms_;
  std::unique_ptr<WorkerPool> pool_;
  std::unique_ptr<dit::DiT> model_;
  std::unique_ptr<automem::AutoMem> am_;
  std::unique_ptr<GradReducer> reducer_;
  std::vector<nn::AdamWState> opt_;
  dit::Schedule sched_;
  SyntheticDataset data_;
  int step_ = 0;
  double flops_ = 0;
};

}  // namespace dithc::train
