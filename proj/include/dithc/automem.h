#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dithc/memory.h"
#include "dithc/module.h"

namespace dithc::automem {

struct AutoMemOptions {
  // Modules ahead (forward) or behind (backward) whose weights are
  // prefetched. Backward additionally prefetches the saved activations of
  // the next module only.
  std::size_t lookahead = 1;
  std::size_t slot_block_bytes = 4096;
};

// A saved activation tracked across the step: offloaded after the forward
// pass that drops its last reference, reloaded for backward.
struct SavedRecord {
  std::size_t bytes = 0;
  int value = -1;          // producing value, or -1 for module-internal tensors
  int offload_after = -1;  // plan position whose post_forward offloads it; -1 = stays Fast
  int first_use = -1;      // highest plan position whose backward reads it
  int slot_index = -1;     // index into Plan::slots
};

struct ModuleRecord {
  std::size_t id = 0;  // wrap order
  std::string name;
  std::vector<std::size_t> param_bytes;
  std::vector<int> input_values;     // -1 for graph inputs
  std::vector<int> output_values;
  std::vector<SavedRecord> saved;    // storages owned by this module
  std::vector<int> borrowed;         // other modules' saved storages it reads, as packed keys
  std::vector<int> param_slots;      // index into Plan::slots
  std::vector<int> grad_slots;
};

struct PlannedSlot {
  std::string label;
  std::size_t bytes = 0;
  std::size_t first_block = 0;
  std::size_t blocks = 0;
  int start = 0, end = 0;  // event interval; params span the whole step
};

struct Plan {
  std::vector<ModuleRecord> modules;  // execution order
  std::vector<int> value_refcounts;   // forward consumers per value
  std::vector<std::size_t> value_bytes;
  std::vector<PlannedSlot> slots;
  std::size_t param_blocks = 0;
  std::size_t region_blocks = 0;
  std::size_t block_bytes = 0;
  std::size_t capacity_bytes() const { return (param_blocks + region_blocks) * block_bytes; }
  // Largest simultaneous offload set predicted from the slot lifetimes.
  std::size_t predicted_peak_bytes = 0;
  std::vector<std::size_t> order() const;
};

struct CapacityReport {
  struct Row {
    std::string tensor;
    std::string residency;
    std::size_t bytes = 0;
  };
  std::size_t fast_capacity = 0, fast_used = 0, fast_peak = 0;
  std::size_t slow_used = 0, slow_peak = 0;
  std::size_t pool_capacity = 0, pool_occupied = 0, pool_peak = 0;
  std::vector<Row> residency;
  std::string to_json() const;
};

class AutoMem;

// Module decorator that brackets forward and backward with the hooks.
class AutoMemModule : public Module {
 public:
  AutoMemModule(std::shared_ptr<Module> inner, AutoMem* engine, std::size_t id);
  std::string name() const override { return inner_->name(); }
  std::vector<Tensor> forward(std::span<const Tensor> inputs) override;
  std::vector<Tensor> backward(std::span<const Tensor> grad_outputs) override;
  std::vector<Parameter*> parameters() override { return inner_->parameters(); }
  std::vector<Tensor> saved_tensors() const override { return inner_->saved_tensors(); }
  void clear_saved() override { inner_->clear_saved(); }
  Module& inner() { return *inner_; }
  std::size_t id() const { return id_; }

 private:
  std::shared_ptr<Module> inner_;
  AutoMem* engine_;
  std::size_t id_;
};

class AutoMem {
 public:
  explicit AutoMem(MemorySystem& ms, AutoMemOptions opt = {});
  ~AutoMem();
  AutoMem(const AutoMem&) = delete;
  AutoMem& operator=(const AutoMem&) = delete;

  // ArgumentError when `m` is already wrapped.
  std::shared_ptr<AutoMemModule> wrap(std::shared_ptr<Module> m);
  void wrap_graph(ModuleGraph& g);

  // Runs `forward` once with the Slow default tier, records the plan, sizes
  // and lays out the pinned pool, and moves every parameter into its slot.
  const Plan& warmup(const std::function<void()>& forward);
  bool has_plan() const { return planned_; }
  const Plan& plan() const { return plan_; }
  PinnedPool* pool() const { return pool_.get(); }

  // Drains transfers and verifies reference counts and final residency.
  void end_step();
  // Gradients pending a collective: their offload blocks the compute flow
  // and completes before the parameter's ready hooks run.
  void set_grad_offload_blocking(bool on) { grad_blocking_ = on; }

  CapacityReport capacity_report() const;
  std::size_t transfers_issued() const { return transfers_; }
  // Synchronous loads performed by barriers (prefetch misses).
  std::size_t barrier_loads() const { return barrier_loads_; }
  std::size_t steps() const { return steps_; }

  // Hook entry points, called by AutoMemModule on the compute flow.
  void pre_forward(std::size_t id, std::span<const Tensor> inputs);
  void post_forward(std::size_t id, std::span<const Tensor> inputs, const std::vector<Tensor>& outputs);
  void pre_backward(std::size_t id, std::span<const Tensor> grad_outputs);
  void after_backward(std::size_t id);
  void abort_step();

 private:
  struct Live {
    std::shared_ptr<Storage> storage;
    bool offloaded = false;
  };
  enum class State { Idle, Recording, Ready, Forward, Backward };

  void record_post_forward(std::size_t pos, std::span<const Tensor> inputs, const std::vector<Tensor>& outputs);
  void build_plan();
  void place_slots();
  void begin_step();
  void post_backward(std::size_t pos);
  void ensure_fast(const std::shared_ptr<Storage>& s, const std::string& label);
  void prefetch(const std::shared_ptr<Storage>& s, const std::string& label);
  void offload(const std::shared_ptr<Storage>& s, int slot, const std::string& label, bool blocking);
  std::vector<std::shared_ptr<Storage>> saved_storages(Module& m) const;
  void trace(const char* stream, const char* event, const std::string& what, std::size_t bytes = 0);
  int event_pre_backward(std::size_t pos) const;
  [[noreturn]] void mismatch(const std::string& what);
  std::vector<Parameter*> params_at(std::size_t pos);

  MemorySystem& ms_;
  AutoMemOptions opt_;
  std::vector<std::shared_ptr<AutoMemModule>> wrapped_;
  std::vector<Module*> inner_ptrs_;
  State state_ = State::Idle;
  bool planned_ = false;
  Plan plan_;
  std::vector<int> pos_of_id_;
  std::shared_ptr<PinnedPool> pool_;
  std::vector<PinnedPool::SlotId> pool_slots_;

  // Per step.
  std::size_t fwd_cursor_ = 0;
  int bwd_cursor_ = -1;
  std::unordered_map<const Storage*, int> value_of_;
  std::vector<int> remaining_;
  std::vector<int> zero_hits_;
  std::vector<std::vector<Live>> live_;  // per position, parallel to ModuleRecord::saved
  std::vector<int> acc_pending_;
  std::vector<bool> post_bwd_done_;
  std::vector<std::vector<bool>> grad_offloaded_;
  MemTier tier_before_ = MemTier::Slow;
  bool grad_blocking_ = false;
  std::size_t transfers_ = 0;
  std::size_t barrier_loads_ = 0;
  std::size_t steps_ = 0;

  // Warm-up scratch.
  std::vector<std::size_t> rec_order_;
  std::unordered_map<const Storage*, std::pair<int, int>> rec_owner_;  // storage -> (pos, saved index)
};

}  // namespace dithc::automem
