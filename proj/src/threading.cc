#include "dithc/threading.h"

#include <pthread.h>
#include <sched.h>

#include <algorithm>
#include <array>

#include "dithc/memory.h"

namespace dithc {

namespace {

thread_local WorkerRole t_role = WorkerRole::Compute;
thread_local WorkerPool* t_pool = nullptr;
thread_local bool t_in_pool_task = false;

std::array<std::atomic<std::size_t>, kNumWorkerRoles> g_kernel_calls{};

}  // namespace

const char* role_name(WorkerRole r) {
  switch (r) {
    case WorkerRole::Compute: return "compute";
    case WorkerRole::Load: return "load";
    case WorkerRole::Offload: return "offload";
    case WorkerRole::Comm: return "comm";
    case WorkerRole::Other: return "other";
  }
  return "other";
}

WorkerRole current_role() { return t_role; }
void set_current_role(WorkerRole r) { t_role = r; }

namespace instrument {
void count_kernel() { g_kernel_calls[static_cast<int>(t_role)].fetch_add(1, std::memory_order_relaxed); }
std::size_t kernel_calls(WorkerRole r) { return g_kernel_calls[static_cast<int>(r)].load(); }
void reset_kernel_calls() {
  for (auto& c : g_kernel_calls) c = 0;
}
}  // namespace instrument

namespace {
bool pin_native(pthread_t handle, const std::vector<int>& cores) {
  if (cores.empty()) return true;
  cpu_set_t set;
  CPU_ZERO(&set);
  for (int c : cores) {
    if (c < 0 || c >= CPU_SETSIZE) return false;
    CPU_SET(c, &set);
  }
  return pthread_setaffinity_np(handle, sizeof(set), &set) == 0;
}
}  // namespace

bool pin_current_thread(const std::vector<int>& cores) { return pin_native(pthread_self(), cores); }

bool pin_thread(std::thread& t, const std::vector<int>& cores) {
  if (!t.joinable()) return false;
  return pin_native(t.native_handle(), cores);
}

WorkerPool::WorkerPool(std::size_t clusters, std::size_t threads_per_cluster)
    : clusters_(std::max<std::size_t>(1, clusters)),
      threads_per_cluster_(std::max<std::size_t>(1, threads_per_cluster)) {
  for (std::size_t i = 1; i < size(); ++i) threads_.emplace_back([this, i] { worker_loop(i); });
}

WorkerPool::~WorkerPool() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void WorkerPool::worker_loop(std::size_t) {
  set_current_role(WorkerRole::Compute);
  t_pool = this;
  std::uint64_t seen = 0;
  for (;;) {
    const std::function<void(std::size_t)>* job;
    void* mem;
    int tier;
    {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      job = job_;
      mem = job_memory_;
      tier = job_tier_;
    }
    detail::set_current_memory_raw(static_cast<MemorySystem*>(mem));
    set_default_tier(static_cast<MemTier>(tier));
    t_in_pool_task = true;
    for (;;) {
      const std::size_t task = next_task_.fetch_add(1);
      if (task >= job_tasks_) break;
      try {
        (*job)(task);
      } catch (...) {
        std::lock_guard<std::mutex> lk(mu_);
        if (!error_) error_ = std::current_exception();
      }
    }
    t_in_pool_task = false;
    {
      std::lock_guard<std::mutex> lk(mu_);
      ++finished_;
    }
    done_cv_.notify_all();
  }
}

void WorkerPool::run(std::size_t num_tasks, const std::function<void(std::size_t)>& fn) {
  if (num_tasks == 0) return;
  if (threads_.empty() || t_in_pool_task || num_tasks == 1) {
    const bool outer = t_in_pool_task;
    t_in_pool_task = true;
    try {
      for (std::size_t t = 0; t < num_tasks; ++t) fn(t);
    } catch (...) {
      t_in_pool_task = outer;
      throw;
    }
    t_in_pool_task = outer;
    return;
  }
  std::lock_guard<std::mutex> run_lock(run_mu_);
  {
    std::lock_guard<std::mutex> lk(mu_);
    job_ = &fn;
    job_tasks_ = num_tasks;
    next_task_ = 0;
    job_memory_ = detail::current_memory_raw();
    job_tier_ = static_cast<int>(default_tier());
    error_ = nullptr;
    finished_ = 0;
    ++generation_;
  }
  cv_.notify_all();
  t_in_pool_task = true;
  std::exception_ptr mine;
  for (;;) {
    const std::size_t task = next_task_.fetch_add(1);
    if (task >= num_tasks) break;
    try {
      fn(task);
    } catch (...) {
      if (!mine) mine = std::current_exception();
    }
  }
  t_in_pool_task = false;
  std::exception_ptr err;
  {
    std::unique_lock<std::mutex> lk(mu_);
    // Every worker checks in once per generation, so none can carry a stale
    // job pointer into the next run.
    done_cv_.wait(lk, [&] { return finished_ == threads_.size(); });
    job_ = nullptr;
    err = error_;
  }
  if (mine) std::rethrow_exception(mine);
  if (err) std::rethrow_exception(err);
}

bool WorkerPool::bind(const std::vector<int>& cores) {
  if (cores.empty()) return true;
  bool ok = pin_current_thread({cores[0]});
  for (std::size_t i = 0; i < threads_.size(); ++i) {
    const int core = cores[(i + 1) % cores.size()];
    ok &= pin_thread(threads_[i], {core});
  }
  return ok;
}

WorkerPool& WorkerPool::global() {
  static WorkerPool* g = [] {
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    return new WorkerPool(1, hw);
  }();
  return *g;
}

WorkerPool& WorkerPool::current() { return t_pool ? *t_pool : global(); }

PoolScope::PoolScope(WorkerPool& pool) : prev_(t_pool) { t_pool = &pool; }
PoolScope::~PoolScope() { t_pool = prev_; }

void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  grain = std::max<std::size_t>(1, grain);
  WorkerPool& pool = WorkerPool::current();
  const std::size_t max_chunks = (n + grain - 1) / grain;
  const std::size_t chunks = std::min(max_chunks, pool.size() * 4);
  if (chunks <= 1) {
    fn(0, n);
    return;
  }
  const std::size_t per = (n + chunks - 1) / chunks;
  pool.run(chunks, [&](std::size_t c) {
    const std::size_t b = c * per;
    const std::size_t e = std::min(n, b + per);
    if (b < e) fn(b, e);
  });
}

}  // namespace dithc
