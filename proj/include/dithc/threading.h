#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace dithc {

// Every thread the runtime starts carries a role tag. Kernel entry points
// count invocations per role so tests can audit that transfer and
// communication workers never execute compute kernels.
enum class WorkerRole : int { Compute = 0, Load = 1, Offload = 2, Comm = 3, Other = 4 };
constexpr int kNumWorkerRoles = 5;

const char* role_name(WorkerRole r);
WorkerRole current_role();
void set_current_role(WorkerRole r);

namespace instrument {
void count_kernel();
std::size_t kernel_calls(WorkerRole r);
void reset_kernel_calls();
}  // namespace instrument

// Best-effort core pinning. Returns false (and leaves affinity untouched)
// when the platform rejects the request.
bool pin_current_thread(const std::vector<int>& cores);
bool pin_thread(std::thread& t, const std::vector<int>& cores);

// Fixed pool of compute workers partitioned into cluster groups. The
// calling thread participates as worker 0, so a pool of size 1 runs
// everything inline.
class WorkerPool {
 public:
  WorkerPool(std::size_t clusters, std::size_t threads_per_cluster);
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  std::size_t size() const { return clusters_ * threads_per_cluster_; }
  std::size_t clusters() const { return clusters_; }
  std::size_t threads_per_cluster() const { return threads_per_cluster_; }

  // Runs fn(task) for task in [0, num_tasks) and returns when all finished.
  // Tasks are claimed dynamically; callers must not depend on which worker
  // runs which task. Nested calls from inside a task run inline.
  void run(std::size_t num_tasks, const std::function<void(std::size_t)>& fn);

  // Applies affinity: worker w of cluster c gets cores[c * tpc + w] when
  // available. Returns false if any pin failed.
  bool bind(const std::vector<int>& cores);

  static WorkerPool& current();
  static WorkerPool& global();

 private:
  void worker_loop(std::size_t index);

  std::size_t clusters_;
  std::size_t threads_per_cluster_;
  std::vector<std::thread> threads_;

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::mutex run_mu_;
  const std::function<void(std::size_t)>* job_ = nullptr;
  std::size_t job_tasks_ = 0;
  std::atomic<std::size_t> next_task_{0};
  std::size_t finished_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
  // Context captured from the submitting thread and installed in workers.
  void* job_memory_ = nullptr;
  int job_tier_ = 1;
  std::exception_ptr error_;
};

// Installs a pool as the current one for this thread.
class PoolScope {
 public:
  explicit PoolScope(WorkerPool& pool);
  ~PoolScope();
  PoolScope(const PoolScope&) = delete;
  PoolScope& operator=(const PoolScope&) = delete;

 private:
  WorkerPool* prev_;
};

// Splits [0, n) into contiguous chunks over the current pool.
void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace dithc
