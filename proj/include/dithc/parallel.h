#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dithc/comm.h"
#include "dithc/gemm.h"
#include "dithc/module.h"
#include "dithc/trace.h"

namespace dithc {

class WorkerPool;
class TransferEngine;

// ------------------------------------------------------------------- CFTP

enum class CftpKind { Gemm, GemmBias, Rowwise };

struct CftpResult {
  Tensor out;
  int groups_used = 0;
};

// Runs one op across `groups` cluster groups of the current process. Each
// group writes a disjoint slice of the output (columns for gemm, rows for
// row-wise ops) straight into shared memory; no messages are exchanged
// (checked against the transport message counter). Results are bitwise
// identical for every group count. Fewer output columns/rows than groups
// degrades to one group per column/row with a warning.
CftpResult cftp_gemm(const Tensor& A, const Tensor& B, int groups);
CftpResult cftp_gemm_bias(const Tensor& A, const Tensor& B, const Tensor& bias, int groups);
// `fn` maps a contiguous block of rows to the same number of output rows.
CftpResult cftp_rowwise(const Tensor& X, const std::function<Tensor(const Tensor&)>& fn, int groups);

// Affinity for the three worker classes. Overlapping sets raise
// ArgumentError; pin failures only warn. Returns true if every pin held.
struct CoreSets {
  std::vector<int> compute;
  std::vector<int> comm;
  std::vector<int> transfer;
};
bool bind_workers(const CoreSets& sets, WorkerPool* pool, comm::Communicator* comm, TransferEngine* transfers);

// --------------------------------------------------------- bucketed reduce

constexpr std::size_t kDefaultBucketBytes = std::size_t{4} << 20;
constexpr std::size_t kUnboundedBucket = std::numeric_limits<std::size_t>::max();

// Data-parallel gradient averaging. Parameters are bucketed in reverse
// registration order; a bucket closes once it reaches the byte threshold.
// With overlap on, ready hooks issue each bucket's allreduce as soon as all
// its grads have accumulated; otherwise everything is reduced by one
// blocking pass in finish(). finish() waits, then writes sum / R back.
class GradReducer {
 public:
  GradReducer(comm::Communicator& comm, std::vector<Parameter*> params,
              std::size_t threshold_bytes = kDefaultBucketBytes, bool overlap = true,
              Trace* trace = nullptr);
  ~GradReducer();
  GradReducer(const GradReducer&) = delete;
  GradReducer& operator=(const GradReducer&) = delete;

  void begin_step();
  void finish();

  std::size_t num_buckets() const { return buckets_.size(); }
  // Parameter indices (registration order) of bucket b, in fill order.
  const std::vector<std::size_t>& bucket(std::size_t b) const { return buckets_.at(b).members; }
  std::size_t bucket_bytes(std::size_t b) const { return buckets_.at(b).bytes; }
  std::size_t collectives_issued() const { return issued_total_; }
  // Buckets whose allreduce went out before finish() was called.
  std::size_t issued_during_backward() const { return issued_early_; }

 private:
  struct Bucket {
    std::vector<std::size_t> members;
    std::size_t bytes = 0;
    std::size_t pending = 0;
    Tensor staging;
    comm::CollectiveHandle handle;
    bool issued = false;
  };
  void on_ready(std::size_t param_index);
  void issue(std::size_t b);
  void issue_ready_prefix();

  comm::Communicator& comm_;
  std::vector<Parameter*> params_;
  std::vector<int> hook_ids_;
  std::vector<std::size_t> bucket_of_;
  std::vector<Bucket> buckets_;
  bool overlap_;
  Trace* trace_;
  bool in_step_ = false;
  bool finishing_ = false;
  std::size_t next_issue_ = 0;
  std::size_t issued_total_ = 0;
  std::size_t issued_early_ = 0;
};

}  // namespace dithc
