#include "dithc/parallel.h"

#include <algorithm>
#include <cstring>
#include <set>

#include "dithc/memory.h"
#include "dithc/threading.h"

namespace dithc {

namespace {

int effective_groups(const char* what, std::int64_t extent, int groups) {
  if (groups < 1) throw_argument(std::string(what) + ": groups must be >= 1");
  if (extent < groups) {
    int g = static_cast<int>(std::max<std::int64_t>(extent, 1));
    warn(std::string(what) + ": " + std::to_string(extent) + " output slices for " + std::to_string(groups) +
         " groups, running with " + std::to_string(g));
    return g;
  }
  return groups;
}

struct MessageGuard {
  std::size_t before = comm::instrument::messages_sent();
  const char* what;
  explicit MessageGuard(const char* w) : what(w) {}
  void check() const {
    if (comm::instrument::messages_sent() != before)
      throw Error(std::string(what) + ": inter-group messages observed under CFTP");
  }
};

CftpResult cftp_gemm_impl(const Tensor& A, const Tensor& B, const Tensor* bias, int groups) {
  if (A.rank() != 2 || B.rank() != 2) throw_argument("cftp_gemm: operands must be rank 2");
  MessageGuard guard("cftp_gemm");
  CftpResult r;
  r.groups_used = effective_groups("cftp_gemm", B.dim(1), groups);
  // The GEMM outer level is the cluster-group split: each group owns a
  // contiguous run of output column panels and writes it in place.
  TileConfig cfg = default_tile_config();
  cfg.clusters = r.groups_used;
  r.out = Tensor::empty({A.dim(0), B.dim(1)}, A.dtype());
  if (bias)
    gemm_bias(A, B, *bias, r.out, cfg);
  else
    gemm(A, B, r.out, 1.0, 0.0, cfg);
  guard.check();
  return r;
}

}  // namespace

CftpResult cftp_gemm(const Tensor& A, const Tensor& B, int groups) { return cftp_gemm_impl(A, B, nullptr, groups); }

CftpResult cftp_gemm_bias(const Tensor& A, const Tensor& B, const Tensor& bias, int groups) {
  return cftp_gemm_impl(A, B, &bias, groups);
}

CftpResult cftp_rowwise(const Tensor& X, const std::function<Tensor(const Tensor&)>& fn, int groups) {
  if (X.rank() < 1) throw_argument("cftp_rowwise: input must have rows");
  MessageGuard guard("cftp_rowwise");
  CftpResult r;
  const std::int64_t rows = X.dim(0);
  r.groups_used = effective_groups("cftp_rowwise", rows, groups);
  const int G = r.groups_used;
  auto lo = [&](int g) { return rows * g / G; };

  // First group fixes the output row shape; the rest write their slices.
  std::vector<Tensor> parts(static_cast<std::size_t>(G));
  WorkerPool::current().run(static_cast<std::size_t>(G), [&](std::size_t g) {
    const int gi = static_cast<int>(g);
    parts[g] = fn(X.narrow(0, lo(gi), lo(gi + 1) - lo(gi)));
  });
  Shape shape = parts[0].shape();
  if (shape.empty()) throw_argument("cftp_rowwise: fn must return rows");
  shape[0] = rows;
  r.out = Tensor::empty(shape, parts[0].dtype());
  for (int g = 0; g < G; ++g) {
    if (parts[static_cast<std::size_t>(g)].dim(0) != lo(g + 1) - lo(g))
      throw_argument("cftp_rowwise: fn changed the row count");
    r.out.narrow(0, lo(g), lo(g + 1) - lo(g)).copy_from(parts[static_cast<std::size_t>(g)]);
  }
  guard.check();
  return r;
}

bool bind_workers(const CoreSets& sets, WorkerPool* pool, comm::Communicator* comm, TransferEngine* transfers) {
  std::set<int> seen;
  for (const auto* s : {&sets.compute, &sets.comm, &sets.transfer})
    for (int c : *s) {
      if (c < 0) throw_argument("bind_workers: negative core id");
      if (!seen.insert(c).second)
        throw_argument("bind_workers: core " + std::to_string(c) + " requested by more than one worker class");
    }
  bool ok = true;
  if (pool && !sets.compute.empty()) ok = pool->bind(sets.compute) && ok;
  if (comm && !sets.comm.empty()) ok = comm->bind(sets.comm) && ok;
  if (transfers && !sets.transfer.empty()) {
    std::vector<int> load(sets.transfer.begin(), sets.transfer.begin() + 1);
    std::vector<int> off(sets.transfer.size() > 1 ? sets.transfer.begin() + 1 : sets.transfer.begin(),
                         sets.transfer.end());
    ok = transfers->bind(load, off) && ok;
  }
  if (!ok) warn("bind_workers: core affinity not applied; continuing unpinned");
  return ok;
}

// ------------------------------------------------------------- GradReducer

GradReducer::GradReducer(comm::Communicator& comm, std::vector<Parameter*> params, std::size_t threshold_bytes,
                         bool overlap, Trace* trace)
    : comm_(comm), params_(std::move(params)), overlap_(overlap), trace_(trace) {
  if (params_.empty()) throw_argument("GradReducer: no parameters");
  bucket_of_.assign(params_.size(), 0);
  Bucket cur;
  Dtype cur_dtype = params_.back()->value().dtype();
  for (std::size_t k = params_.size(); k-- > 0;) {
    const Tensor& v = params_[k]->value();
    if (!cur.members.empty() && v.dtype() != cur_dtype) {
      buckets_.push_back(std::move(cur));
      cur = Bucket();
    }
    cur_dtype = v.dtype();
    bucket_of_[k] = buckets_.size();
    cur.members.push_back(k);
    cur.bytes += v.nbytes();
    if (threshold_bytes != kUnboundedBucket && cur.bytes >= threshold_bytes) {
      buckets_.push_back(std::move(cur));
      cur = Bucket();
    }
  }
  if (!cur.members.empty()) buckets_.push_back(std::move(cur));
  if (overlap_) {
    for (std::size_t k = 0; k < params_.size(); ++k)
      hook_ids_.push_back(params_[k]->add_ready_hook([this, k](Parameter&) { on_ready(k); }));
  }
}

GradReducer::~GradReducer() {
  for (std::size_t k = 0; k < hook_ids_.size(); ++k) params_[k]->remove_ready_hook(hook_ids_[k]);
  // Issued collectives keep their staging buffers alive; no wait needed.
}

void GradReducer::begin_step() {
  for (auto& b : buckets_) {
    if (b.issued) b.handle.wait();
    b.pending = b.members.size();
    b.issued = false;
    b.handle = comm::CollectiveHandle();
    b.staging = Tensor();
  }
  next_issue_ = 0;
  in_step_ = true;
  finishing_ = false;
}

void GradReducer::on_ready(std::size_t k) {
  if (!in_step_) return;
  Bucket& b = buckets_[bucket_of_[k]];
  if (b.pending == 0) throw Error("GradReducer: parameter " + params_[k]->name() + " became ready twice in one step");
  --b.pending;
  issue_ready_prefix();
}

// Buckets go out strictly in bucket order so every rank issues the same
// sequence even if readiness interleaves differently.
void GradReducer::issue_ready_prefix() {
  while (next_issue_ < buckets_.size() && buckets_[next_issue_].pending == 0) issue(next_issue_++);
}

void GradReducer::issue(std::size_t bi) {
  Bucket& b = buckets_[bi];
  const Dtype dt = params_[b.members.front()]->value().dtype();
  const std::int64_t n = static_cast<std::int64_t>(b.bytes / dtype_size(dt));
  b.staging = Tensor::empty({n}, dt, MemTier::Slow);
  std::byte* dst = b.staging.raw();
  std::size_t at = 0;
  for (std::size_t k : b.members) {
    Parameter& p = *params_[k];
    if (!p.has_grad()) throw Error("GradReducer: parameter " + p.name() + " has no gradient");
    Tensor g = p.grad().contiguous();
    std::memcpy(dst + at, g.raw(), g.nbytes());
    at += g.nbytes();
  }
  std::string label = "bucket:" + std::to_string(bi);
  if (trace_) trace_->record("comm", "issue", label, b.bytes);
  b.handle = comm_.allreduce_async(b.staging);
  b.issued = true;
  ++issued_total_;
  if (!finishing_) ++issued_early_;
}

void GradReducer::finish() {
  if (!in_step_) throw_argument("GradReducer::finish without begin_step");
  finishing_ = true;
  for (auto& b : buckets_) b.pending = 0;
  issue_ready_prefix();
  const double R = static_cast<double>(comm_.size());
  for (std::size_t bi = 0; bi < buckets_.size(); ++bi) {
    Bucket& b = buckets_[bi];
    b.handle.wait();
    if (trace_) trace_->record("comm", "end", "bucket:" + std::to_string(bi), b.bytes);
    std::size_t at = 0;
    const std::size_t es = dtype_size(b.staging.dtype());
    for (std::size_t k : b.members) {
      Parameter& p = *params_[k];
      Tensor& g = p.grad();
      const std::int64_t cnt = g.numel();
      Tensor src = b.staging.narrow(0, static_cast<std::int64_t>(at / es), cnt).reshape(g.shape());
      if (R != 1.0) {
        if (src.dtype() == Dtype::F32) {
          float* s = src.data<float>();
          const float r = static_cast<float>(R);
          for (std::int64_t i = 0; i < cnt; ++i) s[i] = s[i] / r;
        } else {
          double* s = src.data<double>();
          for (std::int64_t i = 0; i < cnt; ++i) s[i] = s[i] / R;
        }
      }
      g.copy_from(src);
      at += static_cast<std::size_t>(cnt) * es;
    }
    b.staging = Tensor();
  }
  in_step_ = false;
}

}  // namespace dithc
