#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "dithc/common.h"

namespace dithc {

class Trace;

constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();
constexpr std::size_t kHugePageBytes = std::size_t{2} << 20;
// Accounting granule: sizes are rounded to whole cache lines.
constexpr std::size_t kAccountingGranule = 64;

// Bandwidth ratios relative to local on-package access.
enum class ThrottlePreset { Off, SameDieRemote, CrossDie, CrossCpu };
double throttle_factor(ThrottlePreset p);
ThrottlePreset parse_throttle_preset(const std::string& s);
const char* throttle_preset_name(ThrottlePreset p);

class AllocationOwner {
 public:
  virtual ~AllocationOwner() = default;
  virtual void release(std::uint64_t id) = 0;
};

// Move-only handle to a block owned by an Arena or a PinnedPool. Releases
// the block when destroyed.
class Allocation {
 public:
  Allocation() = default;
  Allocation(std::shared_ptr<AllocationOwner> owner, std::byte* ptr,
             std::size_t bytes, std::size_t accounted, MemTier tier,
             std::uint64_t id);
  ~Allocation() { reset(); }
  Allocation(Allocation&& o) noexcept;
  Allocation& operator=(Allocation&& o) noexcept;
  Allocation(const Allocation&) = delete;
  Allocation& operator=(const Allocation&) = delete;

  std::byte* data() const { return ptr_; }
  std::size_t bytes() const { return bytes_; }
  std::size_t accounted_bytes() const { return accounted_; }
  MemTier tier() const { return tier_; }
  std::uint64_t id() const { return id_; }
  explicit operator bool() const { return ptr_ != nullptr; }
  void reset();

 private:
  std::shared_ptr<AllocationOwner> owner_;
  std::byte* ptr_ = nullptr;
  std::size_t bytes_ = 0;
  std::size_t accounted_ = 0;
  MemTier tier_ = MemTier::Slow;
  std::uint64_t id_ = 0;
};

struct ArenaConfig {
  MemTier tier = MemTier::Slow;
  std::size_t capacity_bytes = kUnbounded;
  std::size_t alignment_bytes = kHugePageBytes;
  // Simulated bandwidth for transfers into/out of this arena; 0 = off.
  double throttle_bytes_per_sec = 0;
};

// Capacity-bounded tier backed by ordinary host memory. Start addresses
// are aligned to alignment_bytes; used_bytes counts sizes rounded up to
// kAccountingGranule.
class Arena : public AllocationOwner, public std::enable_shared_from_this<Arena> {
 public:
  static std::shared_ptr<Arena> create(const ArenaConfig& cfg);
  ~Arena() override;

  Allocation allocate(std::size_t bytes);
  // Frees by id. Unknown ids raise ArgumentError.
  void release(std::uint64_t id) override;

  MemTier tier() const { return cfg_.tier; }
  std::size_t capacity() const { return cfg_.capacity_bytes; }
  std::size_t alignment() const { return cfg_.alignment_bytes; }
  double throttle() const { return cfg_.throttle_bytes_per_sec; }
  void set_throttle(double bytes_per_sec) { cfg_.throttle_bytes_per_sec = bytes_per_sec; }
  void set_capacity(std::size_t bytes);

  std::size_t used_bytes() const;
  std::size_t peak_bytes() const;
  std::size_t live_count() const;
  void reset_peak();
  // Sum of live accounted sizes equals used_bytes.
  bool conservation_holds() const;

  // Called (without the arena lock) when an allocation does not fit; the
  // allocation is retried once after the handler returns.
  void set_pressure_handler(std::function<void()> handler);

  static std::size_t accounted_size(std::size_t bytes);

 private:
  explicit Arena(const ArenaConfig& cfg);
  bool try_reserve(std::size_t accounted);
  void debug_verify_locked() const;

  ArenaConfig cfg_;
  mutable std::mutex mu_;
  std::size_t used_ = 0;
  std::size_t reserving_ = 0;  // reserved but not yet in live_
  std::size_t peak_ = 0;
  std::uint64_t next_id_ = 1;
  struct Live {
    std::byte* ptr;
    std::size_t accounted;
  };
  std::map<std::uint64_t, Live> live_;
  std::function<void()> pressure_;
};

// Slow-tier sub-arena carved into fixed-size blocks. Slots are assigned
// once (during warm-up) and reused every step; their memory never goes
// back to the parent arena while the pool lives.
class PinnedPool : public AllocationOwner, public std::enable_shared_from_this<PinnedPool> {
 public:
  using SlotId = std::size_t;

  static std::shared_ptr<PinnedPool> create(std::shared_ptr<Arena> slow,
                                            std::size_t block_bytes);

  // Grows the pool's backing by at least `bytes`.
  void reserve(std::size_t bytes);
  // Assigns a contiguous block range able to hold `bytes`.
  SlotId assign(std::size_t bytes);
  void unassign(SlotId slot);
  // Slot at a fixed block offset of `chunk`, outside the free-range
  // bookkeeping. Planned slots may share blocks when their lifetimes are
  // disjoint; acquiring one whose blocks are occupied raises PoolExhausted.
  SlotId assign_planned(std::size_t chunk, std::size_t first_block, std::size_t bytes);
  // Marks the slot occupied and returns an allocation over it.
  Allocation acquire(SlotId slot);
  void release(std::uint64_t id) override;

  std::size_t block_bytes() const { return block_bytes_; }
  std::size_t capacity_bytes() const;
  std::size_t assigned_bytes() const;
  std::size_t occupied_bytes() const;
  std::size_t peak_occupied_bytes() const;
  std::size_t slot_bytes(SlotId slot) const;
  bool occupied(SlotId slot) const;
  std::size_t num_slots() const;

 private:
  PinnedPool(std::shared_ptr<Arena> slow, std::size_t block_bytes);
  std::size_t capacity_bytes_locked_() const;

  struct Chunk {
    Allocation backing;
    std::size_t blocks;
  };
  struct Slot {
    std::size_t chunk;
    std::size_t first_block;
    std::size_t num_blocks;
    std::size_t bytes;
    bool assigned;
    bool occupied;
    bool planned = false;
  };

  std::shared_ptr<Arena> slow_;
  std::size_t block_bytes_;
  mutable std::mutex mu_;
  std::vector<Chunk> chunks_;
  // Per chunk: free block ranges (first, count), kept sorted.
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> free_;
  std::vector<Slot> slots_;
  std::size_t occupied_ = 0;
  std::size_t peak_occupied_ = 0;
};

enum class TransferState { Queued = 0, InFlight = 1, Done = 2 };
enum class TransferDirection { Load, Offload };

// Completion token for one copy on the transfer engine.
class TransferRequest {
 public:
  TransferRequest() = default;

  bool valid() const { return static_cast<bool>(s_); }
  TransferState state() const;
  bool done() const { return state() == TransferState::Done; }
  void wait() const;
  std::size_t bytes() const;
  TransferDirection direction() const;
  // bytes / throttle rate, or 0 when unthrottled.
  double simulated_seconds() const;
  // Wall time between the worker picking up the request and completion.
  double measured_seconds() const;
  const std::string& label() const;

  struct Shared;
  explicit TransferRequest(std::shared_ptr<Shared> s) : s_(std::move(s)) {}

 private:
  std::shared_ptr<Shared> s_;
};

// Two dedicated workers, one per direction, each draining its own FIFO.
class TransferEngine {
 public:
  explicit TransferEngine(Trace* trace = nullptr);
  ~TransferEngine();
  TransferEngine(const TransferEngine&) = delete;
  TransferEngine& operator=(const TransferEngine&) = delete;

  // Raw copy of `bytes` from src to dst. Both buffers must outlive the
  // request. on_done runs on the worker after the copy, before Done.
  TransferRequest submit(TransferDirection dir, const std::byte* src, std::byte* dst,
                         std::size_t bytes, double rate_bytes_per_sec,
                         std::string label, std::function<void()> on_done = {});

  void shutdown();
  bool running() const;
  // Waits until both queues are empty and idle.
  void drain();
  void drain(TransferDirection dir);
  std::size_t bytes_moved() const { return bytes_moved_.load(); }

  // Affinity for the two workers.
  bool bind(const std::vector<int>& load_cores, const std::vector<int>& offload_cores);

 private:
  struct Queue {
    std::mutex mu;
    std::condition_variable cv;
    std::condition_variable idle_cv;
    std::deque<std::shared_ptr<TransferRequest::Shared>> items;
    bool busy = false;
    std::thread worker;
  };
  void worker_loop(Queue& q, TransferDirection dir);

  Trace* trace_;
  Queue load_;
  Queue offload_;
  std::atomic<bool> stop_{false};
  std::atomic<std::size_t> bytes_moved_{0};
};

enum class Residency { Fast, Slow, InFlight };

// Backing store of a tensor. AutoMem moves storages between tiers; all
// views sharing a storage observe the move.
class Storage {
 public:
  explicit Storage(Allocation alloc);
  ~Storage();

  // Kernel-side accessor. Reading while a move is in flight is counted as
  // a barrier violation.
  std::byte* data();
  const std::byte* data() const;
  std::size_t bytes() const;
  MemTier tier() const;
  Residency residency() const;
  TransferRequest pending() const;
  // Blocks until any in-flight move completes.
  void wait_resident() const;

  // Used by MemorySystem::migrate_async.
  void begin_move();
  void attach_pending(TransferRequest req);
  void finish_move(Allocation dst);
  std::byte* raw_data_unchecked() const;

 private:
  mutable std::mutex mu_;
  Allocation alloc_;
  bool in_flight_ = false;
  TransferRequest pending_;
};

namespace instrument {
std::size_t inflight_reads();
void reset_inflight_reads();
// When strict, an in-flight read throws instead of only counting.
void set_strict_barriers(bool strict);
void set_debug_checks(bool on);
bool debug_checks();
}  // namespace instrument

struct MemoryConfig {
  std::size_t fast_capacity_bytes = std::size_t{512} << 20;
  std::size_t slow_capacity_bytes = kUnbounded;
  std::size_t alignment_bytes = kHugePageBytes;
  ThrottlePreset throttle = ThrottlePreset::Off;
  // Base rate the preset factor applies to; 0 disables throttling.
  double base_bytes_per_sec = 0;
};

// The two arenas, the transfer engine and the allocation context.
class MemorySystem {
 public:
  explicit MemorySystem(const MemoryConfig& cfg = {}, Trace* trace = nullptr);
  ~MemorySystem();
  MemorySystem(const MemorySystem&) = delete;
  MemorySystem& operator=(const MemorySystem&) = delete;

  Arena& arena(MemTier t) { return t == MemTier::Fast ? *fast_ : *slow_; }
  const Arena& arena(MemTier t) const { return t == MemTier::Fast ? *fast_ : *slow_; }
  std::shared_ptr<Arena> arena_ptr(MemTier t) { return t == MemTier::Fast ? fast_ : slow_; }
  Arena& fast() { return *fast_; }
  Arena& slow() { return *slow_; }
  TransferEngine& transfers() { return *engine_; }
  Trace* trace() const { return trace_; }
  const MemoryConfig& config() const { return cfg_; }

  Allocation allocate(std::size_t bytes, MemTier tier);
  // Allocates in the calling flow's default tier.
  Allocation allocate(std::size_t bytes);

  // Copies one allocation into another of equal size on the worker for
  // the destination direction (dst Fast = load, otherwise offload).
  TransferRequest transfer_async(const Allocation& src, Allocation& dst,
                                 std::string label = {});

  // Moves a storage into `dst`; the old block is released on completion.
  TransferRequest migrate_async(const std::shared_ptr<Storage>& s, Allocation dst,
                                std::string label);

  void set_throttle(ThrottlePreset preset, double base_bytes_per_sec);
  double transfer_rate(MemTier src, MemTier dst) const;

  static MemorySystem& current();
  static MemorySystem& global();

 private:
  MemoryConfig cfg_;
  Trace* trace_;
  std::shared_ptr<Arena> fast_;
  std::shared_ptr<Arena> slow_;
  std::unique_ptr<TransferEngine> engine_;
};

// Per-flow default allocation tier. Returns the previous tier.
MemTier set_default_tier(MemTier tier);
MemTier default_tier();

class TierScope {
 public:
  explicit TierScope(MemTier t) : prev_(set_default_tier(t)) {}
  ~TierScope() { set_default_tier(prev_); }
  TierScope(const TierScope&) = delete;
  TierScope& operator=(const TierScope&) = delete;

 private:
  MemTier prev_;
};

// Makes `ms` the current memory system for this thread.
class MemoryScope {
 public:
  explicit MemoryScope(MemorySystem& ms);
  ~MemoryScope();
  MemoryScope(const MemoryScope&) = delete;
  MemoryScope& operator=(const MemoryScope&) = delete;

 private:
  MemorySystem* prev_;
};

namespace detail {
MemorySystem* current_memory_raw();
void set_current_memory_raw(MemorySystem* ms);
}  // namespace detail

}  // namespace dithc
