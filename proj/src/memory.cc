#include "dithc/memory.h"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <iostream>
#include <new>
#include <sstream>

#include "dithc/threading.h"
#include "dithc/trace.h"

namespace dithc {

namespace {

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

std::atomic<std::size_t> g_inflight_reads{0};
std::atomic<bool> g_strict_barriers{false};
std::atomic<bool> g_debug_checks{false};

thread_local MemorySystem* t_memory = nullptr;
thread_local MemTier t_default_tier = MemTier::Slow;

}  // namespace

const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }
const char* tier_name(MemTier t) { return t == MemTier::Fast ? "fast" : "slow"; }

OutOfTier::OutOfTier(MemTier tier, std::size_t requested, std::size_t used,
                     std::size_t capacity, std::string report)
    : Error("OutOfTier: " + std::string(tier_name(tier)) + " tier cannot fit " +
            std::to_string(requested) + " bytes (used " + std::to_string(used) +
            " of " + std::to_string(capacity) + ")"),
      tier_(tier),
      requested_(requested),
      used_(used),
      capacity_(capacity),
      report_(std::move(report)) {}

void throw_argument(std::string_view what) { throw ArgumentError(std::string(what)); }

namespace {
WarningSink g_warning_sink = nullptr;
}

void set_warning_sink(WarningSink sink) { g_warning_sink = sink; }

void warn(const std::string& msg) {
  if (g_warning_sink) {
    g_warning_sink(msg);
  } else {
    std::cerr << "dithc warning: " << msg << "\n";
  }
}

double throttle_factor(ThrottlePreset p) {
  switch (p) {
    case ThrottlePreset::Off: return 1.0;
    case ThrottlePreset::SameDieRemote: return 0.5;
    case ThrottlePreset::CrossDie: return 0.37;
    case ThrottlePreset::CrossCpu: return 0.10;
  }
  return 1.0;
}

ThrottlePreset parse_throttle_preset(const std::string& s) {
  if (s == "off") return ThrottlePreset::Off;
  if (s == "same_die_remote") return ThrottlePreset::SameDieRemote;
  if (s == "cross_die") return ThrottlePreset::CrossDie;
  if (s == "cross_cpu") return ThrottlePreset::CrossCpu;
  throw ConfigError("unknown throttle preset '" + s + "'");
}

const char* throttle_preset_name(ThrottlePreset p) {
  switch (p) {
    case ThrottlePreset::Off: return "off";
    case ThrottlePreset::SameDieRemote: return "same_die_remote";
    case ThrottlePreset::CrossDie: return "cross_die";
    case ThrottlePreset::CrossCpu: return "cross_cpu";
  }
  return "off";
}

// ---------------------------------------------------------------- Allocation

Allocation::Allocation(std::shared_ptr<AllocationOwner> owner, std::byte* ptr,
                       std::size_t bytes, std::size_t accounted, MemTier tier,
                       std::uint64_t id)
    : owner_(std::move(owner)), ptr_(ptr), bytes_(bytes), accounted_(accounted), tier_(tier), id_(id) {}

Allocation::Allocation(Allocation&& o) noexcept
    : owner_(std::move(o.owner_)), ptr_(o.ptr_), bytes_(o.bytes_), accounted_(o.accounted_),
      tier_(o.tier_), id_(o.id_) {
  o.ptr_ = nullptr;
  o.bytes_ = o.accounted_ = 0;
}

Allocation& Allocation::operator=(Allocation&& o) noexcept {
  if (this != &o) {
    reset();
    owner_ = std::move(o.owner_);
    ptr_ = o.ptr_;
    bytes_ = o.bytes_;
    accounted_ = o.accounted_;
    tier_ = o.tier_;
    id_ = o.id_;
    o.ptr_ = nullptr;
    o.bytes_ = o.accounted_ = 0;
  }
  return *this;
}

void Allocation::reset() {
  if (ptr_ && owner_) owner_->release(id_);
  owner_.reset();
  ptr_ = nullptr;
  bytes_ = accounted_ = 0;
}

// --------------------------------------------------------------------- Arena

std::shared_ptr<Arena> Arena::create(const ArenaConfig& cfg) {
  if (cfg.alignment_bytes == 0 || (cfg.alignment_bytes & (cfg.alignment_bytes - 1)) != 0)
    throw_argument("Arena: alignment must be a power of two");
  return std::shared_ptr<Arena>(new Arena(cfg));
}

Arena::Arena(const ArenaConfig& cfg) : cfg_(cfg) {}

Arena::~Arena() {
  for (auto& [id, live] : live_)
    ::operator delete(live.ptr, std::align_val_t(cfg_.alignment_bytes));
}

std::size_t Arena::accounted_size(std::size_t bytes) { return round_up(bytes, kAccountingGranule); }

bool Arena::try_reserve(std::size_t accounted) {
  if (cfg_.capacity_bytes != kUnbounded &&
      (accounted > cfg_.capacity_bytes || used_ > cfg_.capacity_bytes - accounted))
    return false;
  used_ += accounted;
  reserving_ += accounted;
  peak_ = std::max(peak_, used_);
  return true;
}

Allocation Arena::allocate(std::size_t bytes) {
  if (bytes == 0) throw_argument("Arena::allocate: bytes must be > 0");
  const std::size_t accounted = accounted_size(bytes);
  bool ok;
  {
    std::lock_guard<std::mutex> lk(mu_);
    ok = try_reserve(accounted);
  }
  if (!ok) {
    std::function<void()> handler;
    {
      std::lock_guard<std::mutex> lk(mu_);
      handler = pressure_;
    }
    if (handler) {
      handler();
      std::lock_guard<std::mutex> lk(mu_);
      ok = try_reserve(accounted);
    }
  }
  if (!ok) {
    std::lock_guard<std::mutex> lk(mu_);
    throw OutOfTier(cfg_.tier, bytes, used_, cfg_.capacity_bytes);
  }
  std::byte* p;
  try {
    p = static_cast<std::byte*>(::operator new(bytes, std::align_val_t(cfg_.alignment_bytes)));
  } catch (...) {
    std::lock_guard<std::mutex> lk(mu_);
    used_ -= accounted;
    reserving_ -= accounted;
    throw;
  }
  std::uint64_t id;
  {
    std::lock_guard<std::mutex> lk(mu_);
    id = next_id_++;
    live_.emplace(id, Live{p, accounted});
    reserving_ -= accounted;
    debug_verify_locked();
  }
  return Allocation(shared_from_this(), p, bytes, accounted, cfg_.tier, id);
}

void Arena::release(std::uint64_t id) {
  std::byte* p;
  {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = live_.find(id);
    if (it == live_.end())
      throw_argument("Arena::release: unknown allocation id " + std::to_string(id));
    p = it->second.ptr;
    used_ -= it->second.accounted;
    live_.erase(it);
    debug_verify_locked();
  }
  ::operator delete(p, std::align_val_t(cfg_.alignment_bytes));
}

void Arena::set_capacity(std::size_t bytes) {
  std::lock_guard<std::mutex> lk(mu_);
  cfg_.capacity_bytes = bytes;
}

std::size_t Arena::used_bytes() const {
  std::lock_guard<std::mutex> lk(mu_);
  return used_;
}

std::size_t Arena::peak_bytes() const {
  std::lock_guard<std::mutex> lk(mu_);
  return peak_;
}

std::size_t Arena::live_count() const {
  std::lock_guard<std::mutex> lk(mu_);
  return live_.size();
}

void Arena::reset_peak() {
  std::lock_guard<std::mutex> lk(mu_);
  peak_ = used_;
}

bool Arena::conservation_holds() const {
  std::lock_guard<std::mutex> lk(mu_);
  std::size_t sum = 0;
  for (const auto& [id, live] : live_) sum += live.accounted;
  return sum + reserving_ == used_;
}

void Arena::debug_verify_locked() const {
  if (!instrument::debug_checks()) return;
  std::size_t sum = 0;
  for (const auto& [id, live] : live_) {
    sum += live.accounted;
    if (reinterpret_cast<std::uintptr_t>(live.ptr) % cfg_.alignment_bytes != 0)
      throw std::logic_error("Arena: misaligned live allocation");
  }
  if (sum + reserving_ != used_) throw std::logic_error("Arena: conservation violated");
  if (cfg_.capacity_bytes != kUnbounded && used_ > cfg_.capacity_bytes)
    throw std::logic_error("Arena: used exceeds capacity");
}

void Arena::set_pressure_handler(std::function<void()> handler) {
  std::lock_guard<std::mutex> lk(mu_);
  pressure_ = std::move(handler);
}

// ---------------------------------------------------------------- PinnedPool

std::shared_ptr<PinnedPool> PinnedPool::create(std::shared_ptr<Arena> slow, std::size_t block_bytes) {
  if (!slow || slow->tier() != MemTier::Slow) throw_argument("PinnedPool: parent arena must be Slow tier");
  if (block_bytes == 0) throw_argument("PinnedPool: block size must be > 0");
  return std::shared_ptr<PinnedPool>(new PinnedPool(std::move(slow), block_bytes));
}

PinnedPool::PinnedPool(std::shared_ptr<Arena> slow, std::size_t block_bytes)
    : slow_(std::move(slow)), block_bytes_(round_up(block_bytes, kAccountingGranule)) {}

void PinnedPool::reserve(std::size_t bytes) {
  if (bytes == 0) return;
  const std::size_t blocks = (bytes + block_bytes_ - 1) / block_bytes_;
  Allocation backing = slow_->allocate(blocks * block_bytes_);
  std::lock_guard<std::mutex> lk(mu_);
  chunks_.push_back(Chunk{std::move(backing), blocks});
  free_.push_back({{0, blocks}});
}

PinnedPool::SlotId PinnedPool::assign(std::size_t bytes) {
  if (bytes == 0) throw_argument("PinnedPool::assign: bytes must be > 0");
  const std::size_t need = (bytes + block_bytes_ - 1) / block_bytes_;
  std::lock_guard<std::mutex> lk(mu_);
  for (std::size_t c = 0; c < free_.size(); ++c) {
    auto& ranges = free_[c];
    for (std::size_t r = 0; r < ranges.size(); ++r) {
      auto [first, count] = ranges[r];
      if (count < need) continue;
      if (count == need) {
        ranges.erase(ranges.begin() + static_cast<std::ptrdiff_t>(r));
      } else {
        ranges[r] = {first + need, count - need};
      }
      slots_.push_back(Slot{c, first, need, bytes, true, false});
      return slots_.size() - 1;
    }
  }
  std::size_t free_blocks = 0;
  for (const auto& ranges : free_)
    for (const auto& [f, n] : ranges) free_blocks += n;
  throw PoolExhausted("PinnedPool: no free range of " + std::to_string(need) + " blocks (" +
                      std::to_string(free_blocks) + " free blocks, " + std::to_string(slots_.size()) +
                      " slots assigned)");
}

void PinnedPool::unassign(SlotId slot) {
  std::lock_guard<std::mutex> lk(mu_);
  Slot& s = slots_.at(slot);
  if (!s.assigned) throw_argument("PinnedPool::unassign: slot not assigned");
  if (s.occupied) throw_argument("PinnedPool::unassign: slot still occupied");
  s.assigned = false;
  auto& ranges = free_[s.chunk];
  ranges.emplace_back(s.first_block, s.num_blocks);
  std::sort(ranges.begin(), ranges.end());
  std::vector<std::pair<std::size_t, std::size_t>> merged;
  for (const auto& r : ranges) {
    if (!merged.empty() && merged.back().first + merged.back().second == r.first)
      merged.back().second += r.second;
    else
      merged.push_back(r);
  }
  ranges = std::move(merged);
}

PinnedPool::SlotId PinnedPool::assign_planned(std::size_t chunk, std::size_t first_block, std::size_t bytes) {
  if (bytes == 0) throw_argument("PinnedPool::assign_planned: bytes must be > 0");
  const std::size_t need = (bytes + block_bytes_ - 1) / block_bytes_;
  std::lock_guard<std::mutex> lk(mu_);
  if (chunk >= chunks_.size() || first_block + need > chunks_[chunk].blocks)
    throw PoolExhausted("PinnedPool: planned slot [" + std::to_string(first_block) + ", " +
                        std::to_string(first_block + need) + ") does not fit chunk " + std::to_string(chunk));
  slots_.push_back(Slot{chunk, first_block, need, bytes, true, false, true});
  return slots_.size() - 1;
}

Allocation PinnedPool::acquire(SlotId slot) {
  std::lock_guard<std::mutex> lk(mu_);
  if (slot >= slots_.size() || !slots_[slot].assigned)
    throw_argument("PinnedPool::acquire: unknown slot " + std::to_string(slot));
  Slot& s = slots_[slot];
  if (s.occupied)
    throw PoolExhausted("PinnedPool::acquire: slot " + std::to_string(slot) + " already occupied (" +
                        std::to_string(occupied_) + " of " +
                        std::to_string(capacity_bytes_locked_()) + " bytes occupied)");
  if (s.planned)
    for (std::size_t o = 0; o < slots_.size(); ++o) {
      const Slot& t = slots_[o];
      if (o == slot || !t.occupied || t.chunk != s.chunk) continue;
      if (t.first_block < s.first_block + s.num_blocks && s.first_block < t.first_block + t.num_blocks)
        throw PoolExhausted("PinnedPool::acquire: slot " + std::to_string(slot) + " overlaps occupied slot " +
                            std::to_string(o) + " (" + std::to_string(occupied_) + " of " +
                            std::to_string(capacity_bytes_locked_()) + " bytes occupied)");
    }
  s.occupied = true;
  occupied_ += s.num_blocks * block_bytes_;
  peak_occupied_ = std::max(peak_occupied_, occupied_);
  std::byte* p = chunks_[s.chunk].backing.data() + s.first_block * block_bytes_;
  return Allocation(shared_from_this(), p, s.bytes, s.num_blocks * block_bytes_, MemTier::Slow, slot);
}

void PinnedPool::release(std::uint64_t id) {
  std::lock_guard<std::mutex> lk(mu_);
  if (id >= slots_.size() || !slots_[id].occupied)
    throw_argument("PinnedPool::release: slot " + std::to_string(id) + " is not occupied");
  slots_[id].occupied = false;
  occupied_ -= slots_[id].num_blocks * block_bytes_;
}

std::size_t PinnedPool::capacity_bytes_locked_() const {
  std::size_t total = 0;
  for (const auto& c : chunks_) total += c.blocks * block_bytes_;
  return total;
}

std::size_t PinnedPool::capacity_bytes() const {
  std::lock_guard<std::mutex> lk(mu_);
  return capacity_bytes_locked_();
}

std::size_t PinnedPool::assigned_bytes() const {
  std::lock_guard<std::mutex> lk(mu_);
  std::size_t total = 0;
  for (const auto& s : slots_)
    if (s.assigned) total += s.num_blocks * block_bytes_;
  return total;
}

std::size_t PinnedPool::occupied_bytes() const {
  std::lock_guard<std::mutex> lk(mu_);
  return occupied_;
}

std::size_t PinnedPool::peak_occupied_bytes() const {
  std::lock_guard<std::mutex> lk(mu_);
  return peak_occupied_;
}

std::size_t PinnedPool::slot_bytes(SlotId slot) const {
  std::lock_guard<std::mutex> lk(mu_);
  return slots_.at(slot).bytes;
}

bool PinnedPool::occupied(SlotId slot) const {
  std::lock_guard<std::mutex> lk(mu_);
  return slots_.at(slot).occupied;
}

std::size_t PinnedPool::num_slots() const {
  std::lock_guard<std::mutex> lk(mu_);
  return slots_.size();
}

// ----------------------------------------------------------- TransferRequest

struct TransferRequest::Shared {
  mutable std::mutex mu;
  mutable std::condition_variable cv;
  TransferState state = TransferState::Queued;
  TransferDirection dir = TransferDirection::Load;
  const std::byte* src = nullptr;
  std::byte* dst = nullptr;
  std::size_t bytes = 0;
  double rate = 0;
  double measured = 0;
  std::string label;
  std::function<void()> on_done;
};

TransferState TransferRequest::state() const {
  if (!s_) return TransferState::Done;
  std::lock_guard<std::mutex> lk(s_->mu);
  return s_->state;
}

void TransferRequest::wait() const {
  if (!s_) return;
  std::unique_lock<std::mutex> lk(s_->mu);
  s_->cv.wait(lk, [&] { return s_->state == TransferState::Done; });
}

std::size_t TransferRequest::bytes() const { return s_ ? s_->bytes : 0; }
TransferDirection TransferRequest::direction() const { return s_ ? s_->dir : TransferDirection::Load; }

double TransferRequest::simulated_seconds() const {
  if (!s_ || s_->rate <= 0) return 0;
  return static_cast<double>(s_->bytes) / s_->rate;
}

double TransferRequest::measured_seconds() const {
  if (!s_) return 0;
  std::lock_guard<std::mutex> lk(s_->mu);
  return s_->measured;
}

const std::string& TransferRequest::label() const {
  static const std::string empty;
  return s_ ? s_->label : empty;
}

// ------------------------------------------------------------ TransferEngine

TransferEngine::TransferEngine(Trace* trace) : trace_(trace) {
  load_.worker = std::thread([this] { worker_loop(load_, TransferDirection::Load); });
  offload_.worker = std::thread([this] { worker_loop(offload_, TransferDirection::Offload); });
}

TransferEngine::~TransferEngine() { shutdown(); }

void TransferEngine::shutdown() {
  if (stop_.exchange(true)) return;
  for (Queue* q : {&load_, &offload_}) {
    {
      std::lock_guard<std::mutex> lk(q->mu);
    }
    q->cv.notify_all();
  }
  for (Queue* q : {&load_, &offload_})
    if (q->worker.joinable()) q->worker.join();
}

bool TransferEngine::running() const { return !stop_.load(); }

TransferRequest TransferEngine::submit(TransferDirection dir, const std::byte* src, std::byte* dst,
                                       std::size_t bytes, double rate, std::string label,
                                       std::function<void()> on_done) {
  if (stop_.load()) throw Error("TransferEngine: engine shut down");
  if (src == dst) throw_argument("TransferEngine: source and destination are the same buffer");
  auto s = std::make_shared<TransferRequest::Shared>();
  s->dir = dir;
  s->src = src;
  s->dst = dst;
  s->bytes = bytes;
  s->rate = rate;
  s->label = std::move(label);
  s->on_done = std::move(on_done);
  Queue& q = dir == TransferDirection::Load ? load_ : offload_;
  if (trace_) trace_->record(dir == TransferDirection::Load ? "load" : "offload", "issue", s->label, bytes);
  {
    std::lock_guard<std::mutex> lk(q.mu);
    q.items.push_back(s);
  }
  q.cv.notify_one();
  return TransferRequest(s);
}

void TransferEngine::worker_loop(Queue& q, TransferDirection dir) {
  set_current_role(dir == TransferDirection::Load ? WorkerRole::Load : WorkerRole::Offload);
  const char* stream = dir == TransferDirection::Load ? "load" : "offload";
  for (;;) {
    std::shared_ptr<TransferRequest::Shared> s;
    {
      std::unique_lock<std::mutex> lk(q.mu);
      q.cv.wait(lk, [&] { return stop_.load() || !q.items.empty(); });
      if (q.items.empty()) {
        if (stop_.load()) return;
        continue;
      }
      s = q.items.front();
      q.items.pop_front();
      q.busy = true;
    }
    {
      std::lock_guard<std::mutex> lk(s->mu);
      s->state = TransferState::InFlight;
    }
    const auto t0 = std::chrono::steady_clock::now();
    if (trace_) trace_->record(stream, "begin", s->label, s->bytes);
    if (s->bytes) std::memcpy(s->dst, s->src, s->bytes);
    if (s->rate > 0) {
      const auto target = t0 + std::chrono::duration<double>(static_cast<double>(s->bytes) / s->rate);
      std::this_thread::sleep_until(target);
    }
    bytes_moved_ += s->bytes;
    if (trace_) trace_->record(stream, "end", s->label, s->bytes);
    {
      std::function<void()> fn = std::move(s->on_done);
      s->on_done = nullptr;
      if (fn) fn();
    }
    const double measured = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    {
      std::lock_guard<std::mutex> lk(s->mu);
      s->measured = measured;
      s->state = TransferState::Done;
    }
    s->cv.notify_all();
    {
      std::lock_guard<std::mutex> lk(q.mu);
      q.busy = false;
    }
    q.idle_cv.notify_all();
  }
}

void TransferEngine::drain(TransferDirection dir) {
  Queue& q = dir == TransferDirection::Load ? load_ : offload_;
  std::unique_lock<std::mutex> lk(q.mu);
  q.idle_cv.wait(lk, [&] { return q.items.empty() && !q.busy; });
}

void TransferEngine::drain() {
  drain(TransferDirection::Load);
  drain(TransferDirection::Offload);
}

bool TransferEngine::bind(const std::vector<int>& load_cores, const std::vector<int>& offload_cores) {
  bool ok = true;
  if (!load_cores.empty()) ok &= pin_thread(load_.worker, load_cores);
  if (!offload_cores.empty()) ok &= pin_thread(offload_.worker, offload_cores);
  return ok;
}

// ------------------------------------------------------------------- Storage

Storage::Storage(Allocation alloc) : alloc_(std::move(alloc)) {}

// In-flight moves hold a reference to their storage, so destruction never
// races a copy.
Storage::~Storage() = default;

std::byte* Storage::data() {
  std::lock_guard<std::mutex> lk(mu_);
  if (in_flight_) {
    ++g_inflight_reads;
    if (g_strict_barriers.load()) throw std::logic_error("read of a tensor whose move is in flight");
  }
  return alloc_.data();
}

const std::byte* Storage::data() const { return const_cast<Storage*>(this)->data(); }

std::byte* Storage::raw_data_unchecked() const {
  std::lock_guard<std::mutex> lk(mu_);
  return alloc_.data();
}

std::size_t Storage::bytes() const {
  std::lock_guard<std::mutex> lk(mu_);
  return alloc_.bytes();
}

MemTier Storage::tier() const {
  std::lock_guard<std::mutex> lk(mu_);
  return alloc_.tier();
}

Residency Storage::residency() const {
  std::lock_guard<std::mutex> lk(mu_);
  if (in_flight_) return Residency::InFlight;
  return alloc_.tier() == MemTier::Fast ? Residency::Fast : Residency::Slow;
}

TransferRequest Storage::pending() const {
  std::lock_guard<std::mutex> lk(mu_);
  return pending_;
}

void Storage::wait_resident() const {
  TransferRequest p = pending();
  if (p.valid()) p.wait();
}

void Storage::begin_move() {
  std::lock_guard<std::mutex> lk(mu_);
  in_flight_ = true;
}

void Storage::attach_pending(TransferRequest req) {
  std::lock_guard<std::mutex> lk(mu_);
  if (in_flight_) pending_ = std::move(req);
}

void Storage::finish_move(Allocation dst) {
  Allocation old;
  {
    std::lock_guard<std::mutex> lk(mu_);
    old = std::move(alloc_);
    alloc_ = std::move(dst);
    in_flight_ = false;
    pending_ = TransferRequest();
  }
  // `old` is released here, outside the lock.
}

namespace instrument {
std::size_t inflight_reads() { return g_inflight_reads.load(); }
void reset_inflight_reads() { g_inflight_reads = 0; }
void set_strict_barriers(bool strict) { g_strict_barriers = strict; }
void set_debug_checks(bool on) { g_debug_checks = on; }
bool debug_checks() { return g_debug_checks.load(std::memory_order_relaxed); }
}  // namespace instrument

// -------------------------------------------------------------- MemorySystem

MemorySystem::MemorySystem(const MemoryConfig& cfg, Trace* trace) : cfg_(cfg), trace_(trace) {
  fast_ = Arena::create({MemTier::Fast, cfg.fast_capacity_bytes, cfg.alignment_bytes, 0});
  slow_ = Arena::create({MemTier::Slow, cfg.slow_capacity_bytes, cfg.alignment_bytes, 0});
  engine_ = std::make_unique<TransferEngine>(trace);
  set_throttle(cfg.throttle, cfg.base_bytes_per_sec);
}

MemorySystem::~MemorySystem() {
  if (t_memory == this) t_memory = nullptr;
  engine_->shutdown();
}

void MemorySystem::set_throttle(ThrottlePreset preset, double base_bytes_per_sec) {
  cfg_.throttle = preset;
  cfg_.base_bytes_per_sec = base_bytes_per_sec;
  fast_->set_throttle(base_bytes_per_sec > 0 ? base_bytes_per_sec * throttle_factor(preset) : 0);
}

double MemorySystem::transfer_rate(MemTier src, MemTier dst) const {
  if (src == MemTier::Fast || dst == MemTier::Fast) return fast_->throttle();
  return 0;
}

Allocation MemorySystem::allocate(std::size_t bytes, MemTier tier) { return arena(tier).allocate(bytes); }

Allocation MemorySystem::allocate(std::size_t bytes) { return allocate(bytes, default_tier()); }

TransferRequest MemorySystem::transfer_async(const Allocation& src, Allocation& dst, std::string label) {
  if (!src || !dst) throw_argument("transfer_async: invalid allocation");
  if (src.bytes() != dst.bytes())
    throw_argument("transfer_async: size mismatch (" + std::to_string(src.bytes()) + " vs " +
                   std::to_string(dst.bytes()) + ")");
  const auto dir = dst.tier() == MemTier::Fast ? TransferDirection::Load : TransferDirection::Offload;
  return engine_->submit(dir, src.data(), dst.data(), src.bytes(), transfer_rate(src.tier(), dst.tier()),
                         std::move(label));
}

TransferRequest MemorySystem::migrate_async(const std::shared_ptr<Storage>& s, Allocation dst,
                                            std::string label) {
  if (s->residency() == Residency::InFlight) throw_argument("migrate_async: storage already in flight");
  if (dst.bytes() != s->bytes()) throw_argument("migrate_async: size mismatch");
  const MemTier src_tier = s->tier();
  const MemTier dst_tier = dst.tier();
  const auto dir = dst_tier == MemTier::Fast ? TransferDirection::Load : TransferDirection::Offload;
  const std::byte* src = s->raw_data_unchecked();
  std::byte* dptr = dst.data();
  const std::size_t bytes = dst.bytes();
  auto holder = std::make_shared<Allocation>(std::move(dst));
  std::shared_ptr<Storage> keep = s;
  s->begin_move();
  TransferRequest req = engine_->submit(dir, src, dptr, bytes, transfer_rate(src_tier, dst_tier),
                                        std::move(label),
                                        [keep, holder] { keep->finish_move(std::move(*holder)); });
  s->attach_pending(req);
  return req;
}

MemorySystem& MemorySystem::global() {
  static MemorySystem* g = [] {
    MemoryConfig cfg;
    cfg.fast_capacity_bytes = kUnbounded;
    return new MemorySystem(cfg);
  }();
  return *g;
}

MemorySystem& MemorySystem::current() { return t_memory ? *t_memory : global(); }

MemTier set_default_tier(MemTier tier) {
  MemTier prev = t_default_tier;
  t_default_tier = tier;
  return prev;
}

MemTier default_tier() { return t_default_tier; }

MemoryScope::MemoryScope(MemorySystem& ms) : prev_(t_memory) { t_memory = &ms; }
MemoryScope::~MemoryScope() { t_memory = prev_; }

namespace detail {
MemorySystem* current_memory_raw() { return t_memory; }
void set_current_memory_raw(MemorySystem* ms) { t_memory = ms; }
}  // namespace detail

}  // namespace dithc
