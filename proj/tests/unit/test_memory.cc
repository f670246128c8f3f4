#include <doctest.h>

#include <chrono>
#include <cstring>
#include <random>
#include <sstream>
#include <thread>

#include "dithc/memory.h"
#include "dithc/trace.h"

using namespace dithc;

namespace {
std::shared_ptr<Arena> small_arena(std::size_t cap, std::size_t align = 64) {
  ArenaConfig c;
  c.tier = MemTier::Fast;
  c.capacity_bytes = cap;
  c.alignment_bytes = align;
  return Arena::create(c);
}
}  // namespace

TEST_SUITE("memory") {
  TEST_CASE("small allocation fits and is accounted") {
    auto a = small_arena(1024);
    auto x = a->allocate(64);
    CHECK(x.bytes() == 64);
    CHECK(a->used_bytes() >= 64);
    CHECK(a->conservation_holds());
  }

  TEST_CASE("over-capacity allocation raises OutOfTier and never spills") {
    auto a = small_arena(1024);
    CHECK_THROWS_AS(a->allocate(1025), OutOfTier);
    CHECK(a->used_bytes() == 0);
    try {
      a->allocate(4096);
    } catch (const OutOfTier& e) {
      CHECK(e.tier() == MemTier::Fast);
      CHECK(e.requested() == 4096);
      CHECK(e.capacity() == 1024);
    }
  }

  TEST_CASE("alloc/free/alloc of equal sizes returns used_bytes to prior value") {
    auto a = small_arena(1 << 20);
    auto keep = a->allocate(300);
    const auto before = a->used_bytes();
    {
      auto t = a->allocate(1000);
      CHECK(a->used_bytes() > before);
    }
    CHECK(a->used_bytes() == before);
    auto t2 = a->allocate(1000);
    auto t3 = std::move(t2);
    t3.reset();
    CHECK(a->used_bytes() == before);
  }

  TEST_CASE("start addresses honour the alignment") {
    auto a = small_arena(kUnbounded, kHugePageBytes);
    std::vector<Allocation> v;
    for (int i = 0; i < 5; ++i) v.push_back(a->allocate(100 + i * 17));
    for (auto& x : v) CHECK(reinterpret_cast<std::uintptr_t>(x.data()) % kHugePageBytes == 0);
  }

  TEST_CASE("unknown allocation id is rejected") {
    auto a = small_arena(1024);
    CHECK_THROWS_AS(a->release(424242), ArgumentError);
  }

  TEST_CASE("peak tracking is monotone and resettable") {
    auto a = small_arena(1 << 20);
    {
      auto x = a->allocate(4096);
      auto y = a->allocate(4096);
    }
    CHECK(a->peak_bytes() >= 8192);
    CHECK(a->used_bytes() == 0);
    a->reset_peak();
    CHECK(a->peak_bytes() == 0);
  }

  TEST_CASE("pressure handler runs before OutOfTier and the retry can succeed") {
    auto a = small_arena(1024);
    Allocation hog = a->allocate(1024);
    int calls = 0;
    a->set_pressure_handler([&] {
      ++calls;
      hog.reset();
    });
    auto x = a->allocate(512);
    CHECK(calls == 1);
    CHECK(x.bytes() == 512);
  }

  TEST_CASE("pinned pool reuses blocks and never returns them to the arena") {
    ArenaConfig c;
    auto slow = Arena::create(c);
    auto pool = PinnedPool::create(slow, 4096);
    CHECK_THROWS_AS(pool->assign(100), PoolExhausted);
    pool->reserve(3 * 4096);
    auto s1 = pool->assign(5000);
    auto s2 = pool->assign(100);
    const auto used = slow->used_bytes();
    CHECK(pool->capacity_bytes() >= 3 * 4096);
    std::byte* first = nullptr;
    {
      auto a = pool->acquire(s1);
      first = a.data();
      CHECK(pool->occupied(s1));
    }
    CHECK_FALSE(pool->occupied(s1));
    auto again = pool->acquire(s1);
    CHECK(again.data() == first);
    CHECK(slow->used_bytes() == used);
    CHECK_THROWS(pool->acquire(s1));
    CHECK_THROWS_AS(pool->assign(4096), PoolExhausted);
    again.reset();
    pool->unassign(s1);
    auto s3 = pool->assign(8192);
    CHECK(pool->slot_bytes(s3) == 8192);
    (void)s2;
  }

  TEST_CASE("transfer copies a 1 MiB 0xAB pattern") {
    TransferEngine eng;
    std::vector<std::byte> src(1 << 20, std::byte{0xAB}), dst(1 << 20);
    auto r = eng.submit(TransferDirection::Load, src.data(), dst.data(), src.size(), 0, "pattern");
    r.wait();
    CHECK(r.done());
    CHECK(std::memcmp(src.data(), dst.data(), src.size()) == 0);
    r.wait();  // already done: returns immediately
  }

  TEST_CASE("queued transfers complete in FIFO order") {
    TransferEngine eng;
    std::vector<std::byte> buf(1 << 16), out(1 << 16);
    std::mutex mu;
    std::vector<int> order;
    std::vector<TransferRequest> reqs;
    for (int i = 0; i < 16; ++i)
      reqs.push_back(eng.submit(TransferDirection::Offload, buf.data(), out.data(), buf.size(), 0, "t",
                                [&, i] {
                                  std::lock_guard<std::mutex> lk(mu);
                                  order.push_back(i);
                                }));
    for (auto& r : reqs) r.wait();
    for (int i = 0; i < 16; ++i) CHECK(order[i] == i);
  }

  TEST_CASE("throttled transfer duration follows bytes / rate") {
    TransferEngine eng;
    const std::size_t n = std::size_t{100} << 20;
    std::vector<std::byte> src(n), dst(n);
    const double rate = double(std::size_t{100} << 20);
    auto r = eng.submit(TransferDirection::Load, src.data(), dst.data(), n, rate, "big");
    r.wait();
    CHECK(r.simulated_seconds() == doctest::Approx(1.0));
    CHECK(r.measured_seconds() >= 0.95);
    CHECK(r.measured_seconds() < 1.5);
  }

  TEST_CASE("transfer fidelity over 10^4 randomized trials") {
    TransferEngine eng;
    std::mt19937_64 rng(7);
    int ok = 0;
    for (int t = 0; t < 10000; ++t) {
      const std::size_t n = 1 + rng() % 4096;
      std::vector<std::byte> src(n), dst(n);
      for (auto& b : src) b = std::byte(rng() & 0xff);
      auto r = eng.submit(t % 2 ? TransferDirection::Load : TransferDirection::Offload, src.data(), dst.data(),
                          n, 0, "trial");
      r.wait();
      ok += std::memcmp(src.data(), dst.data(), n) == 0;
    }
    CHECK(ok == 10000);
  }

  TEST_CASE("read after wait sees the transferred bytes (stress)") {
    TransferEngine eng;
    std::vector<std::uint64_t> src(512), dst(512);
    for (int it = 0; it < 1000; ++it) {
      for (auto& v : src) v = static_cast<std::uint64_t>(it) * 2654435761u;
      auto r = eng.submit(TransferDirection::Load, reinterpret_cast<std::byte*>(src.data()),
                          reinterpret_cast<std::byte*>(dst.data()), src.size() * 8, 0, "s");
      r.wait();
      REQUIRE(dst[511] == src[511]);
      REQUIRE(dst[0] == src[0]);
    }
  }

  TEST_CASE("many interleaved requests all finish") {
    TransferEngine eng;
    std::vector<std::vector<std::byte>> bufs(64, std::vector<std::byte>(1024, std::byte{1}));
    std::vector<std::vector<std::byte>> outs(64, std::vector<std::byte>(1024));
    std::vector<TransferRequest> reqs;
    for (int i = 0; i < 64; ++i)
      reqs.push_back(eng.submit(i % 3 ? TransferDirection::Load : TransferDirection::Offload, bufs[i].data(),
                                outs[i].data(), 1024, 0, "x"));
    for (int i = 63; i >= 0; --i) reqs[i].wait();
    for (auto& r : reqs) CHECK(r.state() == TransferState::Done);
  }

  TEST_CASE("engine rejects work after shutdown") {
    TransferEngine eng;
    eng.shutdown();
    std::byte a{}, b{};
    CHECK_THROWS(eng.submit(TransferDirection::Load, &a, &b, 1, 0, "late"));
  }

  TEST_CASE("default tier is per flow and scoped") {
    MemorySystem ms;
    MemoryScope scope(ms);
    CHECK(default_tier() == MemTier::Slow);
    {
      TierScope fast(MemTier::Fast);
      auto a = ms.allocate(128);
      CHECK(a.tier() == MemTier::Fast);
      {
        TierScope slow(MemTier::Slow);
        CHECK(ms.allocate(64).tier() == MemTier::Slow);
      }
      CHECK(default_tier() == MemTier::Fast);
      std::thread([&] { CHECK(default_tier() == MemTier::Slow); }).join();
    }
    CHECK(default_tier() == MemTier::Slow);
  }

  TEST_CASE("migrate_async moves a storage between tiers") {
    MemorySystem ms;
    auto st = std::make_shared<Storage>(ms.allocate(4096, MemTier::Fast));
    std::memset(st->data(), 0x5c, 4096);
    const auto fast_used = ms.fast().used_bytes();
    CHECK(fast_used > 0);
    auto req = ms.migrate_async(st, ms.allocate(4096, MemTier::Slow), "act");
    req.wait();
    st->wait_resident();
    CHECK(st->tier() == MemTier::Slow);
    CHECK(st->residency() == Residency::Slow);
    CHECK(ms.fast().used_bytes() == 0);
    CHECK(std::to_integer<int>(st->data()[4095]) == 0x5c);
  }

  TEST_CASE("reading an in-flight storage is counted") {
    MemoryConfig cfg;
    cfg.base_bytes_per_sec = 1e6;  // slow enough to observe InFlight
    MemorySystem ms(cfg);
    auto st = std::make_shared<Storage>(ms.allocate(20000, MemTier::Slow));
    instrument::reset_inflight_reads();
    auto req = ms.migrate_async(st, ms.allocate(20000, MemTier::Fast), "w");
    (void)st->data();
    CHECK(instrument::inflight_reads() == 1);
    req.wait();
    st->wait_resident();
    (void)st->data();
    CHECK(instrument::inflight_reads() == 1);
    instrument::reset_inflight_reads();
  }

  TEST_CASE("throttle presets map to the documented factors") {
    CHECK(throttle_factor(ThrottlePreset::Off) == 1.0);
    CHECK(throttle_factor(ThrottlePreset::SameDieRemote) == 0.5);
    CHECK(throttle_factor(ThrottlePreset::CrossDie) == 0.37);
    CHECK(throttle_factor(ThrottlePreset::CrossCpu) == 0.10);
    CHECK(parse_throttle_preset("cross_die") == ThrottlePreset::CrossDie);
    CHECK_THROWS(parse_throttle_preset("warp"));
  }

  TEST_CASE("trace records and round-trips JSON Lines") {
    Trace tr;
    tr.set_enabled(true);
    tr.record("load", "issue", "w0", 10);
    tr.record("load", "begin", "w0", 10);
    tr.record("load", "end", "w0", 10);
    std::stringstream ss;
    tr.write_jsonl(ss);
    auto ev = Trace::read_jsonl(ss);
    REQUIRE(ev.size() == 3);
    CHECK(ev[1].event == "begin");
    auto iv = tr.intervals("load");
    REQUIRE(iv.size() == 1);
    CHECK(iv[0].end_us >= iv[0].begin_us);
    CHECK(iv[0].issue_us >= 0);
  }
}
