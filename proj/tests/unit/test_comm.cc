#include <doctest.h>

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <thread>

#include "dithc/comm.h"
#include "dithc/nn.h"
#include "dithc/parallel.h"
#include "dithc/trainer.h"
#include "support/oracles.h"

using namespace dithc;
using namespace dithc::testing;
using namespace dithc::comm;

namespace {

// Runs fn(rank, comm) on R threads over one in-process hub; rethrows the
// first failure.
void run_ranks(int R, const std::function<void(int, Communicator&)>& fn, HubOptions opt = {}) {
  auto hub = InProcHub::create(R, opt);
  std::vector<std::unique_ptr<Communicator>> comms;
  for (int r = 0; r < R; ++r) comms.push_back(std::make_unique<Communicator>(hub->endpoint(r)));
  std::vector<std::exception_ptr> errs(static_cast<std::size_t>(R));
  std::vector<std::thread> th;
  for (int r = 0; r < R; ++r)
    th.emplace_back([&, r] {
      try {
        fn(r, *comms[static_cast<std::size_t>(r)]);
      } catch (...) {
        errs[static_cast<std::size_t>(r)] = std::current_exception();
      }
    });
  for (auto& t : th) t.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

std::vector<std::string> g_warnings;
void capture(const std::string& w) { g_warnings.push_back(w); }

int test_port_base() { return 20000 + static_cast<int>(::getpid() % 20000); }

}  // namespace

TEST_SUITE("comm") {
  TEST_CASE("frame header round trip and rejection") {
    FrameHeader h;
    h.type = MsgType::Barrier;
    h.id = 0x0102030405060708ULL;
    h.offset = 77;
    h.len = 0;
    auto b = encode_header(h);
    // Little-endian magic on the wire.
    CHECK(b[0] == 0x31);
    CHECK(b[3] == 0x44);
    CHECK(b[8] == 0x08);
    FrameHeader d = decode_header(b.data());
    CHECK(d.type == MsgType::Barrier);
    CHECK(d.id == h.id);
    CHECK(d.offset == 77);
    CHECK(d.len == 0);
    b[0] ^= 1;
    CHECK_THROWS_AS(decode_header(b.data()), TransportError);
    b[0] ^= 1;
    b[4] = 9;
    CHECK_THROWS_AS(decode_header(b.data()), TransportError);
  }

  TEST_CASE("in-process frames keep payloads byte-exact, including empty and 64 MiB") {
    auto hub = InProcHub::create(2);
    auto a = hub->endpoint(0), b = hub->endpoint(1);
    for (std::size_t n : {std::size_t{0}, std::size_t{13}, std::size_t{64} << 20}) {
      std::vector<std::uint8_t> p(n);
      for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<std::uint8_t>(i * 131 + 7);
      FrameHeader h;
      h.id = n;
      h.len = n;
      a->send(1, h, p.data());
      Frame f = b->recv(0);
      CHECK(f.header.id == n);
      CHECK(f.header.len == n);
      CHECK(f.payload == p);
    }
  }

  TEST_CASE("tcp transport: mesh, byte-exact frames, disconnect") {
    TcpOptions o;
    o.base_port = test_port_base();
    o.recv_timeout_s = 20;
    std::vector<std::uint8_t> big(std::size_t{64} << 20);
    for (std::size_t i = 0; i < big.size(); ++i) big[i] = static_cast<std::uint8_t>(i ^ (i >> 9));
    std::unique_ptr<Transport> t1;
    std::thread peer([&] { t1 = make_tcp_transport(1, 2, o); });
    auto t0 = make_tcp_transport(0, 2, o);
    peer.join();
    REQUIRE(t1);
    for (std::size_t n : {std::size_t{0}, std::size_t{5}, big.size()}) {
      FrameHeader h;
      h.id = 3;
      h.offset = 11;
      h.len = n;
      t0->send(1, h, big.data());
      Frame f = t1->recv(0);
      CHECK(f.header.offset == 11);
      REQUIRE(f.payload.size() == n);
      CHECK(std::equal(f.payload.begin(), f.payload.end(), big.begin()));
    }
    // Ring allreduce over sockets.
    Communicator c0(std::move(t0)), c1(std::move(t1));
    Tensor a = Tensor::from_vector<float>({5}, {1, 2, 3, 4, 5});
    Tensor b = Tensor::from_vector<float>({5}, {10, 20, 30, 40, 50});
    auto h0 = c0.allreduce_async(a);
    auto h1 = c1.allreduce_async(b);
    h0.wait();
    h1.wait();
    CHECK(a.to_vector<float>() == std::vector<float>{11, 22, 33, 44, 55});
    CHECK(bitwise_equal(a, b));
    c1.shutdown();
    Tensor z = Tensor::zeros({3}, Dtype::F32);
    CHECK_THROWS_AS(c0.allreduce(z), TransportError);
  }

  TEST_CASE("allreduce matches the serial sum for R in {1,2,4,8} and sizes {1,7,4096,2^20}") {
    for (int R : {1, 2, 4, 8}) {
      for (std::int64_t n : {std::int64_t{1}, std::int64_t{7}, std::int64_t{4096}, std::int64_t{1} << 20}) {
        std::vector<Tensor> in, buf(static_cast<std::size_t>(R));
        for (int r = 0; r < R; ++r) {
          Rng rng(static_cast<std::uint64_t>(1000 * R + r) + static_cast<std::uint64_t>(n));
          in.push_back(random_tensor({n}, Dtype::F32, rng, -2, 2));
          buf[static_cast<std::size_t>(r)] = in.back().clone();
        }
        run_ranks(R, [&](int r, Communicator& c) { c.allreduce(buf[static_cast<std::size_t>(r)]); });
        double worst = 0;
        for (std::int64_t i = 0; i < n; ++i) {
          float serial = 0;
          double mag = 0;
          for (int r = 0; r < R; ++r) {
            const float v = in[static_cast<std::size_t>(r)].data<float>()[i];
            serial += v;
            mag += std::fabs(v);
          }
          const double got = buf[0].data<float>()[i];
          worst = std::max(worst, std::fabs(got - serial) / std::max(mag, 1e-30));
        }
        CHECK_MESSAGE(worst <= 1e-6, "R=" << R << " n=" << n << " rel=" << worst);
        for (int r = 1; r < R; ++r) CHECK(bitwise_equal(buf[0], buf[static_cast<std::size_t>(r)]));
        if (R == 1) CHECK(bitwise_equal(buf[0], in[0]));
      }
    }
  }

  TEST_CASE("identical inputs reduce to R*v; F64 supported") {
    const int R = 4;
    std::vector<Tensor> buf;
    for (int r = 0; r < R; ++r) buf.push_back(Tensor::from_vector<double>({3}, {1.5, -2, 7}));
    run_ranks(R, [&](int r, Communicator& c) { c.allreduce(buf[static_cast<std::size_t>(r)]); });
    for (auto& b : buf) CHECK(b.to_vector<double>() == std::vector<double>{6, -8, 28});
  }

  TEST_CASE("test() is non-blocking and Pending before peers progress; wait is idempotent") {
    auto hub = InProcHub::create(2);
    Communicator c0(hub->endpoint(0)), c1(hub->endpoint(1));
    Tensor a = Tensor::full({4}, Dtype::F32, 1), b = Tensor::full({4}, Dtype::F32, 2);
    auto h0 = c0.allreduce_async(a);
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    CHECK_FALSE(h0.test());
    CHECK(h0.state() == HandleState::Pending);
    auto h1 = c1.allreduce_async(b);
    h0.wait();
    h0.wait();
    h1.wait();
    CHECK(h0.test());
    CHECK(a.to_vector<float>() == std::vector<float>(4, 3.0f));
  }

  TEST_CASE("completion follows issue order over 1000 randomized-delay trials") {
    HubOptions o;
    o.max_delay_us = 30;
    o.seed = 5;
    const int R = 3;
    auto hub = InProcHub::create(R, o);
    std::vector<std::unique_ptr<Communicator>> comms;
    for (int r = 0; r < R; ++r) comms.push_back(std::make_unique<Communicator>(hub->endpoint(r)));
    std::atomic<int> violations{0};
    std::atomic<long> observed{0};
    std::vector<std::thread> th;
    for (int r = 0; r < R; ++r)
      th.emplace_back([&, r] {
        Rng rng(static_cast<std::uint64_t>(77));  // same sizes on every rank
        for (int trial = 0; trial < 1000; ++trial) {
          const int k = 2 + static_cast<int>(rng() % 3);
          std::vector<Tensor> bufs;
          std::vector<CollectiveHandle> hs;
          for (int j = 0; j < k; ++j) {
            bufs.push_back(Tensor::full({1 + static_cast<std::int64_t>(rng() % 300)}, Dtype::F32, 1));
            hs.push_back(comms[static_cast<std::size_t>(r)]->allreduce_async(bufs.back()));
          }
          // Later-issued first: once it reads Done, everything before it
          // must already be Done.
          for (;;) {
            bool all = true;
            for (int j = k - 1; j >= 0; --j) {
              if (hs[static_cast<std::size_t>(j)].test()) {
                for (int i = 0; i < j; ++i)
                  if (!hs[static_cast<std::size_t>(i)].test()) ++violations;
                ++observed;
              } else {
                all = false;
              }
            }
            if (all) break;
          }
          for (auto& h : hs) h.wait();
        }
      });
    for (auto& t : th) t.join();
    CHECK(violations.load() == 0);
    CHECK(observed.load() > 0);
  }

  TEST_CASE("size mismatch fails on every rank and the communicator stays usable") {
    std::atomic<int> errors{0};
    run_ranks(3, [&](int r, Communicator& c) {
      Tensor t = Tensor::full({r == 1 ? 5 : 4}, Dtype::F32, 1);
      try {
        c.allreduce(t);
      } catch (const CollectiveError&) {
        ++errors;
      }
      Tensor u = Tensor::full({2}, Dtype::F32, 1);
      c.allreduce(u);
      CHECK(u.to_vector<float>() == std::vector<float>{3, 3});
      c.barrier();
    });
    CHECK(errors.load() == 3);
  }

  TEST_CASE("disconnected peer raises TransportError; abort raises CollectiveError") {
    {
      HubOptions o;
      o.recv_timeout_s = 5;
      auto hub = InProcHub::create(2, o);
      Communicator c0(hub->endpoint(0));
      hub->disconnect(1);
      Tensor t = Tensor::full({3}, Dtype::F32, 1);
      CHECK_THROWS_AS(c0.allreduce(t), TransportError);
      // The ring is broken for good.
      CHECK_THROWS_AS(c0.allreduce(t), TransportError);
    }
    {
      auto hub = InProcHub::create(2);
      Communicator c0(hub->endpoint(0)), c1(hub->endpoint(1));
      c1.abort("rank 1 ran out of Fast memory");
      Tensor t = Tensor::full({3}, Dtype::F32, 1);
      CHECK_THROWS_AS(c0.allreduce(t), CollectiveError);
    }
  }
}

TEST_SUITE("parallel") {
  TEST_CASE("CFTP gemm is bitwise invariant over C and sends no messages") {
    Rng rng(31);
    comm::instrument::reset_messages();
    for (int trial = 0; trial < 60; ++trial) {
      const std::int64_t M = 1 + static_cast<std::int64_t>(rng() % 70), K = 1 + static_cast<std::int64_t>(rng() % 70),
                         N = 1 + static_cast<std::int64_t>(rng() % 70);
      Dtype dt = trial % 2 ? Dtype::F64 : Dtype::F32;
      Tensor A = random_tensor({M, K}, dt, rng), B = random_tensor({K, N}, dt, rng), bias = random_tensor({N}, dt, rng);
      set_warning_sink(capture);
      auto r1 = cftp_gemm(A, B, 1);
      auto rb1 = cftp_gemm_bias(A, B, bias, 1);
      for (int C : {2, 4}) {
        auto rc = cftp_gemm(A, B, C);
        CHECK(bitwise_equal(rc.out, r1.out));
        CHECK(bitwise_equal(cftp_gemm_bias(A, B, bias, C).out, rb1.out));
        CHECK(rc.groups_used == std::min<std::int64_t>(C, N));
      }
      set_warning_sink(nullptr);
      CHECK(bitwise_equal(r1.out, gemm_naive(A, B)));
    }
    CHECK(comm::instrument::messages_sent() == 0);
  }

  TEST_CASE("CFTP row-wise ops and degradation warning") {
    Rng rng(32);
    Tensor X = random_tensor({3, 16}, Dtype::F32, rng);
    auto ln = [](const Tensor& x) { return nn::layernorm_fwd(x, Tensor(), Tensor()).y; };
    auto r1 = cftp_rowwise(X, ln, 1);
    CHECK(bitwise_equal(r1.out, ln(X)));
    g_warnings.clear();
    set_warning_sink(capture);
    auto r4 = cftp_rowwise(X, ln, 4);
    set_warning_sink(nullptr);
    CHECK(r4.groups_used == 3);
    CHECK(g_warnings.size() == 1);
    CHECK(bitwise_equal(r4.out, r1.out));
    CHECK(bitwise_equal(cftp_rowwise(X, [](const Tensor& x) { return nn::gelu_fwd(x); }, 2).out, nn::gelu_fwd(X)));
    CHECK_THROWS_AS(cftp_gemm(X, X, 0), ArgumentError);
  }

  TEST_CASE("bind_workers rejects overlapping sets and degrades on bad cores") {
    WorkerPool pool(2, 1);
    CHECK_THROWS_AS(bind_workers({{0, 1}, {1}, {}}, &pool, nullptr, nullptr), ArgumentError);
    CHECK_THROWS_AS(bind_workers({{0}, {}, {2, 0}}, &pool, nullptr, nullptr), ArgumentError);
    g_warnings.clear();
    set_warning_sink(capture);
    const bool ok = bind_workers({{4000, 4001}, {}, {}}, &pool, nullptr, nullptr);
    set_warning_sink(nullptr);
    CHECK_FALSE(ok);
    CHECK(g_warnings.size() == 1);
    // Still computes after a failed bind.
    Rng rng(1);
    Tensor A = random_tensor({9, 9}, Dtype::F64, rng);
    PoolScope ps(pool);
    CHECK(bitwise_equal(matmul(A, A), gemm_naive(A, A)));
  }

  TEST_CASE("bucketing: thresholds, reverse order, partition") {
    auto hub = InProcHub::create(1);
    Communicator c(hub->endpoint(0));
    std::vector<std::unique_ptr<Parameter>> own;
    std::vector<Parameter*> ps;
    for (int i = 0; i < 5; ++i) {
      own.push_back(std::make_unique<Parameter>("p" + std::to_string(i), Tensor::zeros({10 + i}, Dtype::F32)));
      ps.push_back(own.back().get());
    }
    {
      GradReducer one(c, ps, kUnboundedBucket);
      REQUIRE(one.num_buckets() == 1);
      CHECK(one.bucket(0) == std::vector<std::size_t>{4, 3, 2, 1, 0});
      one.begin_step();
      for (int i = 4; i >= 0; --i) ps[static_cast<std::size_t>(i)]->accumulate_grad(Tensor::full({10 + i}, Dtype::F32, i));
      CHECK(one.issued_during_backward() == 1);
      one.finish();
      CHECK(one.collectives_issued() == 1);
      CHECK(ps[2]->grad().to_vector<float>() == std::vector<float>(12, 2.0f));
    }
    for (auto* p : ps) p->zero_grad();
    {
      GradReducer each(c, ps, 0);
      CHECK(each.num_buckets() == 5);
      each.begin_step();
      for (int i = 4; i >= 0; --i) ps[static_cast<std::size_t>(i)]->accumulate_grad(Tensor::full({10 + i}, Dtype::F32, 1));
      each.finish();
      CHECK(each.collectives_issued() == 5);
    }
    GradReducer mid(c, ps, 100);
    std::vector<int> seen(5, 0);
    for (std::size_t b = 0; b < mid.num_buckets(); ++b)
      for (std::size_t k : mid.bucket(b)) ++seen[k];
    CHECK(seen == std::vector<int>(5, 1));
    CHECK(mid.num_buckets() == 2);  // 14+13 floats = 108 B closes the first bucket
  }

  TEST_CASE("bucket composition divergence is a collective error") {
    std::atomic<int> errors{0};
    run_ranks(2, [&](int r, Communicator& c) {
      Parameter a("a", Tensor::zeros({3}, Dtype::F32)), b("b", Tensor::zeros({5}, Dtype::F32));
      GradReducer red(c, {&a, &b}, r == 0 ? 0 : kUnboundedBucket, false);
      red.begin_step();
      b.accumulate_grad(Tensor::full({5}, Dtype::F32, 1));
      a.accumulate_grad(Tensor::full({3}, Dtype::F32, 1));
      try {
        red.finish();
      } catch (const CollectiveError&) {
        ++errors;
      }
    });
    CHECK(errors.load() == 2);
  }
}

namespace {

train::TrainConfig small_cfg(std::int64_t batch, Dtype dt) {
  train::TrainConfig c;
  c.model = dit::DiTConfig::toy();
  c.model.H = c.model.W = 8;
  c.model.D = 32;
  c.model.L = 2;
  c.model.heads = 2;
  c.model.freq_dim = 32;
  c.dtype = dt;
  c.batch = batch;
  c.seed = 4;
  c.adam.lr = 1e-3;
  c.clusters = 2;
  c.bucket_bytes = 16 << 10;
  return c;
}

// Runs `steps` steps on R in-process ranks; returns rank 0's losses and
// its parameters' gradients after the last step.
std::pair<std::vector<double>, std::vector<Tensor>> run_dp(int R, train::TrainConfig cfg, int steps) {
  std::vector<double> losses;
  std::vector<Tensor> grads;
  if (R == 1) {
    train::Trainer t(cfg);
    for (int s = 0; s < steps; ++s) losses.push_back(t.step().loss);
    for (auto* p : t.model().parameters()) grads.push_back(p->grad().clone());
    return {losses, grads};
  }
  run_ranks(R, [&](int r, Communicator& c) {
    train::Trainer t(cfg, &c);
    std::vector<double> mine;
    for (int s = 0; s < steps; ++s) mine.push_back(t.step().loss);
    if (r == 0) {
      losses = mine;
      MemoryScope ms(t.memory());
      for (auto* p : t.model().parameters()) grads.push_back(p->grad().clone(MemTier::Slow));
    }
  });
  return {losses, grads};
}

double worst_rel(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  double w = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto x = a[i].to_doubles(), y = b[i].to_doubles();
    double scale = 0;
    for (double v : x) scale = std::max(scale, std::fabs(v));
    for (std::size_t k = 0; k < x.size(); ++k) w = std::max(w, std::fabs(x[k] - y[k]) / std::max(scale, 1e-30));
  }
  return w;
}

}  // namespace

TEST_SUITE("dp") {
  TEST_CASE("2 ranks x B equals 1 rank x 2B: losses and gradients") {
    for (Dtype dt : {Dtype::F32, Dtype::F64}) {
      auto one = run_dp(1, small_cfg(8, dt), 4);
      for (bool overlap : {true, false}) {
        auto cfg = small_cfg(4, dt);
        cfg.overlap = overlap;
        auto two = run_dp(2, cfg, 4);
        const double tol_loss = dt == Dtype::F32 ? 1e-4 : 1e-10;
        const double tol_grad = dt == Dtype::F32 ? 1e-5 : 1e-10;
        for (std::size_t s = 0; s < one.first.size(); ++s)
          CHECK(std::fabs(one.first[s] - two.first[s]) <= tol_loss * std::fabs(one.first[s]));
        const double g = worst_rel(one.second, two.second);
        MESSAGE(std::string(dtype_name(dt)) << " overlap=" << overlap << " grad rel " << g);
        CHECK(g <= tol_grad);
      }
    }
  }

  TEST_CASE("DP with AutoMem matches DP without, and workers stay in role") {
    auto cfg = small_cfg(4, Dtype::F32);
    auto plain = run_dp(2, cfg, 3);
    cfg.automem = true;
    dithc::instrument::reset_kernel_calls();
    auto am = run_dp(2, cfg, 3);
    CHECK(am.first == plain.first);
    CHECK(dithc::instrument::kernel_calls(WorkerRole::Comm) == 0);
    CHECK(dithc::instrument::kernel_calls(WorkerRole::Load) == 0);
    CHECK(dithc::instrument::kernel_calls(WorkerRole::Offload) == 0);
    CHECK(dithc::instrument::kernel_calls(WorkerRole::Compute) > 0);
  }

  TEST_CASE("overlapped reduce issues buckets during backward") {
    run_ranks(2, [&](int, Communicator& c) {
      auto cfg = small_cfg(2, Dtype::F32);
      cfg.trace = true;
      train::Trainer t(cfg, &c);
      t.step();
      REQUIRE(t.reducer());
      CHECK(t.reducer()->num_buckets() > 1);
      CHECK(t.reducer()->issued_during_backward() >= 1);
      auto ev = t.trace().events();
      bool comm_seen = false;
      for (auto& e : ev) comm_seen |= e.stream == "comm";
      CHECK(comm_seen);
    });
  }
}
