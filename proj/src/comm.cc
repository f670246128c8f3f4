#include "dithc/comm.h"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <random>

#include "dithc/threading.h"

namespace dithc::comm {

using Clock = std::chrono::steady_clock;

namespace {

std::atomic<std::size_t> g_messages{0};

void put_u32(std::uint8_t* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}
void put_u64(std::uint8_t* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}
std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}
std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

const char* type_name(MsgType t) {
  switch (t) {
    case MsgType::Data: return "DATA";
    case MsgType::Barrier: return "BARRIER";
    case MsgType::Error: return "ERROR";
  }
  return "?";
}

}  // namespace

std::array<std::uint8_t, kFrameHeaderBytes> encode_header(const FrameHeader& h) {
  std::array<std::uint8_t, kFrameHeaderBytes> b{};
  put_u32(b.data(), h.magic);
  put_u32(b.data() + 4, static_cast<std::uint32_t>(h.type));
  put_u64(b.data() + 8, h.id);
  put_u64(b.data() + 16, h.offset);
  put_u64(b.data() + 24, h.len);
  return b;
}

FrameHeader decode_header(const std::uint8_t* b) {
  FrameHeader h;
  h.magic = get_u32(b);
  if (h.magic != kFrameMagic) throw TransportError("frame: bad magic");
  std::uint32_t t = get_u32(b + 4);
  if (t > 2) throw TransportError("frame: unknown message type " + std::to_string(t));
  h.type = static_cast<MsgType>(t);
  h.id = get_u64(b + 8);
  h.offset = get_u64(b + 16);
  h.len = get_u64(b + 24);
  return h;
}

namespace instrument {
std::size_t messages_sent() { return g_messages.load(); }
void reset_messages() { g_messages.store(0); }
}  // namespace instrument

// ---------------------------------------------------------------- in-process

struct InProcHub::Channel {
  struct Item {
    Frame frame;
    Clock::time_point deliver_at;
  };
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Item> q;
  Clock::time_point last = Clock::time_point::min();
};

InProcHub::InProcHub(int size, HubOptions opt)
    : size_(size), opt_(opt), down_(static_cast<std::size_t>(size), false),
      rng_state_(opt.seed ^ 0x9e3779b97f4a7c15ULL) {
  if (size < 1) throw_argument("InProcHub: size must be >= 1");
  for (int i = 0; i < size * size; ++i) channels_.push_back(std::make_unique<Channel>());
}

std::shared_ptr<InProcHub> InProcHub::create(int size, HubOptions opt) {
  return std::shared_ptr<InProcHub>(new InProcHub(size, opt));
}

InProcHub::Channel& InProcHub::channel(int src, int dst) {
  return *channels_[static_cast<std::size_t>(src * size_ + dst)];
}

bool InProcHub::disconnected(int rank) const {
  std::lock_guard<std::mutex> lk(mu_);
  return down_[static_cast<std::size_t>(rank)];
}

void InProcHub::disconnect(int rank) {
  {
    std::lock_guard<std::mutex> lk(mu_);
    down_[static_cast<std::size_t>(rank)] = true;
  }
  for (auto& c : channels_) {
    std::lock_guard<std::mutex> lk(c->mu);
    c->cv.notify_all();
  }
}

double InProcHub::delay_us() {
  if (opt_.max_delay_us <= 0) return 0;
  std::lock_guard<std::mutex> lk(mu_);
  std::mt19937_64 g(rng_state_);
  rng_state_ = g();
  return std::uniform_real_distribution<double>(0, opt_.max_delay_us)(g);
}

namespace {

class InProcTransport : public Transport {
 public:
  InProcTransport(std::shared_ptr<InProcHub> hub, int rank) : hub_(std::move(hub)), rank_(rank) {}
  int rank() const override { return rank_; }
  int size() const override { return hub_->size(); }

  void send(int peer, const FrameHeader& h, const std::uint8_t* payload) override {
    check_peer(peer);
    if (hub_->disconnected(rank_) || hub_->disconnected(peer))
      throw TransportError("in-process send to rank " + std::to_string(peer) + ": peer disconnected");
    auto& ch = hub_->channel(rank_, peer);
    InProcHub::Channel::Item it;
    it.frame.header = h;
    it.frame.payload.assign(payload, payload + h.len);
    auto delay = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double, std::micro>(hub_->delay_us()));
    {
      std::lock_guard<std::mutex> lk(ch.mu);
      it.deliver_at = std::max(ch.last, Clock::now() + delay);
      ch.last = it.deliver_at;
      ch.q.push_back(std::move(it));
    }
    ch.cv.notify_all();
    ++g_messages;
  }

  Frame recv(int peer) override {
    check_peer(peer);
    auto& ch = hub_->channel(peer, rank_);
    auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                       std::chrono::duration<double>(hub_->options().recv_timeout_s));
    std::unique_lock<std::mutex> lk(ch.mu);
    // Frames already sent are delivered even if the sender has since left.
    for (;;) {
      auto now = Clock::now();
      if (!ch.q.empty()) {
        if (ch.q.front().deliver_at <= now) {
          Frame f = std::move(ch.q.front().frame);
          ch.q.pop_front();
          return f;
        }
        ch.cv.wait_until(lk, ch.q.front().deliver_at);
        continue;
      }
      if (hub_->disconnected(peer) || hub_->disconnected(rank_))
        throw TransportError("in-process recv from rank " + std::to_string(peer) + ": peer disconnected");
      if (now >= deadline) throw TransportError("in-process recv from rank " + std::to_string(peer) + ": timeout");
      ch.cv.wait_until(lk, deadline);
    }
  }

  void close() override { hub_->disconnect(rank_); }

 private:
  void check_peer(int peer) const {
    if (peer < 0 || peer >= size() || peer == rank_) throw_argument("transport: bad peer rank");
  }
  std::shared_ptr<InProcHub> hub_;
  int rank_;
};

}  // namespace

std::unique_ptr<Transport> InProcHub::endpoint(int rank) {
  if (rank < 0 || rank >= size_) throw_argument("InProcHub::endpoint: rank out of range");
  return std::make_unique<InProcTransport>(shared_from_this(), rank);
}

// ---------------------------------------------------------------------- TCP

namespace {

void write_all(int fd, const std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("tcp send: ") + std::strerror(errno));
    }
    p += w;
    n -= static_cast<std::size_t>(w);
  }
}

// false on clean EOF before any byte.
bool read_all(int fd, std::uint8_t* p, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    ssize_t r = ::recv(fd, p + got, n - got, 0);
    if (r == 0) {
      if (got == 0) return false;
      throw TransportError("tcp recv: truncated frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("tcp recv: ") + std::strerror(errno));
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

class TcpTransport : public Transport {
 public:
  TcpTransport(int rank, int size, const TcpOptions& opt) : rank_(rank), size_(size), opt_(opt) {
    if (size < 1 || rank < 0 || rank >= size) throw ConfigError("tcp transport: bad rank/world size");
    peers_.resize(static_cast<std::size_t>(size));
    for (auto& p : peers_) p = std::make_unique<Peer>();
    try {
      connect_mesh();
    } catch (...) {
      close();
      throw;
    }
    for (int j = 0; j < size_; ++j)
      if (j != rank_) peers_[static_cast<std::size_t>(j)]->reader = std::thread([this, j] { reader_loop(j); });
  }
  ~TcpTransport() override { close(); }

  int rank() const override { return rank_; }
  int size() const override { return size_; }

  void send(int peer, const FrameHeader& h, const std::uint8_t* payload) override {
    Peer& p = peer_ref(peer);
    auto hdr = encode_header(h);
    std::lock_guard<std::mutex> lk(p.write_mu);
    if (p.fd < 0) throw TransportError("tcp send: rank " + std::to_string(peer) + " not connected");
    write_all(p.fd, hdr.data(), hdr.size());
    if (h.len) write_all(p.fd, payload, h.len);
    ++g_messages;
  }

  Frame recv(int peer) override {
    Peer& p = peer_ref(peer);
    auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                       std::chrono::duration<double>(opt_.recv_timeout_s));
    std::unique_lock<std::mutex> lk(p.mu);
    while (p.inbox.empty()) {
      if (p.closed) throw TransportError("tcp recv from rank " + std::to_string(peer) + ": " + p.why);
      if (p.cv.wait_until(lk, deadline) == std::cv_status::timeout && p.inbox.empty())
        throw TransportError("tcp recv from rank " + std::to_string(peer) + ": timeout");
    }
    Frame f = std::move(p.inbox.front());
    p.inbox.pop_front();
    return f;
  }

  void close() override {
    for (auto& p : peers_) {
      if (!p) continue;
      if (p->fd >= 0) ::shutdown(p->fd, SHUT_RDWR);
    }
    for (auto& p : peers_) {
      if (p && p->reader.joinable()) p->reader.join();
    }
    for (auto& p : peers_) {
      if (p && p->fd >= 0) {
        ::close(p->fd);
        p->fd = -1;
      }
    }
    if (listen_fd_ >= 0) {
      ::close(listen_fd_);
      listen_fd_ = -1;
    }
  }

 private:
  struct Peer {
    int fd = -1;
    std::mutex write_mu;
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Frame> inbox;
    bool closed = false;
    std::string why;
    std::thread reader;
  };

  Peer& peer_ref(int peer) {
    if (peer < 0 || peer >= size_ || peer == rank_) throw_argument("transport: bad peer rank");
    return *peers_[static_cast<std::size_t>(peer)];
  }

  sockaddr_in addr_for(int port) const {
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, opt_.master_addr.c_str(), &a.sin_addr) != 1)
      throw ConfigError("tcp transport: master address must be a dotted IPv4 address: " + opt_.master_addr);
    return a;
  }

  void connect_mesh() {
    int higher = size_ - 1 - rank_;
    if (higher > 0) {
      listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
      if (listen_fd_ < 0) throw TransportError("tcp: socket failed");
      int one = 1;
      ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
      sockaddr_in a = addr_for(opt_.base_port + rank_);
      if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&a), sizeof a) != 0)
        throw TransportError("tcp: bind to port " + std::to_string(opt_.base_port + rank_) + ": " + std::strerror(errno));
      if (::listen(listen_fd_, size_) != 0) throw TransportError("tcp: listen failed");
    }
    auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                       std::chrono::duration<double>(opt_.connect_timeout_s));
    for (int j = 0; j < rank_; ++j) {
      sockaddr_in a = addr_for(opt_.base_port + j);
      for (;;) {
        int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) throw TransportError("tcp: socket failed");
        if (::connect(fd, reinterpret_cast<sockaddr*>(&a), sizeof a) == 0) {
          std::uint8_t hello[4];
          put_u32(hello, static_cast<std::uint32_t>(rank_));
          write_all(fd, hello, 4);
          setup(fd);
          peers_[static_cast<std::size_t>(j)]->fd = fd;
          break;
        }
        ::close(fd);
        if (Clock::now() > deadline) throw TransportError("tcp: could not connect to rank " + std::to_string(j));
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
      }
    }
    for (int k = 0; k < higher; ++k) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) throw TransportError("tcp: accept failed");
      std::uint8_t hello[4];
      if (!read_all(fd, hello, 4)) throw TransportError("tcp: peer closed during handshake");
      int r = static_cast<int>(get_u32(hello));
      if (r <= rank_ || r >= size_ || peers_[static_cast<std::size_t>(r)]->fd >= 0) {
        ::close(fd);
        throw TransportError("tcp: unexpected handshake rank " + std::to_string(r));
      }
      setup(fd);
      peers_[static_cast<std::size_t>(r)]->fd = fd;
    }
  }

  static void setup(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }

  void reader_loop(int j) {
    set_current_role(WorkerRole::Comm);
    Peer& p = *peers_[static_cast<std::size_t>(j)];
    std::string why = "peer disconnected";
    try {
      for (;;) {
        std::uint8_t hdr[kFrameHeaderBytes];
        if (!read_all(p.fd, hdr, sizeof hdr)) break;
        Frame f;
        f.header = decode_header(hdr);
        f.payload.resize(f.header.len);
        if (f.header.len && !read_all(p.fd, f.payload.data(), f.header.len))
          throw TransportError("tcp recv: truncated frame");
        std::lock_guard<std::mutex> lk(p.mu);
        p.inbox.push_back(std::move(f));
        p.cv.notify_all();
      }
    } catch (const std::exception& e) {
      why = e.what();
    }
    std::lock_guard<std::mutex> lk(p.mu);
    p.closed = true;
    p.why = why;
    p.cv.notify_all();
  }

  int rank_, size_;
  TcpOptions opt_;
  int listen_fd_ = -1;
  std::vector<std::unique_ptr<Peer>> peers_;
};

}  // namespace

std::unique_ptr<Transport> make_tcp_transport(int rank, int size, const TcpOptions& opt) {
  return std::make_unique<TcpTransport>(rank, size, opt);
}

// ------------------------------------------------------------------ handles

struct CollectiveHandle::Shared {
  std::uint64_t id = 0;
  mutable std::mutex mu;
  mutable std::condition_variable cv;
  HandleState state = HandleState::Pending;
  std::exception_ptr error;
};

std::uint64_t CollectiveHandle::id() const {
  if (!s_) throw_argument("CollectiveHandle: invalid handle");
  return s_->id;
}

HandleState CollectiveHandle::state() const {
  if (!s_) throw_argument("CollectiveHandle: invalid handle");
  std::lock_guard<std::mutex> lk(s_->mu);
  return s_->state;
}

void CollectiveHandle::wait() const {
  if (!s_) throw_argument("CollectiveHandle: invalid handle");
  std::unique_lock<std::mutex> lk(s_->mu);
  s_->cv.wait(lk, [&] { return s_->state == HandleState::Done; });
  if (s_->error) std::rethrow_exception(s_->error);
}

// ------------------------------------------------------------- communicator

struct Communicator::Op {
  enum Kind { AllReduce, Barrier } kind;
  Tensor buffer;
  std::shared_ptr<CollectiveHandle::Shared> h;
};

Communicator::Communicator(std::unique_ptr<Transport> t) : t_(std::move(t)) {
  if (!t_) throw_argument("Communicator: null transport");
  rank_ = t_->rank();
  size_ = t_->size();
  worker_ = std::thread([this] { worker_loop(); });
}

Communicator::~Communicator() { shutdown(); }

void Communicator::shutdown() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    if (stop_ && !worker_.joinable()) return;
    stop_ = true;
  }
  cv_.notify_all();
  // Collectives still pending are abandoned: closing first wakes a worker
  // blocked on a peer that will never answer.
  t_->close();
  if (worker_.joinable()) worker_.join();
}

CollectiveHandle Communicator::allreduce_async(Tensor buffer) {
  if (!buffer.defined()) throw_argument("allreduce: undefined buffer");
  if (!buffer.is_contiguous()) throw_argument("allreduce: buffer must be contiguous");
  auto op = std::make_shared<Op>();
  op->kind = Op::AllReduce;
  op->buffer = std::move(buffer);
  op->h = std::make_shared<CollectiveHandle::Shared>();
  {
    std::lock_guard<std::mutex> lk(mu_);
    if (stop_) throw TransportError("communicator is shut down");
    op->h->id = next_id_++;
    queue_.push_back(op);
  }
  cv_.notify_all();
  return CollectiveHandle(op->h);
}

CollectiveHandle Communicator::barrier_async() {
  auto op = std::make_shared<Op>();
  op->kind = Op::Barrier;
  op->h = std::make_shared<CollectiveHandle::Shared>();
  {
    std::lock_guard<std::mutex> lk(mu_);
    if (stop_) throw TransportError("communicator is shut down");
    op->h->id = next_id_++;
    queue_.push_back(op);
  }
  cv_.notify_all();
  return CollectiveHandle(op->h);
}

double Communicator::allreduce_scalar(double v) {
  Tensor t = Tensor::from_vector<double>({1}, {v});
  allreduce(t);
  return t.data<double>()[0];
}

std::size_t Communicator::bytes_sent() const {
  std::lock_guard<std::mutex> lk(const_cast<std::mutex&>(mu_));
  return bytes_sent_;
}

std::size_t Communicator::collectives_completed() const {
  std::lock_guard<std::mutex> lk(const_cast<std::mutex&>(mu_));
  return completed_;
}

void Communicator::abort(const std::string& why) {
  FrameHeader h;
  h.type = MsgType::Error;
  {
    std::lock_guard<std::mutex> lk(mu_);
    h.id = next_id_;
  }
  h.len = why.size();
  for (int p = 0; p < size_; ++p) {
    if (p == rank_) continue;
    try {
      t_->send(p, h, reinterpret_cast<const std::uint8_t*>(why.data()));
    } catch (const TransportError&) {
    }
  }
}

bool Communicator::bind(const std::vector<int>& cores) { return pin_thread(worker_, cores); }

void Communicator::worker_loop() {
  set_current_role(WorkerRole::Comm);
  for (;;) {
    std::shared_ptr<Op> op;
    {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&] { return stop_ || !queue_.empty(); });
      if (queue_.empty()) return;
      op = queue_.front();
      queue_.pop_front();
    }
    std::exception_ptr err = broken_;
    if (!err) {
      try {
        if (op->kind == Op::AllReduce)
          run_allreduce(*op);
        else
          run_barrier(*op);
      } catch (const TransportError&) {
        err = std::current_exception();
        broken_ = err;  // the ring is unusable after a transport failure
      } catch (...) {
        err = std::current_exception();
      }
    }
    op->buffer = Tensor();
    {
      std::lock_guard<std::mutex> lk(mu_);
      ++completed_;
    }
    {
      std::lock_guard<std::mutex> lk(op->h->mu);
      op->h->error = err;
      op->h->state = HandleState::Done;
    }
    op->h->cv.notify_all();
  }
}

void Communicator::send(int peer, const FrameHeader& h, const std::uint8_t* p) {
  t_->send(peer, h, p);
  std::lock_guard<std::mutex> lk(mu_);
  bytes_sent_ += kFrameHeaderBytes + h.len;
}

Frame Communicator::expect(int peer, std::uint64_t id, MsgType type) {
  Frame f = t_->recv(peer);
  if (f.header.type == MsgType::Error)
    throw CollectiveError("collective " + std::to_string(f.header.id) + " failed on rank " +
                          std::to_string(peer) + ": " + std::string(f.payload.begin(), f.payload.end()));
  if (f.header.id != id || f.header.type != type)
    throw CollectiveError("collective order diverged: expected " + std::string(type_name(type)) + " #" +
                          std::to_string(id) + ", got " + type_name(f.header.type) + " #" +
                          std::to_string(f.header.id) + " from rank " + std::to_string(peer));
  return f;
}

// Passes one u64 per rank around the ring; result[r] is rank r's value.
std::vector<std::uint64_t> Communicator::ring_exchange(std::uint64_t id, MsgType type, std::uint64_t value) {
  std::vector<std::uint64_t> all(static_cast<std::size_t>(size_), 0);
  all[static_cast<std::size_t>(rank_)] = value;
  int next = (rank_ + 1) % size_, prev = (rank_ + size_ - 1) % size_;
  for (int s = 0; s < size_ - 1; ++s) {
    int send_from = (rank_ - s + size_) % size_;
    int recv_from = (rank_ - s - 1 + 2 * size_) % size_;
    std::uint8_t buf[8];
    put_u64(buf, all[static_cast<std::size_t>(send_from)]);
    FrameHeader h;
    h.type = type;
    h.id = id;
    h.offset = static_cast<std::uint64_t>(send_from);
    h.len = 8;
    send(next, h, buf);
    Frame f = expect(prev, id, type);
    if (f.header.len != 8 || f.header.offset != static_cast<std::uint64_t>(recv_from))
      throw CollectiveError("header exchange: malformed frame");
    all[static_cast<std::size_t>(recv_from)] = get_u64(f.payload.data());
  }
  return all;
}

void Communicator::run_barrier(Op& op) {
  if (size_ > 1) ring_exchange(op.h->id, MsgType::Barrier, 0);
}

namespace {
template <typename T>
void add_into(std::byte* dst, const std::uint8_t* src, std::size_t n) {
  T* d = reinterpret_cast<T*>(dst);
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, src + i * sizeof(T), sizeof(T));
    d[i] = d[i] + v;
  }
}
}  // namespace

void Communicator::run_allreduce(Op& op) {
  Tensor& buf = op.buffer;
  const std::uint64_t id = op.h->id;
  const std::size_t es = dtype_size(buf.dtype());
  const std::uint64_t n = static_cast<std::uint64_t>(buf.numel());
  if (size_ == 1) return;

  // Length and dtype agreement before any payload moves; every rank sees
  // the same table, so a mismatch fails everywhere.
  std::uint64_t desc = (n << 1) | static_cast<std::uint64_t>(buf.dtype());
  auto all = ring_exchange(id, MsgType::Data, desc);
  for (int r = 0; r < size_; ++r) {
    if (all[static_cast<std::size_t>(r)] != desc)
      throw CollectiveError("allreduce #" + std::to_string(id) + ": size mismatch, rank " + std::to_string(rank_) +
                            " has " + std::to_string(n) + " elements, rank " + std::to_string(r) + " has " +
                            std::to_string(all[static_cast<std::size_t>(r)] >> 1));
  }

  const std::uint64_t R = static_cast<std::uint64_t>(size_);
  auto lo = [&](std::uint64_t c) { return n * c / R; };
  int next = (rank_ + 1) % size_, prev = (rank_ + size_ - 1) % size_;
  std::byte* base = buf.raw();

  auto send_chunk = [&](std::uint64_t c) {
    FrameHeader h;
    h.id = id;
    h.offset = lo(c) * es;
    h.len = (lo(c + 1) - lo(c)) * es;
    send(next, h, reinterpret_cast<const std::uint8_t*>(base) + h.offset);
  };
  auto recv_chunk = [&](std::uint64_t c) {
    Frame f = expect(prev, id, MsgType::Data);
    if (f.header.offset != lo(c) * es || f.header.len != (lo(c + 1) - lo(c)) * es)
      throw CollectiveError("allreduce #" + std::to_string(id) + ": chunk layout diverged");
    return f;
  };

  // Reduce-scatter: after R-1 steps rank r owns the full sum of chunk r+1.
  for (std::uint64_t s = 0; s + 1 < R; ++s) {
    std::uint64_t sc = (static_cast<std::uint64_t>(rank_) + R - s) % R;
    std::uint64_t rc = (static_cast<std::uint64_t>(rank_) + 2 * R - s - 1) % R;
    send_chunk(sc);
    Frame f = recv_chunk(rc);
    std::size_t cnt = static_cast<std::size_t>(lo(rc + 1) - lo(rc));
    if (buf.dtype() == Dtype::F32)
      add_into<float>(base + f.header.offset, f.payload.data(), cnt);
    else
      add_into<double>(base + f.header.offset, f.payload.data(), cnt);
  }
  // All-gather of the owned chunks.
  for (std::uint64_t s = 0; s + 1 < R; ++s) {
    std::uint64_t sc = (static_cast<std::uint64_t>(rank_) + 1 + R - s) % R;
    std::uint64_t rc = (static_cast<std::uint64_t>(rank_) + R - s) % R;
    send_chunk(sc);
    Frame f = recv_chunk(rc);
    if (f.header.len) std::memcpy(base + f.header.offset, f.payload.data(), f.header.len);
  }
}

}  // namespace dithc::comm
