#pragma once

#include <array>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "dithc/tensor.h"

namespace dithc::comm {

constexpr std::uint32_t kFrameMagic = 0x44484331;
constexpr std::size_t kFrameHeaderBytes = 32;

enum class MsgType : std::uint32_t { Data = 0, Barrier = 1, Error = 2 };

struct FrameHeader {
  std::uint32_t magic = kFrameMagic;
  MsgType type = MsgType::Data;
  std::uint64_t id = 0;
  std::uint64_t offset = 0;
  std::uint64_t len = 0;
};

// Little-endian wire encoding. decode rejects a bad magic or type with
// TransportError.
std::array<std::uint8_t, kFrameHeaderBytes> encode_header(const FrameHeader& h);
FrameHeader decode_header(const std::uint8_t* bytes);

struct Frame {
  FrameHeader header;
  std::vector<std::uint8_t> payload;
};

namespace instrument {
// Frames sent by any transport in this process.
std::size_t messages_sent();
void reset_messages();
}  // namespace instrument

// Point-to-point frames with per-(source, destination) FIFO delivery.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual int rank() const = 0;
  virtual int size() const = 0;
  virtual void send(int peer, const FrameHeader& h, const std::uint8_t* payload) = 0;
  // Blocks for the next frame from `peer`. TransportError on disconnect
  // or timeout.
  virtual Frame recv(int peer) = 0;
  virtual void close() = 0;
};

struct HubOptions {
  // Each frame is held back by a uniform random delay in [0, max_delay_us];
  // per-channel order is preserved.
  double max_delay_us = 0;
  std::uint64_t seed = 0;
  double recv_timeout_s = 60;
};

// Channels between ranks living in one process.
class InProcHub : public std::enable_shared_from_this<InProcHub> {
 public:
  static std::shared_ptr<InProcHub> create(int size, HubOptions opt = {});
  std::unique_ptr<Transport> endpoint(int rank);
  // Simulated peer failure: frames to or from `rank` raise TransportError.
  void disconnect(int rank);
  int size() const { return size_; }

  struct Channel;
  Channel& channel(int src, int dst);
  bool disconnected(int rank) const;
  double delay_us();
  const HubOptions& options() const { return opt_; }

 private:
  InProcHub(int size, HubOptions opt);
  int size_;
  HubOptions opt_;
  std::vector<std::unique_ptr<Channel>> channels_;
  mutable std::mutex mu_;
  std::vector<bool> down_;
  std::uint64_t rng_state_;
};

struct TcpOptions {
  std::string master_addr = "127.0.0.1";
  int base_port = 29500;  // rank r listens on base_port + r
  double connect_timeout_s = 30;
  double recv_timeout_s = 120;
};

// Full mesh of stream sockets; one reader thread per peer.
std::unique_ptr<Transport> make_tcp_transport(int rank, int size, const TcpOptions& opt);

enum class HandleState { Pending, Done };

class CollectiveHandle {
 public:
  struct Shared;
  CollectiveHandle() = default;
  explicit CollectiveHandle(std::shared_ptr<Shared> s) : s_(std::move(s)) {}
  bool valid() const { return static_cast<bool>(s_); }
  std::uint64_t id() const;
  HandleState state() const;
  // Never blocks.
  bool test() const { return state() == HandleState::Done; }
  // Blocks until Done; rethrows a collective or transport failure. Safe to
  // call repeatedly.
  void wait() const;

 private:
  std::shared_ptr<Shared> s_;
};

// Collectives over a transport, progressed by one dedicated worker in
// issue order.
class Communicator {
 public:
  explicit Communicator(std::unique_ptr<Transport> t);
  ~Communicator();
  Communicator(const Communicator&) = delete;
  Communicator& operator=(const Communicator&) = delete;

  int rank() const { return rank_; }
  int size() const { return size_; }

  // In-place elementwise sum of a contiguous F32/F64 tensor. The tensor
  // must stay alive and untouched until the handle completes.
  CollectiveHandle allreduce_async(Tensor buffer);
  void allreduce(Tensor buffer) { allreduce_async(std::move(buffer)).wait(); }
  CollectiveHandle barrier_async();
  void barrier() { barrier_async().wait(); }
  // Sum of one scalar over ranks, in ring order.
  double allreduce_scalar(double v);

  // Best effort: tells every peer this rank gave up, so their pending
  // collectives fail with CollectiveError instead of timing out.
  void abort(const std::string& why);

  std::size_t bytes_sent() const;
  std::size_t collectives_completed() const;
  bool bind(const std::vector<int>& cores);
  void shutdown();

 private:
  struct Op;
  void worker_loop();
  void run_allreduce(Op& op);
  void run_barrier(Op& op);
  std::vector<std::uint64_t> ring_exchange(std::uint64_t id, MsgType type, std::uint64_t value);
  Frame expect(int peer, std::uint64_t id, MsgType type);
  void send(int peer, const FrameHeader& h, const std::uint8_t* p);

  std::unique_ptr<Transport> t_;
  int rank_, size_;
  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::shared_ptr<Op>> queue_;
  bool stop_ = false;
  std::uint64_t next_id_ = 0;
  std::exception_ptr broken_;
  std::size_t bytes_sent_ = 0;
  std::size_t completed_ = 0;
};

}  // namespace dithc::comm
