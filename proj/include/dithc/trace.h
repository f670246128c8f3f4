#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <iosfwd>
#include <mutex>
#include <string>
#include <vector>

namespace dithc {

// One line of the step trace. `stream` is one of load, compute, offload
// (plus comm for collective issue/completion); `event` is issue, begin or
// end. `worker` records the role of the thread that emitted the event.
struct TraceEvent {
  double ts_us = 0;
  std::string stream;
  std::string event;
  std::string tensor;
  std::size_t bytes = 0;
  std::string worker;
};

struct TraceInterval {
  std::string tensor;
  double begin_us = 0;
  double end_us = 0;
  double issue_us = -1;
};

class Trace {
 public:
  Trace();

  void set_enabled(bool on);
  bool enabled() const { return enabled_; }

  void record(const char* stream, const char* event, std::string tensor,
              std::size_t bytes);
  void clear();

  std::vector<TraceEvent> events() const;
  // Pairs begin/end events of one stream by tensor label, in begin order.
  std::vector<TraceInterval> intervals(const std::string& stream) const;

  void write_jsonl(std::ostream& os) const;
  static std::vector<TraceEvent> read_jsonl(std::istream& is);

  double now_us() const;

 private:
  std::atomic<bool> enabled_{false};
  std::chrono::steady_clock::time_point origin_;
  mutable std::mutex mu_;
  std::vector<TraceEvent> events_;
};

// True if [a.begin, a.end] and [b.begin, b.end] share a point of positive
// length.
bool intervals_overlap(const TraceInterval& a, const TraceInterval& b);

}  // namespace dithc
