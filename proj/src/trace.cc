#include "dithc/trace.h"

#include <algorithm>
#include <istream>
#include <map>
#include <ostream>

#include <json.hpp>

#include "dithc/threading.h"

namespace dithc {

Trace::Trace() : origin_(std::chrono::steady_clock::now()) {}

void Trace::set_enabled(bool on) { enabled_ = on; }

double Trace::now_us() const {
  return std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - origin_).count();
}

void Trace::record(const char* stream, const char* event, std::string tensor, std::size_t bytes) {
  if (!enabled_) return;
  TraceEvent e{now_us(), stream, event, std::move(tensor), bytes, role_name(current_role())};
  std::lock_guard<std::mutex> lk(mu_);
  events_.push_back(std::move(e));
}

void Trace::clear() {
  std::lock_guard<std::mutex> lk(mu_);
  events_.clear();
}

std::vector<TraceEvent> Trace::events() const {
  std::lock_guard<std::mutex> lk(mu_);
  return events_;
}

std::vector<TraceInterval> Trace::intervals(const std::string& stream) const {
  std::vector<TraceInterval> out;
  std::multimap<std::string, std::size_t> open;
  std::multimap<std::string, double> issued;
  for (const auto& e : events()) {
    if (e.stream != stream) continue;
    if (e.event == "issue") {
      issued.emplace(e.tensor, e.ts_us);
    } else if (e.event == "begin") {
      TraceInterval iv{e.tensor, e.ts_us, -1, -1};
      auto it = issued.find(e.tensor);
      if (it != issued.end()) {
        iv.issue_us = it->second;
        issued.erase(it);
      }
      out.push_back(iv);
      open.emplace(e.tensor, out.size() - 1);
    } else if (e.event == "end") {
      auto it = open.find(e.tensor);
      if (it != open.end()) {
        out[it->second].end_us = e.ts_us;
        open.erase(it);
      }
    }
  }
  return out;
}

void Trace::write_jsonl(std::ostream& os) const {
  for (const auto& e : events()) {
    nlohmann::json j{{"ts", e.ts_us},         {"stream", e.stream}, {"event", e.event},
                     {"tensor", e.tensor},     {"bytes", e.bytes},   {"worker", e.worker}};
    os << j.dump() << "\n";
  }
}

std::vector<TraceEvent> Trace::read_jsonl(std::istream& is) {
  std::vector<TraceEvent> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    out.push_back(TraceEvent{j.at("ts").get<double>(), j.at("stream").get<std::string>(),
                             j.at("event").get<std::string>(), j.at("tensor").get<std::string>(),
                             j.at("bytes").get<std::size_t>(), j.value("worker", std::string())});
  }
  return out;
}

bool intervals_overlap(const TraceInterval& a, const TraceInterval& b) {
  if (a.end_us < 0 || b.end_us < 0) return false;
  return std::min(a.end_us, b.end_us) > std::max(a.begin_us, b.begin_us);
}

}  // namespace dithc
