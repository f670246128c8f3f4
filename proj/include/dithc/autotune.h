#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dithc/gemm.h"

namespace dithc {

struct GemmShape {
  std::int64_t M = 0, K = 0, N = 0;
  std::string name;  // optional label, e.g. qkv_proj
  std::string str() const;
  bool operator==(const GemmShape&) const = default;
};

// One "M K N [name]" triple per line; '#' starts a comment. Malformed lines
// raise ConfigError naming the line number.
std::vector<GemmShape> parse_shapes(std::istream& in);
std::vector<GemmShape> load_shapes(const std::string& path);

// Finite grid; every combination becomes one candidate.
struct SearchSpace {
  std::vector<std::int64_t> kc{256};
  std::vector<std::int64_t> mc{128};
  std::vector<std::int64_t> nc{512};
  std::vector<int> buffering_depth{2};
  std::vector<int> threads_per_cluster{1};
  std::vector<int> clusters{1};
  TileConfig base;  // fields not covered by the grid

  std::vector<TileConfig> candidates() const;
  // A space holding exactly one config.
  static SearchSpace single(const TileConfig& cfg);
};

struct TimingRecord {
  TileConfig cfg;
  GemmShape shape;
  std::vector<double> seconds;  // one per repetition
};

struct TuneResult {
  TileConfig best;
  double best_score = 0;  // sum over shapes of the median time
  std::vector<std::pair<TileConfig, double>> scores;  // in candidate order
  std::vector<TimingRecord> log;
};

double median(std::vector<double> v);

// Times every candidate on every shape and picks the lowest score. Ties
// keep the earlier candidate.
TuneResult autotune(const std::vector<GemmShape>& shapes, const SearchSpace& space, int repetitions,
                    Dtype dtype = Dtype::F32, std::uint64_t seed = 0);
// Deterministic argmin over a recorded timing log.
TuneResult autotune_replay(const std::vector<TimingRecord>& log);

void write_timing_log(std::ostream& os, const std::vector<TimingRecord>& log);
std::vector<TimingRecord> read_timing_log(std::istream& is);

}  // namespace dithc
