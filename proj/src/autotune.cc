#include "dithc/autotune.h"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

#include <json.hpp>

namespace dithc {

std::string GemmShape::str() const {
  return std::to_string(M) + "x" + std::to_string(K) + "x" + std::to_string(N);
}

std::vector<GemmShape> parse_shapes(std::istream& in) {
  std::vector<GemmShape> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok.size() < 3 || tok.size() > 4)
      throw ConfigError("shapes line " + std::to_string(lineno) + ": expected 'M K N [name]'");
    GemmShape s;
    std::int64_t* dims[3] = {&s.M, &s.K, &s.N};
    for (int i = 0; i < 3; ++i) {
      try {
        std::size_t used = 0;
        *dims[i] = std::stoll(tok[i], &used);
        if (used != tok[i].size() || *dims[i] <= 0) throw std::invalid_argument(tok[i]);
      } catch (const std::exception&) {
        throw ConfigError("shapes line " + std::to_string(lineno) + ": bad extent '" + tok[i] + "'");
      }
    }
    if (tok.size() == 4) s.name = tok[3];
    out.push_back(s);
  }
  return out;
}

std::vector<GemmShape> load_shapes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read shapes file " + path);
  return parse_shapes(in);
}

std::vector<TileConfig> SearchSpace::candidates() const {
  std::vector<TileConfig> out;
  for (int cl : clusters)
    for (int th : threads_per_cluster)
      for (auto k : kc)
        for (auto m : mc)
          for (auto n : nc)
            for (int d : buffering_depth) {
              TileConfig c = base;
              c.clusters = cl;
              c.threads_per_cluster = th;
              c.kc = k;
              c.mc = m;
              c.nc = n;
              c.buffering_depth = d;
              out.push_back(c);
            }
  return out;
}

SearchSpace SearchSpace::single(const TileConfig& cfg) {
  SearchSpace s;
  s.kc = {cfg.kc};
  s.mc = {cfg.mc};
  s.nc = {cfg.nc};
  s.buffering_depth = {cfg.buffering_depth};
  s.threads_per_cluster = {cfg.threads_per_cluster};
  s.clusters = {cfg.clusters};
  s.base = cfg;
  return s;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

bool same_cfg(const TileConfig& a, const TileConfig& b) { return a == b; }

TuneResult pick(const std::vector<TileConfig>& order, const std::vector<TimingRecord>& log) {
  if (order.empty()) throw_argument("autotune: empty search space");
  TuneResult r;
  r.log = log;
  bool have = false;
  for (const auto& cfg : order) {
    double score = 0;
    for (const auto& rec : log)
      if (same_cfg(rec.cfg, cfg)) score += median(rec.seconds);
    r.scores.emplace_back(cfg, score);
    if (!have || score < r.best_score) {
      r.best = cfg;
      r.best_score = score;
      have = true;
    }
  }
  return r;
}

}  // namespace

TuneResult autotune(const std::vector<GemmShape>& shapes, const SearchSpace& space, int repetitions, Dtype dtype,
                    std::uint64_t seed) {
  auto cands = space.candidates();
  if (cands.empty()) throw_argument("autotune: empty search space");
  if (shapes.empty()) throw_argument("autotune: no shapes");
  if (repetitions < 1) throw_argument("autotune: repetitions must be >= 1");
  for (const auto& c : cands) c.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<TimingRecord> log;
  for (const auto& shape : shapes) {
    std::vector<double> va(static_cast<std::size_t>(shape.M * shape.K)), vb(static_cast<std::size_t>(shape.K * shape.N));
    for (auto& x : va) x = u(rng);
    for (auto& x : vb) x = u(rng);
    Tensor A = Tensor::from_doubles({shape.M, shape.K}, dtype, va);
    Tensor B = Tensor::from_doubles({shape.K, shape.N}, dtype, vb);
    Tensor C = Tensor::empty({shape.M, shape.N}, dtype);
    for (const auto& cfg : cands) {
      gemm(A, B, C, 1.0, 0.0, cfg);  // warm caches and buffers
      TimingRecord rec{cfg, shape, {}};
      for (int r = 0; r < repetitions; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        gemm(A, B, C, 1.0, 0.0, cfg);
        rec.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      }
      log.push_back(std::move(rec));
    }
  }
  return pick(cands, log);
}

TuneResult autotune_replay(const std::vector<TimingRecord>& log) {
  std::vector<TileConfig> order;
  for (const auto& rec : log)
    if (std::none_of(order.begin(), order.end(), [&](const TileConfig& c) { return same_cfg(c, rec.cfg); }))
      order.push_back(rec.cfg);
  return pick(order, log);
}

void write_timing_log(std::ostream& os, const std::vector<TimingRecord>& log) {
  for (const auto& rec : log) {
    nlohmann::json j{{"shape", {rec.shape.M, rec.shape.K, rec.shape.N}},
                     {"name", rec.shape.name},
                     {"cfg", rec.cfg.to_text()},
                     {"seconds", rec.seconds}};
    os << j.dump() << "\n";
  }
}

std::vector<TimingRecord> read_timing_log(std::istream& is) {
  std::vector<TimingRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    TimingRecord r;
    auto s = j.at("shape");
    r.shape = {s.at(0).get<std::int64_t>(), s.at(1).get<std::int64_t>(), s.at(2).get<std::int64_t>(),
               j.value("name", std::string())};
    r.cfg = TileConfig::from_text(j.at("cfg").get<std::string>());
    r.seconds = j.at("seconds").get<std::vector<double>>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace dithc
