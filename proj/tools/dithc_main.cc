// dithc: training, GEMM benchmark, tuning and scaling driver.

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>

#include "dithc/autotune.h"
#include "dithc/comm.h"
#include "dithc/gemm.h"
#include "dithc/memory.h"
#include "dithc/trainer.h"

extern char** environ;

using json = nlohmann::json;
using namespace dithc;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kOutOfTier = 3, kTransport = 4, kPlanMismatch = 5 };

struct Options {
  std::string mode = "train";
  std::string model = "toy";
  std::int64_t batch = 8;
  int ranks = 1;
  int clusters = 4;
  std::string fast_cap = "unbounded";
  std::string automem = "off";
  std::string overlap = "on";
  std::string throttle = "off";
  std::uint64_t seed = 0;
  int steps = 10;
  std::string report;
  std::string shapes;
  std::string tile_config;
  // Extras.
  std::string dtype = "f32";
  double lr = 1e-4;
  int lookahead = 1;
  double bucket_mb = 4;
  std::string transport = "tcp";
  std::string trace;
  std::string rank_list = "1,2,4";
  int reps = 3;
  bool naive = false;
  std::int64_t dataset_size = 512;
  double base_rate = 8e9;
  std::string kc_list, mc_list, nc_list, cluster_list, depth_list;
};

// ------------------------------------------------------------------ report

class Report {
 public:
  explicit Report(const std::string& path) {
    if (path.empty()) return;
    out_.open(path, std::ios::trunc);
    if (!out_) throw ConfigError("cannot open report file " + path);
  }
  void write(const json& j) {
    if (out_.is_open()) {
      out_ << j.dump() << '\n';
      out_.flush();
    }
  }

 private:
  std::ofstream out_;
};

// -------------------------------------------------------------- parsing

bool parse_switch(const std::string& name, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError(name + " must be on or off, got '" + v + "'");
}

std::size_t parse_bytes(const std::string& s) {
  if (s == "unbounded" || s == "inf") return kUnbounded;
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (...) {
    throw ConfigError("bad byte count '" + s + "'");
  }
  std::string suf = s.substr(pos);
  double mul = 1;
  if (suf == "K" || suf == "KiB") mul = 1024.0;
  else if (suf == "M" || suf == "MiB") mul = 1024.0 * 1024;
  else if (suf == "G" || suf == "GiB") mul = 1024.0 * 1024 * 1024;
  else if (!suf.empty() && suf != "B") throw ConfigError("bad byte suffix in '" + s + "'");
  if (!(v > 0)) throw ConfigError("byte count must be positive: '" + s + "'");
  return static_cast<std::size_t>(v * mul);
}

template <typename T>
std::vector<T> parse_list(const std::string& name, const std::string& s) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t pos = 0;
      long long v = std::stoll(item, &pos);
      if (pos != item.size()) throw 0;
      out.push_back(static_cast<T>(v));
    } catch (...) {
      throw ConfigError(name + ": bad list entry '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError(name + ": empty list");
  return out;
}

Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::F32;
  if (s == "f64") return Dtype::F64;
  throw ConfigError("dtype must be f32 or f64");
}

train::TrainConfig make_train_config(const Options& o) {
  train::TrainConfig c;
  c.model_name = o.model;
  try {
    c.model = dit::DiTConfig::by_name(o.model);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  c.dtype = parse_dtype(o.dtype);
  c.batch = o.batch;
  c.steps = o.steps;
  c.seed = o.seed;
  c.adam.lr = o.lr;
  c.automem = parse_switch("--automem", o.automem);
  c.overlap = parse_switch("--overlap", o.overlap);
  c.lookahead = o.lookahead;
  c.fast_capacity = parse_bytes(o.fast_cap);
  c.throttle = parse_throttle_preset(o.throttle);
  c.base_bytes_per_sec = o.base_rate;
  c.clusters = o.clusters;
  if (!(o.bucket_mb >= 0)) throw ConfigError("--bucket-mb must be >= 0");
  c.bucket_bytes = std::isinf(o.bucket_mb) ? kUnboundedBucket : static_cast<std::size_t>(o.bucket_mb * (1 << 20));
  c.dataset_size = o.dataset_size;
  c.trace = !o.trace.empty();
  c.validate();
  return c;
}

json config_json(const Options& o) {
  return {{"mode", o.mode},         {"model", o.model},       {"batch", o.batch},
          {"ranks", o.ranks},       {"clusters", o.clusters}, {"fast_cap", o.fast_cap},
          {"automem", o.automem},   {"overlap", o.overlap},   {"throttle", o.throttle},
          {"seed", o.seed},         {"steps", o.steps},       {"dtype", o.dtype},
          {"lr", o.lr},             {"lookahead", o.lookahead}, {"bucket_mb", o.bucket_mb},
          {"transport", o.transport}, {"tile_config", o.tile_config}, {"shapes", o.shapes}};
}

json metrics_json(const train::StepMetrics& m, int rank) {
  return {{"type", "step"},
          {"rank", rank},
          {"step", m.step},
          {"wall_s", m.wall_s},
          {"flops", m.model_flops},
          {"achieved_flops", m.achieved_flops},
          {"fast_peak_bytes", m.fast_peak},
          {"slow_peak_bytes", m.slow_peak},
          {"transfer_bytes", m.transfer_bytes},
          {"collective_bytes", m.collective_bytes},
          {"loss", m.loss}};
}

// ------------------------------------------------------------ env / ranks

std::optional<int> env_int(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  try {
    return std::stoi(v);
  } catch (...) {
    throw ConfigError(std::string("environment variable ") + name + " is not an integer");
  }
}

std::string env_str(const char* name, const std::string& dflt) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : dflt;
}

int default_port() { return 29500 + static_cast<int>(::getpid() % 9000) * 4; }

// One rank's result.
struct RankRun {
  std::vector<train::StepMetrics> steps;
  json capacity_report;
};

RankRun run_rank(const train::TrainConfig& cfg, comm::Communicator* comm, const std::string& trace_path) {
  RankRun rr;
  train::Trainer t(cfg, comm);
  for (int s = 0; s < cfg.steps; ++s) rr.steps.push_back(t.step());
  if (!trace_path.empty()) {
    std::ofstream tf(trace_path);
    t.trace().write_jsonl(tf);
  }
  if (t.automem()) rr.capacity_report = json::parse(t.automem()->capacity_report().to_json());
  return rr;
}

struct Spawned {
  int rank;
  pid_t pid;
  std::string report;
};

// Re-runs this binary as rank `rank` of a `world`-sized TCP job.
Spawned spawn_rank(int rank, int world, int port, const std::vector<std::string>& args, const std::string& report) {
  std::vector<std::string> env_strs;
  for (char** e = environ; *e; ++e) {
    std::string s(*e);
    if (s.rfind("DITHC_RANK=", 0) == 0 || s.rfind("DITHC_WORLD_SIZE=", 0) == 0 ||
        s.rfind("DITHC_MASTER_PORT=", 0) == 0 || s.rfind("DITHC_MASTER_ADDR=", 0) == 0)
      continue;
    env_strs.push_back(s);
  }
  env_strs.push_back("DITHC_RANK=" + std::to_string(rank));
  env_strs.push_back("DITHC_WORLD_SIZE=" + std::to_string(world));
  env_strs.push_back("DITHC_MASTER_PORT=" + std::to_string(port));
  env_strs.push_back("DITHC_MASTER_ADDR=" + env_str("DITHC_MASTER_ADDR", "127.0.0.1"));
  std::vector<std::string> argv_strs{"/proc/self/exe"};
  argv_strs.insert(argv_strs.end(), args.begin(), args.end());
  argv_strs.push_back("--report");
  argv_strs.push_back(report);
  std::vector<char*> argv, envp;
  for (auto& s : argv_strs) argv.push_back(s.data());
  argv.push_back(nullptr);
  for (auto& s : env_strs) envp.push_back(s.data());
  envp.push_back(nullptr);
  pid_t pid = 0;
  if (posix_spawn(&pid, "/proc/self/exe", nullptr, nullptr, argv.data(), envp.data()) != 0)
    throw TransportError("failed to launch rank " + std::to_string(rank));
  return {rank, pid, report};
}

json collect(const Spawned& s) {
  int status = 0;
  ::waitpid(s.pid, &status, 0);
  int code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + (WIFSIGNALED(status) ? WTERMSIG(status) : 0);
  json out = {{"rank", s.rank}, {"exit_code", code}};
  std::ifstream in(s.report);
  std::string line;
  std::vector<json> steps;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;
    if (j.value("type", "") == "summary") out["status"] = j.value("status", "");
    if (j.value("type", "") == "step") steps.push_back(j);
  }
  out["steps"] = steps;
  std::remove(s.report.c_str());
  return out;
}

// Args that reproduce this run's training config for a peer rank.
std::vector<std::string> child_args(const Options& o, std::int64_t per_rank_batch, int world) {
  return {"--mode",      "train",         "--model",     o.model,
          "--batch",     std::to_string(per_rank_batch), "--ranks", std::to_string(world),
          "--clusters",  std::to_string(o.clusters),     "--fast-cap", o.fast_cap,
          "--automem",   o.automem,       "--overlap",   o.overlap,
          "--throttle",  o.throttle,      "--seed",      std::to_string(o.seed),
          "--steps",     std::to_string(o.steps),        "--dtype", o.dtype,
          "--lr",        std::to_string(o.lr),           "--lookahead", std::to_string(o.lookahead),
          "--bucket-mb", std::to_string(o.bucket_mb),    "--dataset-size", std::to_string(o.dataset_size),
          "--base-rate", std::to_string(o.base_rate),    "--transport", "tcp",
          "--tile-config", o.tile_config};
}

// Runs a `world`-rank training job and returns rank 0's result. Peer
// summaries (with rank ids) are appended to `peers`.
RankRun run_world(const Options& o, train::TrainConfig cfg, int world, json& peers) {
  if (world == 1) return run_rank(cfg, nullptr, o.trace);
  if (o.transport == "inproc") {
    auto hub = comm::InProcHub::create(world);
    std::vector<std::unique_ptr<comm::Communicator>> comms;
    for (int r = 0; r < world; ++r) comms.push_back(std::make_unique<comm::Communicator>(hub->endpoint(r)));
    std::vector<RankRun> runs(static_cast<std::size_t>(world));
    std::vector<std::exception_ptr> errs(static_cast<std::size_t>(world));
    std::vector<std::thread> th;
    for (int r = 0; r < world; ++r)
      th.emplace_back([&, r] {
        try {
          runs[static_cast<std::size_t>(r)] =
              run_rank(cfg, comms[static_cast<std::size_t>(r)].get(), r == 0 ? o.trace : std::string());
        } catch (...) {
          errs[static_cast<std::size_t>(r)] = std::current_exception();
        }
      });
    for (auto& t : th) t.join();
    for (int r = 1; r < world; ++r)
      peers.push_back({{"rank", r}, {"status", errs[static_cast<std::size_t>(r)] ? "error" : "ok"}});
    for (auto& e : errs)
      if (e) std::rethrow_exception(e);
    return runs[0];
  }
  if (o.transport != "tcp") throw ConfigError("--transport must be tcp or inproc");
  const int port = env_int("DITHC_MASTER_PORT").value_or(default_port());
  std::vector<Spawned> kids;
  auto args = child_args(o, cfg.batch, world);
  for (int r = 1; r < world; ++r)
    kids.push_back(spawn_rank(r, world, port, args,
                              "/tmp/dithc_rank" + std::to_string(r) + "_" + std::to_string(::getpid()) + ".jsonl"));
  comm::TcpOptions to;
  to.master_addr = env_str("DITHC_MASTER_ADDR", "127.0.0.1");
  to.base_port = port;
  std::exception_ptr err;
  RankRun rr;
  try {
    comm::Communicator c(comm::make_tcp_transport(0, world, to));
    rr = run_rank(cfg, &c, o.trace);
    c.barrier();
  } catch (...) {
    err = std::current_exception();
  }
  bool peer_failed = false;
  for (auto& k : kids) {
    json j = collect(k);
    peer_failed |= j.value("exit_code", 1) != 0;
    j.erase("steps");
    peers.push_back(j);
  }
  if (err) std::rethrow_exception(err);
  if (peer_failed) throw TransportError("one or more peer ranks failed; see peers");
  return rr;
}

// ------------------------------------------------------------------ modes

void mode_train(const Options& o, Report& rep, json& summary) {
  train::TrainConfig cfg = make_train_config(o);
  if (o.ranks < 1) throw ConfigError("--ranks must be >= 1");
  rep.write({{"type", "header"},
             {"mode", "train"},
             {"config", config_json(o)},
             {"flops_formula", train::kFlopsFormula},
             {"tile_config", default_tile_config().summary()}});

  // Peer rank launched by an orchestrator.
  if (auto env_rank = env_int("DITHC_RANK"); env_rank && *env_rank > 0) {
    const int world = env_int("DITHC_WORLD_SIZE").value_or(o.ranks);
    comm::TcpOptions to;
    to.master_addr = env_str("DITHC_MASTER_ADDR", "127.0.0.1");
    to.base_port = env_int("DITHC_MASTER_PORT").value_or(29500);
    comm::Communicator c(comm::make_tcp_transport(*env_rank, world, to));
    RankRun rr = run_rank(cfg, &c, std::string());
    c.barrier();
    for (auto& m : rr.steps) rep.write(metrics_json(m, *env_rank));
    summary["rank"] = *env_rank;
    return;
  }

  json peers = json::array();
  RankRun rr = run_world(o, cfg, o.ranks, peers);
  for (auto& m : rr.steps) rep.write(metrics_json(m, 0));
  double wall = 0;
  for (auto& m : rr.steps) wall += m.wall_s;
  summary["steps"] = rr.steps.size();
  summary["total_wall_s"] = wall;
  if (!rr.steps.empty()) {
    summary["final_loss"] = rr.steps.back().loss;
    summary["fast_peak_bytes"] = rr.steps.back().fast_peak;
  }
  if (!rr.capacity_report.is_null()) summary["capacity_report"] = rr.capacity_report;
  if (o.ranks > 1) summary["peers"] = peers;
}

double mean_step_time(const std::vector<train::StepMetrics>& s) {
  // The first step carries one-off warm-up costs.
  std::size_t from = s.size() > 1 ? 1 : 0;
  double t = 0;
  for (std::size_t i = from; i < s.size(); ++i) t += s[i].wall_s;
  return s.size() > from ? t / static_cast<double>(s.size() - from) : 0;
}

void mode_scaling(const Options& o, Report& rep, json& summary, bool weak) {
  train::TrainConfig base = make_train_config(o);
  auto ranks = parse_list<int>("--rank-list", o.rank_list);
  for (int r : ranks)
    if (r < 1) throw ConfigError("--rank-list entries must be >= 1");
  if (!weak)
    for (int r : ranks)
      if (o.batch % r != 0)
        throw ConfigError("strong scaling: global batch " + std::to_string(o.batch) + " not divisible by " +
                          std::to_string(r) + " ranks");
  rep.write({{"type", "header"},
             {"mode", weak ? "scale-weak" : "scale-strong"},
             {"config", config_json(o)},
             {"batch_meaning", weak ? "per-rank batch (fixed)" : "global batch (fixed)"},
             {"flops_formula", train::kFlopsFormula},
             {"efficiency_formula", weak ? "T(1) / T(R)" : "(T(1) / T(R)) / R"}});
  double t1 = 0;
  json rows = json::array();
  for (int R : ranks) {
    train::TrainConfig cfg = base;
    cfg.batch = weak ? o.batch : o.batch / R;
    json peers = json::array();
    RankRun rr = run_world(o, cfg, R, peers);
    const double t = mean_step_time(rr.steps);
    if (rows.empty()) t1 = R == 1 ? t : t * R;  // normalise to a 1-rank baseline
    const double speedup = t > 0 ? t1 / t : 0;
    const double eff = weak ? speedup : speedup / R;
    const double flops = rr.steps.empty() ? 0 : rr.steps.back().model_flops * R;
    json row = {{"type", "scaling"},
                {"kind", weak ? "weak" : "strong"},
                {"ranks", R},
                {"per_rank_batch", cfg.batch},
                {"global_batch", cfg.batch * R},
                {"mean_step_s", t},
                {"achieved_flops", t > 0 ? flops / t : 0},
                {"speedup", speedup},
                {"efficiency", eff},
                {"final_loss", rr.steps.empty() ? 0.0 : rr.steps.back().loss},
                {"peers", peers}};
    rep.write(row);
    rows.push_back(row);
  }
  summary["table"] = rows;
  summary["footer"] =
      "Localhost ranks sharing one machine; absolute times and efficiencies are not comparable to "
      "multi-node cluster measurements.";
}

std::vector<GemmShape> shapes_of(const Options& o) {
  if (o.shapes.empty()) throw ConfigError("--shapes is required for this mode");
  return load_shapes(o.shapes);
}

void mode_bench_gemm(const Options& o, Report& rep, json& summary) {
  auto shapes = shapes_of(o);
  const Dtype dt = parse_dtype(o.dtype);
  if (o.reps < 1) throw ConfigError("--reps must be >= 1");
  rep.write({{"type", "header"},
             {"mode", "bench-gemm"},
             {"config", config_json(o)},
             {"tile_config", default_tile_config().summary()},
             {"flops_formula", "2 * M * K * N per GEMM"}});
  WorkerPool pool(static_cast<std::size_t>(default_tile_config().clusters),
                  static_cast<std::size_t>(default_tile_config().threads_per_cluster));
  PoolScope ps(pool);
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> ud(-1, 1);
  auto timed = [&](const std::function<void()>& f) {
    std::vector<double> t;
    for (int r = 0; r < o.reps; ++r) {
      auto a = std::chrono::steady_clock::now();
      f();
      t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count());
    }
    return median(t);
  };
  int n = 0;
  for (const auto& s : shapes) {
    std::vector<double> av(static_cast<std::size_t>(s.M * s.K)), bv(static_cast<std::size_t>(s.K * s.N));
    for (auto& v : av) v = ud(rng);
    for (auto& v : bv) v = ud(rng);
    Tensor A = Tensor::from_doubles({s.M, s.K}, dt, av), B = Tensor::from_doubles({s.K, s.N}, dt, bv);
    const double flops = 2.0 * static_cast<double>(s.M) * static_cast<double>(s.K) * static_cast<double>(s.N);
    const double t = timed([&] { (void)matmul(A, B); });
    json row = {{"type", "gemm"}, {"name", s.name}, {"M", s.M}, {"K", s.K}, {"N", s.N},
                {"median_s", t},  {"gflops", t > 0 ? flops / t / 1e9 : 0}};
    if (o.naive) {
      const double tn = timed([&] { (void)gemm_naive(A, B); });
      row["naive_median_s"] = tn;
      row["naive_gflops"] = tn > 0 ? flops / tn / 1e9 : 0;
      row["speedup_vs_naive"] = t > 0 ? tn / t : 0;
    }
    rep.write(row);
    ++n;
  }
  summary["records"] = n;
}

void mode_tune(const Options& o, Report& rep, json& summary) {
  auto shapes = shapes_of(o);
  if (o.tile_config.empty()) throw ConfigError("tune needs --tile-config as the output path");
  if (o.reps < 1) throw ConfigError("--reps must be >= 1");
  const TileConfig d = TileConfig();
  SearchSpace sp;
  sp.base = d;
  sp.kc = o.kc_list.empty() ? std::vector<std::int64_t>{d.kc} : parse_list<std::int64_t>("--kc", o.kc_list);
  sp.mc = o.mc_list.empty() ? std::vector<std::int64_t>{d.mc} : parse_list<std::int64_t>("--mc", o.mc_list);
  sp.nc = o.nc_list.empty() ? std::vector<std::int64_t>{d.nc} : parse_list<std::int64_t>("--nc", o.nc_list);
  sp.clusters =
      o.cluster_list.empty() ? std::vector<int>{o.clusters} : parse_list<int>("--cluster-list", o.cluster_list);
  sp.buffering_depth =
      o.depth_list.empty() ? std::vector<int>{d.buffering_depth} : parse_list<int>("--depth-list", o.depth_list);
  for (const auto& c : sp.candidates()) {
    try {
      c.validate();
    } catch (const ArgumentError& e) {
      throw ConfigError(std::string("search space: ") + e.what());
    }
  }
  rep.write({{"type", "header"}, {"mode", "tune"}, {"config", config_json(o)}, {"candidates", sp.candidates().size()}});
  TuneResult r = autotune(shapes, sp, o.reps, parse_dtype(o.dtype), o.seed);
  for (const auto& [cfg, score] : r.scores)
    rep.write({{"type", "candidate"}, {"tile_config", cfg.summary()}, {"score_s", score}});
  r.best.save(o.tile_config);
  summary["best"] = r.best.summary();
  summary["best_score_s"] = r.best_score;
  summary["written_to"] = o.tile_config;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"dithc: DiT training micro-runtime driver"};
  app.add_option("--mode", o.mode, "train | bench-gemm | tune | scale-weak | scale-strong");
  app.add_option("--model", o.model, "toy | S/2 | B/2 | L/2 | XL/2");
  app.add_option("--batch", o.batch, "per-rank batch (global batch for scale-strong)");
  app.add_option("--ranks", o.ranks, "world size for train");
  app.add_option("--clusters", o.clusters, "cluster groups per rank");
  app.add_option("--fast-cap", o.fast_cap, "Fast tier capacity: bytes with K/M/G suffix, or unbounded");
  app.add_option("--automem", o.automem, "on | off");
  app.add_option("--overlap", o.overlap, "on | off: bucketed reduce during backward");
  app.add_option("--throttle", o.throttle, "off | same_die_remote | cross_die | cross_cpu");
  app.add_option("--seed", o.seed);
  app.add_option("--steps", o.steps);
  app.add_option("--report", o.report, "JSON Lines report path");
  app.add_option("--shapes", o.shapes, "GEMM shapes file (M K N [name] per line)");
  app.add_option("--tile-config", o.tile_config, "tile config to load (tune: output path)");
  app.add_option("--dtype", o.dtype, "f32 | f64");
  app.add_option("--lr", o.lr, "AdamW learning rate");
  app.add_option("--lookahead", o.lookahead, "AutoMem prefetch depth");
  app.add_option("--bucket-mb", o.bucket_mb, "gradient bucket threshold in MiB (inf = one bucket)");
  app.add_option("--transport", o.transport, "tcp (processes) | inproc (threads)");
  app.add_option("--trace", o.trace, "write rank 0's step trace here");
  app.add_option("--rank-list", o.rank_list, "scaling modes: comma-separated rank counts");
  app.add_option("--reps", o.reps, "timing repetitions for bench-gemm and tune");
  app.add_flag("--naive", o.naive, "bench-gemm: also time the naive triple loop");
  app.add_option("--dataset-size", o.dataset_size, "synthetic dataset examples");
  app.add_option("--base-rate", o.base_rate, "bytes/s the throttle factor scales");
  app.add_option("--kc", o.kc_list, "tune: kc candidates");
  app.add_option("--mc", o.mc_list, "tune: mc candidates");
  app.add_option("--nc", o.nc_list, "tune: nc candidates");
  app.add_option("--cluster-list", o.cluster_list, "tune: cluster candidates");
  app.add_option("--depth-list", o.depth_list, "tune: buffering depth candidates");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (!o.report.empty()) {
      Report rep(o.report);
      rep.write({{"type", "summary"}, {"status", "config_error"}, {"exit_code", kConfig}, {"message", e.what()}});
    }
    return kConfig;
  }

  json summary = {{"type", "summary"}};
  int code = kOk;
  std::string status = "ok";
  std::optional<Report> rep;
  try {
    rep.emplace(o.report);
    if (!o.tile_config.empty() && o.mode != "tune") set_default_tile_config(TileConfig::load(o.tile_config));
    if (o.mode == "train")
      mode_train(o, *rep, summary);
    else if (o.mode == "scale-weak")
      mode_scaling(o, *rep, summary, true);
    else if (o.mode == "scale-strong")
      mode_scaling(o, *rep, summary, false);
    else if (o.mode == "bench-gemm")
      mode_bench_gemm(o, *rep, summary);
    else if (o.mode == "tune")
      mode_tune(o, *rep, summary);
    else
      throw ConfigError("unknown mode '" + o.mode + "'");
  } catch (const ConfigError& e) {
    code = kConfig, status = "config_error", summary["message"] = e.what();
  } catch (const ArgumentError& e) {
    code = kConfig, status = "config_error", summary["message"] = e.what();
  } catch (const OutOfTier& e) {
    code = kOutOfTier, status = "out_of_tier", summary["message"] = e.what();
    json cr = {{"tier", tier_name(e.tier())},
               {"requested_bytes", e.requested()},
               {"used_bytes", e.used()},
               {"capacity_bytes", e.capacity()}};
    if (!e.report().empty()) {
      json detail = json::parse(e.report(), nullptr, false);
      if (!detail.is_discarded()) cr["automem"] = detail;
    }
    summary["capacity_report"] = cr;
  } catch (const TransportError& e) {
    code = kTransport, status = "transport_error", summary["message"] = e.what();
  } catch (const CollectiveError& e) {
    code = kTransport, status = "collective_error", summary["message"] = e.what();
  } catch (const PlanMismatch& e) {
    code = kPlanMismatch, status = "plan_mismatch", summary["message"] = e.what();
  } catch (const std::exception& e) {
    code = kFailure, status = "error", summary["message"] = e.what();
  }
  summary["status"] = status;
  summary["exit_code"] = code;
  if (!rep) {
    // The report file itself could not be opened.
    std::cerr << "dithc: " << summary.value("message", "") << "\n";
    return code;
  }
  rep->write(summary);
  if (code != kOk) std::cerr << "dithc: " << status << ": " << summary.value("message", "") << "\n";
  return code;
}
