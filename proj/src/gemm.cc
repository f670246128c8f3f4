#include "dithc/gemm.h"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>

#include "dithc/threading.h"

namespace dithc {

namespace {

constexpr std::int64_t kR = 8;

std::int64_t round_up(std::int64_t v, std::int64_t m) { return (v + m - 1) / m * m; }
std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

std::mutex g_cfg_mu;
TileConfig& cfg_slot() {
  static TileConfig cfg = [] {
    TileConfig c;
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    c.threads_per_cluster = static_cast<int>(std::max(1u, hw / 4));
    return c;
  }();
  return cfg;
}

// Packs rows [0, rows) x cols [0, cols) of a strided matrix into A order.
template <typename T>
void pack_a_into(const T* src, std::int64_t rs, std::int64_t cs, std::int64_t rows, std::int64_t cols,
                 T* dst) {
  const std::int64_t np = ceil_div(rows, kR);
  for (std::int64_t p = 0; p < np; ++p) {
    T* out = dst + p * kR * cols;
    const std::int64_t r0 = p * kR;
    const std::int64_t rn = std::min(kR, rows - r0);
    for (std::int64_t k = 0; k < cols; ++k) {
      std::int64_t i = 0;
      for (; i < rn; ++i) out[k * kR + i] = src[(r0 + i) * rs + k * cs];
      for (; i < kR; ++i) out[k * kR + i] = T(0);
    }
  }
}

template <typename T>
void pack_b_into(const T* src, std::int64_t rs, std::int64_t cs, std::int64_t rows, std::int64_t cols,
                 T* dst) {
  const std::int64_t np = ceil_div(cols, kR);
  for (std::int64_t p = 0; p < np; ++p) {
    T* out = dst + p * kR * rows;
    const std::int64_t c0 = p * kR;
    const std::int64_t cn = std::min(kR, cols - c0);
    for (std::int64_t k = 0; k < rows; ++k) {
      const T* row = src + k * rs + c0 * cs;
      std::int64_t j = 0;
      if (cs == 1)
        for (; j < cn; ++j) out[k * kR + j] = row[j];
      else
        for (; j < cn; ++j) out[k * kR + j] = row[j * cs];
      for (; j < kR; ++j) out[k * kR + j] = T(0);
    }
  }
}

template <typename T>
inline void kernel(const T* __restrict a, const T* __restrict b, std::int64_t kc, T* __restrict c) {
  T acc[kR][kR];
  for (int i = 0; i < kR; ++i)
    for (int j = 0; j < kR; ++j) acc[i][j] = c[i * kR + j];
  for (std::int64_t k = 0; k < kc; ++k) {
    const T* ak = a + k * kR;
    const T* bk = b + k * kR;
    for (int i = 0; i < kR; ++i) {
      const T ai = ak[i];
      for (int j = 0; j < kR; ++j) acc[i][j] += ai * bk[j];
    }
  }
  for (int i = 0; i < kR; ++i)
    for (int j = 0; j < kR; ++j) c[i * kR + j] = acc[i][j];
}

struct Subtask {
  int cluster;
  std::int64_t m0, m1;  // rows
  std::int64_t p0, p1;  // column micro-panels, relative to the cluster slice
};

struct ClusterSlice {
  std::int64_t panel0;  // first global column micro-panel
  std::int64_t panels;
};

// Pool of per-worker A buffers; at most one per concurrently running task.
class ABufferPool {
 public:
  explicit ABufferPool(std::size_t bytes) : bytes_(bytes) {}
  Allocation take() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (!free_.empty()) {
        Allocation a = std::move(free_.back());
        free_.pop_back();
        return a;
      }
    }
    return MemorySystem::current().allocate(bytes_, MemTier::Fast);
  }
  void give(Allocation a) {
    std::lock_guard<std::mutex> lk(mu_);
    free_.push_back(std::move(a));
  }

 private:
  std::size_t bytes_;
  std::mutex mu_;
  std::vector<Allocation> free_;
};

// C = A*B with sequential k accumulation, written straight into C.
template <typename T>
void gemm_exact(const Tensor& A, const Tensor& B, Tensor& C, const TileConfig& cfg) {
  const std::int64_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
  const T* pa = A.data<T>();
  const T* pb = B.data<T>();
  T* cdat = C.data<T>();
  const std::int64_t a_rs = A.strides()[0], a_cs = A.strides()[1];
  const std::int64_t b_rs = B.strides()[0], b_cs = B.strides()[1];
  const std::int64_t c_rs = C.strides()[0], c_cs = C.strides()[1];

  if (K == 0) {
    for (std::int64_t i = 0; i < M; ++i)
      for (std::int64_t j = 0; j < N; ++j) cdat[i * c_rs + j * c_cs] = T(0);
    return;
  }

  const std::int64_t kc = std::min(cfg.kc, K);
  const std::int64_t mc = std::min(cfg.mc, round_up(M, kR));
  const std::int64_t nc_panels = std::max<std::int64_t>(1, cfg.nc / kR);
  const std::int64_t nk = ceil_div(K, kc);
  const std::int64_t total_panels = ceil_div(N, kR);

  // Outer level: contiguous runs of column micro-panels per cluster.
  const std::int64_t nclusters = std::min<std::int64_t>(cfg.clusters, total_panels);
  std::vector<ClusterSlice> slices(static_cast<std::size_t>(nclusters));
  {
    std::int64_t at = 0;
    for (std::int64_t c = 0; c < nclusters; ++c) {
      const std::int64_t n = total_panels / nclusters + (c < total_panels % nclusters ? 1 : 0);
      slices[c] = {at, n};
      at += n;
    }
  }

  // Inner grid.
  std::int64_t m_inner = cfg.m_inner;
  if (m_inner <= 0) {
    const std::int64_t half_l2 = static_cast<std::int64_t>(std::max<std::size_t>(cfg.l2_model_bytes / 2, 1));
    m_inner = std::max<std::int64_t>(1, ceil_div(M * kc * static_cast<std::int64_t>(sizeof(T)), half_l2));
  }
  const std::int64_t m_tiles = ceil_div(M, kR);
  m_inner = std::min(m_inner, m_tiles);
  const std::int64_t n_inner_cfg = cfg.n_inner > 0 ? cfg.n_inner : cfg.threads_per_cluster;

  std::vector<Subtask> subtasks;
  for (std::int64_t c = 0; c < nclusters; ++c) {
    const std::int64_t np = slices[c].panels;
    const std::int64_t n_inner = std::min(n_inner_cfg, np);
    for (std::int64_t mi = 0; mi < m_inner; ++mi) {
      const std::int64_t t0 = m_tiles * mi / m_inner, t1 = m_tiles * (mi + 1) / m_inner;
      for (std::int64_t ni = 0; ni < n_inner; ++ni) {
        const std::int64_t q0 = np * ni / n_inner, q1 = np * (ni + 1) / n_inner;
        if (t0 == t1 || q0 == q1) continue;
        subtasks.push_back({static_cast<int>(c), t0 * kR, std::min(M, t1 * kR), q0, q1});
      }
    }
  }

  // Per-cluster ring of packed B kc-panels.
  const int depth = cfg.buffering_depth;
  std::vector<std::vector<Allocation>> bbuf(static_cast<std::size_t>(nclusters));
  MemorySystem& ms = MemorySystem::current();
  for (std::int64_t c = 0; c < nclusters; ++c)
    for (int s = 0; s < std::min<std::int64_t>(depth, nk); ++s)
      bbuf[c].push_back(ms.allocate(static_cast<std::size_t>(slices[c].panels * kR * kc) * sizeof(T), MemTier::Fast));

  ABufferPool abufs(static_cast<std::size_t>(round_up(mc, kR) * kc) * sizeof(T));

  const std::int64_t pack_split = std::max<std::int64_t>(1, cfg.threads_per_cluster);
  auto kb_of = [&](std::int64_t pc) { return std::min(kc, K - pc * kc); };
  auto bslot = [&](std::int64_t c, std::int64_t pc) {
    return reinterpret_cast<T*>(bbuf[c][static_cast<std::size_t>(pc % depth)].data());
  };

  // Packs part `part` of block pc for cluster c.
  auto pack_b_part = [&](std::int64_t c, std::int64_t pc, std::int64_t part) {
    const std::int64_t np = slices[c].panels;
    const std::int64_t q0 = np * part / pack_split, q1 = np * (part + 1) / pack_split;
    if (q0 == q1) return;
    const std::int64_t kb = kb_of(pc);
    const std::int64_t col0 = (slices[c].panel0 + q0) * kR;
    const std::int64_t cols = std::min(N, (slices[c].panel0 + q1) * kR) - col0;
    pack_b_into(pb + pc * kc * b_rs + col0 * b_cs, b_rs, b_cs, kb, cols, bslot(c, pc) + q0 * kR * kb);
  };

  auto compute = [&](const Subtask& st, std::int64_t pc) {
    const std::int64_t kb = kb_of(pc);
    const T* bpanel = bslot(st.cluster, pc);
    const std::int64_t slice_col0 = slices[st.cluster].panel0 * kR;
    Allocation abuf = abufs.take();
    T* apack = reinterpret_cast<T*>(abuf.data());
    alignas(64) T tile[kR * kR];
    for (std::int64_t jp = st.p0; jp < st.p1; jp += nc_panels) {
      const std::int64_t jp_end = std::min(st.p1, jp + nc_panels);
      for (std::int64_t ic = st.m0; ic < st.m1; ic += mc) {
        const std::int64_t mb = std::min(mc, st.m1 - ic);
        pack_a_into(pa + ic * a_rs + pc * kc * a_cs, a_rs, a_cs, mb, kb, apack);
        for (std::int64_t p = jp; p < jp_end; ++p) {
          const std::int64_t j0 = slice_col0 + p * kR;
          const std::int64_t nb = std::min(kR, N - j0);
          const T* bp = bpanel + p * kR * kb;
          for (std::int64_t ir = 0; ir < mb; ir += kR) {
            const std::int64_t rb = std::min(kR, mb - ir);
            T* cbase = cdat + (ic + ir) * c_rs + j0 * c_cs;
            if (pc == 0) {
              std::fill(tile, tile + kR * kR, T(0));
            } else {
              for (std::int64_t i = 0; i < kR; ++i)
                for (std::int64_t j = 0; j < kR; ++j)
                  tile[i * kR + j] = (i < rb && j < nb) ? cbase[i * c_rs + j * c_cs] : T(0);
            }
            kernel(apack + ir * kb, bp, kb, tile);
            for (std::int64_t i = 0; i < rb; ++i)
              for (std::int64_t j = 0; j < nb; ++j) cbase[i * c_rs + j * c_cs] = tile[i * kR + j];
          }
        }
      }
    }
    abufs.give(std::move(abuf));
  };

  // Phase pc computes k-block pc while the packs for block pc + depth - 1
  // run in the same batch into the ring slot that block pc - 1 released.
  WorkerPool& pool = WorkerPool::current();
  const std::int64_t nst = static_cast<std::int64_t>(subtasks.size());
  auto run_packs = [&](std::int64_t pc) {
    pool.run(static_cast<std::size_t>(nclusters * pack_split), [&](std::size_t t) {
      pack_b_part(static_cast<std::int64_t>(t) / pack_split, pc, static_cast<std::int64_t>(t) % pack_split);
    });
  };
  if (depth == 1) {
    for (std::int64_t pc = 0; pc < nk; ++pc) {
      run_packs(pc);
      pool.run(static_cast<std::size_t>(nst), [&](std::size_t t) { compute(subtasks[t], pc); });
    }
    return;
  }
  for (std::int64_t pc = 0; pc < std::min<std::int64_t>(depth - 1, nk); ++pc) run_packs(pc);
  for (std::int64_t pc = 0; pc < nk; ++pc) {
    const std::int64_t ahead = pc + depth - 1;
    const std::int64_t npack = ahead < nk ? nclusters * pack_split : 0;
    pool.run(static_cast<std::size_t>(nst + npack), [&](std::size_t t) {
      const auto ti = static_cast<std::int64_t>(t);
      if (ti < nst)
        compute(subtasks[t], pc);
      else
        pack_b_part((ti - nst) / pack_split, ahead, (ti - nst) % pack_split);
    });
  }
}

void check_operands(const Tensor& A, const Tensor& B, const Tensor& C) {
  if (A.rank() != 2 || B.rank() != 2 || C.rank() != 2)
    throw_argument("gemm: operands must be rank 2");
  if (A.dtype() != B.dtype() || A.dtype() != C.dtype()) throw_argument("gemm: mixed dtypes");
  if (A.dim(1) != B.dim(0) || C.dim(0) != A.dim(0) || C.dim(1) != B.dim(1))
    throw_argument("gemm: shapes " + shape_str(A.shape()) + " x " + shape_str(B.shape()) + " -> " +
                   shape_str(C.shape()) + " do not conform");
}

template <typename T>
void combine(Tensor& C, const Tensor& acc, T alpha, T beta, const T* bias) {
  const std::int64_t M = C.dim(0), N = C.dim(1);
  T* c = C.data<T>();
  const T* s = acc.data<T>();
  const std::int64_t rs = C.strides()[0], cs = C.strides()[1];
  parallel_for(static_cast<std::size_t>(M), 16, [&](std::size_t b, std::size_t e) {
    for (std::int64_t i = static_cast<std::int64_t>(b); i < static_cast<std::int64_t>(e); ++i)
      for (std::int64_t j = 0; j < N; ++j) {
        T v = alpha * s[i * N + j];
        if (beta != T(0)) v += beta * c[i * rs + j * cs];
        if (bias) v += bias[j];
        c[i * rs + j * cs] = v;
      }
  });
}

template <typename T>
void gemm_typed(const Tensor& A, const Tensor& B, Tensor& C, double alpha, double beta, const Tensor* bias,
                const TileConfig& cfg) {
  Tensor bias_c;
  const T* pbias = nullptr;
  if (bias) {
    bias_c = bias->contiguous();
    pbias = bias_c.data<T>();
  }
  const bool direct = alpha == 1.0 && beta == 0.0 && !bias && C.strides()[1] != 0;
  if (direct) {
    gemm_exact<T>(A, B, C, cfg);
    return;
  }
  Tensor acc = Tensor::empty({C.dim(0), C.dim(1)}, C.dtype());
  gemm_exact<T>(A, B, acc, cfg);
  combine<T>(C, acc, static_cast<T>(alpha), static_cast<T>(beta), pbias);
}

void gemm_dispatch(const Tensor& A, const Tensor& B, Tensor& C, double alpha, double beta, const Tensor* bias,
                   const TileConfig& cfg) {
  check_operands(A, B, C);
  cfg.validate();
  instrument::count_kernel();
  if (A.dtype() == Dtype::F32)
    gemm_typed<float>(A, B, C, alpha, beta, bias, cfg);
  else
    gemm_typed<double>(A, B, C, alpha, beta, bias, cfg);
}

}  // namespace

void TileConfig::validate() const {
  auto bad = [](const std::string& m) { throw_argument("TileConfig: " + m); };
  if (clusters < 1) bad("clusters must be >= 1");
  if (threads_per_cluster < 1) bad("threads_per_cluster must be >= 1");
  if (kc < 1) bad("kc must be >= 1");
  if (mc < mr || mc % mr != 0) bad("mc must be a positive multiple of 8");
  if (nc < nr || nc % nr != 0) bad("nc must be a positive multiple of 8");
  if (m_inner < 0 || n_inner < 0) bad("inner grid counts must be >= 0");
  if (buffering_depth < 1 || buffering_depth > 3) bad("buffering_depth must be 1, 2 or 3");
  if (l2_model_bytes == 0) bad("l2_model_bytes must be positive");
}

std::string TileConfig::to_text() const {
  std::ostringstream os;
  os << "clusters=" << clusters << "\n"
     << "threads_per_cluster=" << threads_per_cluster << "\n"
     << "kc=" << kc << "\n"
     << "mc=" << mc << "\n"
     << "nc=" << nc << "\n"
     << "mr=" << mr << "\n"
     << "nr=" << nr << "\n"
     << "m_inner=" << m_inner << "\n"
     << "n_inner=" << n_inner << "\n"
     << "buffering_depth=" << buffering_depth << "\n"
     << "l2_model_bytes=" << l2_model_bytes << "\n";
  return os.str();
}

std::string TileConfig::summary() const {
  std::ostringstream os;
  os << "clusters=" << clusters << " threads_per_cluster=" << threads_per_cluster << " kc=" << kc
     << " mc=" << mc << " nc=" << nc << " m_inner=" << m_inner << " n_inner=" << n_inner
     << " buffering_depth=" << buffering_depth;
  return os.str();
}

TileConfig TileConfig::from_text(const std::string& text) {
  TileConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line.erase(0, line.find_first_not_of(" \t\r"));
    line.erase(line.find_last_not_of(" \t\r") + 1);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("tile config line " + std::to_string(lineno) + ": expected key=value");
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    key.erase(key.find_last_not_of(" \t") + 1);
    val.erase(0, val.find_first_not_of(" \t"));
    long long v = 0;
    try {
      std::size_t used = 0;
      v = std::stoll(val, &used);
      if (used != val.size()) throw std::invalid_argument(val);
    } catch (const std::exception&) {
      throw ConfigError("tile config line " + std::to_string(lineno) + ": bad integer '" + val + "'");
    }
    if (key == "clusters") c.clusters = static_cast<int>(v);
    else if (key == "threads_per_cluster") c.threads_per_cluster = static_cast<int>(v);
    else if (key == "kc") c.kc = v;
    else if (key == "mc") c.mc = v;
    else if (key == "nc") c.nc = v;
    else if (key == "mr" || key == "nr") {
      if (v != 8) throw ConfigError("tile config: register tile is fixed at 8x8");
    } else if (key == "m_inner") c.m_inner = static_cast<int>(v);
    else if (key == "n_inner") c.n_inner = static_cast<int>(v);
    else if (key == "buffering_depth") c.buffering_depth = static_cast<int>(v);
    else if (key == "l2_model_bytes") c.l2_model_bytes = static_cast<std::size_t>(v);
    else throw ConfigError("tile config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  try {
    c.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

TileConfig TileConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read tile config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

void TileConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write tile config " + path);
  out << to_text();
}

const TileConfig& default_tile_config() {
  std::lock_guard<std::mutex> lk(g_cfg_mu);
  return cfg_slot();
}

void set_default_tile_config(const TileConfig& cfg) {
  cfg.validate();
  std::lock_guard<std::mutex> lk(g_cfg_mu);
  cfg_slot() = cfg;
}

std::int64_t PackedPanel::panels() const { return ceil_div(kind == Kind::A ? rows : cols, kR); }

namespace {
PackedPanel pack_common(const Tensor& panel, PackedPanel::Kind kind) {
  if (panel.rank() != 2) throw_argument("pack: panel must be rank 2");
  PackedPanel out;
  out.kind = kind;
  out.dtype = panel.dtype();
  out.rows = panel.dim(0);
  out.cols = panel.dim(1);
  const std::int64_t padded = kind == PackedPanel::Kind::A ? round_up(out.rows, kR) * out.cols
                                                           : round_up(out.cols, kR) * out.rows;
  out.buffer = MemorySystem::current().allocate(
      std::max<std::size_t>(1, static_cast<std::size_t>(padded) * dtype_size(out.dtype)), MemTier::Fast);
  const std::int64_t rs = panel.strides()[0], cs = panel.strides()[1];
  auto go = [&](auto* src) {
    using T = std::remove_const_t<std::remove_pointer_t<decltype(src)>>;
    T* dst = reinterpret_cast<T*>(out.buffer.data());
    if (kind == PackedPanel::Kind::A)
      pack_a_into<T>(src, rs, cs, out.rows, out.cols, dst);
    else
      pack_b_into<T>(src, rs, cs, out.rows, out.cols, dst);
  };
  if (out.dtype == Dtype::F32)
    go(panel.data<float>());
  else
    go(panel.data<double>());
  return out;
}
}  // namespace

PackedPanel pack_a(const Tensor& panel) { return pack_common(panel, PackedPanel::Kind::A); }
PackedPanel pack_b(const Tensor& panel) { return pack_common(panel, PackedPanel::Kind::B); }

Tensor unpack(const PackedPanel& p) {
  Tensor out = Tensor::empty({p.rows, p.cols}, p.dtype);
  auto go = [&](auto tag) {
    using T = decltype(tag);
    const T* src = p.data<T>();
    T* dst = out.data<T>();
    for (std::int64_t i = 0; i < p.rows; ++i)
      for (std::int64_t k = 0; k < p.cols; ++k) {
        if (p.kind == PackedPanel::Kind::A)
          dst[i * p.cols + k] = src[(i / kR) * kR * p.cols + k * kR + i % kR];
        else
          dst[i * p.cols + k] = src[(k / kR) * kR * p.rows + i * kR + k % kR];
      }
  };
  if (p.dtype == Dtype::F32)
    go(float{});
  else
    go(double{});
  return out;
}

void microkernel_8x8(const float* a, const float* b, std::int64_t kc, float* c) { kernel(a, b, kc, c); }
void microkernel_8x8(const double* a, const double* b, std::int64_t kc, double* c) { kernel(a, b, kc, c); }

void gemm(const Tensor& A, const Tensor& B, Tensor& C, double alpha, double beta, const TileConfig& cfg) {
  gemm_dispatch(A, B, C, alpha, beta, nullptr, cfg);
}

void gemm(const Tensor& A, const Tensor& B, Tensor& C, double alpha, double beta) {
  gemm(A, B, C, alpha, beta, default_tile_config());
}

void gemm_bias(const Tensor& A, const Tensor& B, const Tensor& bias, Tensor& C, const TileConfig& cfg) {
  if (bias.numel() != B.dim(1) || bias.dtype() != B.dtype())
    throw_argument("gemm_bias: bias must be a length-N vector of the operand dtype");
  gemm_dispatch(A, B, C, 1.0, 0.0, &bias, cfg);
}

void gemm_bias(const Tensor& A, const Tensor& B, const Tensor& bias, Tensor& C) {
  gemm_bias(A, B, bias, C, default_tile_config());
}

Tensor matmul(const Tensor& A, const Tensor& B) {
  if (A.rank() != 2 || B.rank() != 2) throw_argument("matmul: operands must be rank 2");
  Tensor C = Tensor::empty({A.dim(0), B.dim(1)}, A.dtype());
  gemm(A, B, C, 1.0, 0.0);
  return C;
}

Tensor matmul_bias(const Tensor& A, const Tensor& B, const Tensor& bias) {
  if (A.rank() != 2 || B.rank() != 2) throw_argument("matmul_bias: operands must be rank 2");
  Tensor C = Tensor::empty({A.dim(0), B.dim(1)}, A.dtype());
  gemm_bias(A, B, bias, C);
  return C;
}

Tensor gemm_naive(const Tensor& A, const Tensor& B) {
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw_argument("gemm_naive: shapes " + shape_str(A.shape()) + " x " + shape_str(B.shape()) + " do not conform");
  if (A.dtype() != B.dtype()) throw_argument("gemm_naive: mixed dtypes");
  const std::int64_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
  Tensor C = Tensor::empty({M, N}, A.dtype());
  auto go = [&](auto tag) {
    using T = decltype(tag);
    const T* a = A.data<T>();
    const T* b = B.data<T>();
    T* c = C.data<T>();
    const auto ars = A.strides()[0], acs = A.strides()[1], brs = B.strides()[0], bcs = B.strides()[1];
    for (std::int64_t i = 0; i < M; ++i)
      for (std::int64_t j = 0; j < N; ++j) {
        T s = 0;
        for (std::int64_t k = 0; k < K; ++k) s += a[i * ars + k * acs] * b[k * brs + j * bcs];
        c[i * N + j] = s;
      }
  };
  if (A.dtype() == Dtype::F32)
    go(float{});
  else
    go(double{});
  return C;
}

}  // namespace dithc
