#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "dithc/tensor.h"

namespace dithc {

// Two-level GEMM partitioning. The outer level splits N across `clusters`
// worker groups; inside a group the C slice is cut into an
// m_inner x n_inner grid of subtasks, each looping over nc/mc/kc cache
// blocks down to the 8x8 register tile.
struct TileConfig {
  static constexpr std::int64_t mr = 8;
  static constexpr std::int64_t nr = 8;

  int clusters = 4;
  int threads_per_cluster = 1;
  std::int64_t kc = 256;
  std::int64_t mc = 128;
  std::int64_t nc = 512;
  int m_inner = 0;  // 0 = derive from l2_model_bytes
  int n_inner = 0;  // 0 = threads_per_cluster
  int buffering_depth = 2;
  std::size_t l2_model_bytes = std::size_t{1} << 20;

  void validate() const;  // throws ArgumentError

  // Plain-text key=value form, one key per line.
  std::string to_text() const;
  static TileConfig from_text(const std::string& text);  // throws ConfigError
  static TileConfig load(const std::string& path);
  void save(const std::string& path) const;
  std::string summary() const;  // single-line form for reports

  bool operator==(const TileConfig&) const = default;
};

// Process-wide config used by matmul() and the model layers.
const TileConfig& default_tile_config();
void set_default_tile_config(const TileConfig& cfg);

// Packed operand panel in microkernel order, backed by a Fast-tier block.
// A panels: row micro-panels of 8, element (i, k) of micro-panel p sits at
// p*8*cols + k*8 + i. B panels: column micro-panels of 8, element (k, j)
// of micro-panel p sits at p*8*rows + k*8 + j. Edges are zero-padded.
struct PackedPanel {
  enum class Kind { A, B };
  Kind kind = Kind::A;
  Dtype dtype = Dtype::F32;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  Allocation buffer;

  std::int64_t panels() const;
  template <typename T>
  const T* data() const { return reinterpret_cast<const T*>(buffer.data()); }
};

PackedPanel pack_a(const Tensor& panel);
PackedPanel pack_b(const Tensor& panel);
Tensor unpack(const PackedPanel& p);

// c[i*8 + j] += sum_k a[k*8 + i] * b[k*8 + j], k ascending.
void microkernel_8x8(const float* a, const float* b, std::int64_t kc, float* c);
void microkernel_8x8(const double* a, const double* b, std::int64_t kc, double* c);

// C <- alpha*A*B + beta*C. Every element is accumulated over k in
// ascending order starting from zero, so the result is independent of the
// tile configuration and cluster count. C is not read when beta == 0.
void gemm(const Tensor& A, const Tensor& B, Tensor& C, double alpha, double beta,
          const TileConfig& cfg);
void gemm(const Tensor& A, const Tensor& B, Tensor& C, double alpha = 1.0, double beta = 0.0);

// C <- A*B + bias (bias broadcast over rows, added after the k sum).
void gemm_bias(const Tensor& A, const Tensor& B, const Tensor& bias, Tensor& C,
               const TileConfig& cfg);
void gemm_bias(const Tensor& A, const Tensor& B, const Tensor& bias, Tensor& C);

// Allocating forms over the default config.
Tensor matmul(const Tensor& A, const Tensor& B);
Tensor matmul_bias(const Tensor& A, const Tensor& B, const Tensor& bias);

// Textbook ijk triple loop; never parallel.
Tensor gemm_naive(const Tensor& A, const Tensor& B);

}  // namespace dithc
