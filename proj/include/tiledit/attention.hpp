#pragma once

#include <cstddef>
#include <vector>

#include "tiledit/rng.hpp"
#include "tiledit/tensor.hpp"
#include "tiledit/tile_mask.hpp"

namespace tiledit {

enum class Exec { serial, parallel };

class GeometryError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Multi-head self-attention weights. Q = X·W_q etc.; heads are contiguous
/// column slices of width dim/heads.
struct MhaParams {
  std::size_t heads = 1;
  Tensor wq, wk, wv, wo;

  std::size_t dim() const { return wq.rank() == 2 ? wq.rows() : 0; }
  std::size_t head_dim() const { return dim() / heads; }
  void validate() const;
};

MhaParams make_mha_params(std::size_t dim, std::size_t heads, Rng& rng, double stddev);
MhaParams identity_mha_params(std::size_t dim, std::size_t heads);

/// Work counters filled by the block-skipping path.
struct AttentionStats {
  /// (query block, key block) tiles visited; independent of head count.
  std::size_t visited_blocks = 0;
  /// Multiply-adds spent in QK^T and PV, summed over heads.
  std::size_t multiply_adds = 0;
};

/// Intermediates kept for the backward pass.
struct MhaCache {
  Tensor q, k, v;
  Tensor o;  // concatenated head outputs, before W_o
};

struct MhaGrads {
  Tensor dx;
  Tensor dwq, dwk, dwv, dwo;
};

namespace kernels {

/// Block-skipping attention over projected Q/K/V (n×d, heads as column slices).
/// Only key ranges listed for each query block are read. With Exec::parallel the
/// query blocks are split across OpenMP threads; every output row is produced by
/// the same arithmetic as in serial mode, so results are bitwise identical.
void block_sparse_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const BlockLayout& layout, Tensor& out, Exec exec = Exec::serial,
                            AttentionStats* stats = nullptr);

/// Restricts the computation to heads [head_begin, head_end); other output
/// columns are left untouched.
void block_sparse_attention_heads(const Tensor& q, const Tensor& k, const Tensor& v,
                                  std::size_t heads, std::size_t head_begin, std::size_t head_end,
                                  const BlockLayout& layout, Tensor& out, Exec exec = Exec::serial,
                                  AttentionStats* stats = nullptr);

void block_sparse_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                     std::size_t heads, const BlockLayout& layout,
                                     const Tensor& dout, Tensor& dq, Tensor& dk, Tensor& dv);

/// Serial reference: materializes every n×n score matrix and masks it.
/// `allowed` is row-major n×n; empty means dense.
void masked_dense_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const std::vector<bool>& allowed, Tensor& out);

void masked_dense_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                     std::size_t heads, const std::vector<bool>& allowed,
                                     const Tensor& dout, Tensor& dq, Tensor& dk, Tensor& dv);

}  // namespace kernels

/// Materialized n×n allowed-pair matrix for a layout (reference path only).
std::vector<bool> allowed_matrix(const BlockLayout& layout);

Tensor dense_mha(const Tensor& x, const MhaParams& p);
Tensor masked_dense_mha(const Tensor& x, const MhaParams& p, const BlockLayout& layout);

Tensor sparse_mha(const Tensor& x, const MhaParams& p, const BlockLayout& layout,
                  Exec exec = Exec::serial, AttentionStats* stats = nullptr,
                  MhaCache* cache = nullptr);
Tensor sparse_mha(const Tensor& x, const MhaParams& p, const TileMask& mask,
                  Exec exec = Exec::serial, AttentionStats* stats = nullptr);
Tensor sparse_mha(const Tensor& x, const MhaParams& p, const MmDitMask& mask,
                  Exec exec = Exec::serial, AttentionStats* stats = nullptr);

/// Exact reverse-mode gradients of sparse_mha. Recomputes the forward when no
/// cache is supplied.
MhaGrads mha_backward(const Tensor& x, const MhaParams& p, const BlockLayout& layout,
                      const Tensor& upstream, const MhaCache* cache = nullptr);
MhaGrads masked_dense_mha_backward(const Tensor& x, const MhaParams& p, const BlockLayout& layout,
                                   const Tensor& upstream);

/// Per-head post-softmax weights (n×n, zero where masked). Analysis only.
std::vector<Tensor> attention_weights(const Tensor& x, const MhaParams& p,
                                      const BlockLayout& layout);

}  // namespace tiledit
