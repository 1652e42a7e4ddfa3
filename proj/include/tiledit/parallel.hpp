#pragma once

#include <cstddef>
#include <vector>

#include "tiledit/attention.hpp"

namespace tiledit {

/// Contiguous head ranges, one per worker.
struct WorkerLayout {
  std::size_t heads = 0;
  std::vector<TokenRange> ranges;  // [begin, end) over heads
  std::size_t workers() const { return ranges.size(); }
};

/// The first H mod W workers get ceil(H/W) heads, the rest floor(H/W).
WorkerLayout plan_layout(std::size_t heads, std::size_t workers);

struct ParallelStats {
  std::vector<AttentionStats> per_worker;
  /// Payload bytes moved through the exchange buffers, self-sends included.
  std::size_t scatter_bytes = 0;  // Q, K, V: sequence shards -> head shards
  std::size_t gather_bytes = 0;   // O: head shards -> sequence shards
};

/// Head-partitioned attention over W threads. Each worker projects its
/// sequence shard, exchanges Q/K/V so it holds every token for its heads,
/// runs the block-skipping kernel with the shared mask, and exchanges the
/// outputs back before the output projection. Bitwise equal to sparse_mha.
Tensor parallel_mha(const Tensor& x, const MhaParams& p, const BlockLayout& mask,
                    const WorkerLayout& layout, ParallelStats* stats = nullptr);

/// Number of parallel_mha worker pools currently running in this process.
std::size_t active_worker_pools();

}  // namespace tiledit
