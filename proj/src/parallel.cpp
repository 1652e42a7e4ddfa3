#include "tiledit/parallel.hpp"

#include <atomic>
#include <barrier>
#include <exception>
#include <mutex>
#include <thread>

namespace tiledit {

namespace {

std::atomic<std::size_t> g_active_pools{0};

struct PoolGuard {
  PoolGuard() { ++g_active_pools; }
  ~PoolGuard() { --g_active_pools; }
};

// Even split of n rows over w shards.
TokenRange shard(std::size_t n, std::size_t w, std::size_t i) {
  const std::size_t base = n / w, extra = n % w;
  const std::size_t begin = i * base + std::min(i, extra);
  return {begin, begin + base + (i < extra ? 1 : 0)};
}

Tensor rows_of(const Tensor& x, TokenRange r) {
  Tensor out({r.size(), x.cols()});
  for (std::size_t i = 0; i < r.size(); ++i) {
    const auto src = x.row(r.begin + i);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace

WorkerLayout plan_layout(std::size_t heads, std::size_t workers) {
  if (workers == 0 || workers > heads) {
    throw std::invalid_argument("plan_layout: need 1 <= workers <= heads, got " +
                                std::to_string(workers) + " workers for " + std::to_string(heads) +
                                " heads");
  }
  WorkerLayout l;
  l.heads = heads;
  for (std::size_t w = 0; w < workers; ++w) l.ranges.push_back(shard(heads, workers, w));
  return l;
}

std::size_t active_worker_pools() { return g_active_pools.load(); }

Tensor parallel_mha(const Tensor& x, const MhaParams& p, const BlockLayout& mask,
                    const WorkerLayout& layout, ParallelStats* stats) {
  p.validate();
  if (layout.heads != p.heads || layout.ranges.empty() || layout.ranges.front().begin != 0 ||
      layout.ranges.back().end != p.heads) {
    throw std::invalid_argument("parallel_mha: worker layout does not cover the model's heads");
  }
  for (std::size_t w = 1; w < layout.workers(); ++w) {
    if (layout.ranges[w].begin != layout.ranges[w - 1].end || layout.ranges[w].size() == 0)
      throw std::invalid_argument("parallel_mha: worker head ranges must be contiguous and nonempty");
  }
  if (x.rank() != 2 || x.cols() != p.dim())
    throw DimensionError("parallel_mha: input " + shape_string(x.shape()) + " vs model dim " +
                         std::to_string(p.dim()));
  if (x.rows() != mask.tokens)
    throw GeometryError("parallel_mha: sequence has " + std::to_string(x.rows()) +
                        " tokens, mask expects " + std::to_string(mask.tokens));

  const std::size_t W = layout.workers(), n = x.rows(), d = p.dim(), dh = p.head_dim();
  if (n < W) throw GeometryError("parallel_mha: fewer tokens than workers");
  PoolGuard guard;

  // send[src][dst]: block written by src for dst in each exchange phase.
  struct Qkv {
    Tensor q, k, v;
  };
  std::vector<std::vector<Qkv>> scatter(W, std::vector<Qkv>(W));
  std::vector<std::vector<Tensor>> gather(W, std::vector<Tensor>(W));
  std::vector<AttentionStats> wstats(W);
  std::vector<std::size_t> sbytes(W, 0), gbytes(W, 0);
  Tensor out({n, d});
  std::barrier sync(static_cast<std::ptrdiff_t>(W));
  std::exception_ptr error;
  std::mutex error_mu;

  auto worker = [&](std::size_t w) {
    try {
      const TokenRange rows = shard(n, W, w);
      const TokenRange mine = layout.ranges[w];
      // Projection of this worker's sequence shard, all heads.
      const Tensor xs = rows_of(x, rows);
      const Tensor q = matmul(xs, p.wq), k = matmul(xs, p.wk), v = matmul(xs, p.wv);
      for (std::size_t dst = 0; dst < W; ++dst) {
        const TokenRange hr = layout.ranges[dst];
        const std::size_t c0 = hr.begin * dh, width = hr.size() * dh;
        Qkv blk{Tensor({rows.size(), width}), Tensor({rows.size(), width}), Tensor({rows.size(), width})};
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t c = 0; c < width; ++c) {
            blk.q(i, c) = q(i, c0 + c);
            blk.k(i, c) = k(i, c0 + c);
            blk.v(i, c) = v(i, c0 + c);
          }
        sbytes[w] += 3 * rows.size() * width * sizeof(double);
        scatter[w][dst] = std::move(blk);
      }
      sync.arrive_and_wait();

      // Full sequence for this worker's heads.
      const std::size_t width = mine.size() * dh;
      Tensor qf({n, width}), kf({n, width}), vf({n, width});
      for (std::size_t src = 0; src < W; ++src) {
        const TokenRange r = shard(n, W, src);
        const Qkv& blk = scatter[src][w];
        for (std::size_t i = 0; i < r.size(); ++i)
          for (std::size_t c = 0; c < width; ++c) {
            qf(r.begin + i, c) = blk.q(i, c);
            kf(r.begin + i, c) = blk.k(i, c);
            vf(r.begin + i, c) = blk.v(i, c);
          }
      }
      Tensor of;
      kernels::block_sparse_attention(qf, kf, vf, mine.size(), mask, of, Exec::serial, &wstats[w]);
      for (std::size_t dst = 0; dst < W; ++dst) {
        const TokenRange r = shard(n, W, dst);
        Tensor blk({r.size(), width});
        for (std::size_t i = 0; i < r.size(); ++i)
          for (std::size_t c = 0; c < width; ++c) blk(i, c) = of(r.begin + i, c);
        gbytes[w] += r.size() * width * sizeof(double);
        gather[w][dst] = std::move(blk);
      }
      sync.arrive_and_wait();

      // Reassemble all heads for this worker's rows and project.
      Tensor o({rows.size(), d});
      for (std::size_t src = 0; src < W; ++src) {
        const TokenRange hr = layout.ranges[src];
        const Tensor& blk = gather[src][w];
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t c = 0; c < hr.size() * dh; ++c) o(i, hr.begin * dh + c) = blk(i, c);
      }
      const Tensor y = matmul(o, p.wo);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto src = y.row(i);
        std::copy(src.begin(), src.end(), out.row(rows.begin + i).begin());
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mu);
      if (!error) error = std::current_exception();
      // Keep the barrier phases balanced so the other workers can finish.
      sync.arrive_and_drop();
    }
  };

  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < W; ++w) threads.emplace_back(worker, w);
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);

  if (stats) {
    stats->per_worker = wstats;
    stats->scatter_bytes = 0;
    stats->gather_bytes = 0;
    for (std::size_t w = 0; w < W; ++w) {
      stats->scatter_bytes += sbytes[w];
      stats->gather_bytes += gbytes[w];
    }
  }
  return out;
}

}  // namespace tiledit
