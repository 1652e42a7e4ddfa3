// Serial vs OpenMP block-skipping kernel, and the materialized dense reference,
// across the global mask family.
//
//   bench_attention [frames] [tokens_per_frame] [heads] [head_dim] [runs]

#include <cstdio>
#include <cstdlib>

#include <omp.h>

#include "tiledit/attention.hpp"
#include "tiledit/bench.hpp"

using namespace tiledit;

namespace {

std::size_t arg(int argc, char** argv, int i, std::size_t fallback) {
  return argc > i ? static_cast<std::size_t>(std::strtoull(argv[i], nullptr, 10)) : fallback;
}

}  // namespace

int main(int argc, char** argv) {
  const std::size_t F = arg(argc, argv, 1, 8);
  const std::size_t S = arg(argc, argv, 2, 128);
  const std::size_t heads = arg(argc, argv, 3, 2);
  const std::size_t dh = arg(argc, argv, 4, 16);
  const std::size_t runs = arg(argc, argv, 5, 10);
  const std::size_t n = F * S, d = heads * dh;

  Rng rng(7);
  const Tensor q = rng.normal_tensor({n, d}), k = rng.normal_tensor({n, d}), v = rng.normal_tensor({n, d});
  Tensor out({n, d});

  std::printf("n=%zu F=%zu S=%zu heads=%zu head_dim=%zu threads=%d\n", n, F, S, heads, dh,
              omp_get_max_threads());
  std::printf("%-6s %8s %12s %12s %12s %8s\n", "mask", "sparsity", "serial_ms", "openmp_ms", "dense_ms", "omp_x");

  std::vector<TileMask> masks = {make_full_mask(F, S)};
  for (std::size_t kk = F - 2; kk >= 1; --kk) masks.push_back(make_global_mask(F, kk, S));

  const bool with_dense = n <= 2048;
  for (const TileMask& m : masks) {
    const BlockLayout layout = m.layout();
    const auto serial = time_op([&] { kernels::block_sparse_attention(q, k, v, heads, layout, out); }, 2, runs);
    const auto par = time_op(
        [&] { kernels::block_sparse_attention(q, k, v, heads, layout, out, Exec::parallel); }, 2, runs);
    double dense_ms = 0.0;
    if (with_dense) {
      const auto allowed = allowed_matrix(layout);
      dense_ms = time_op([&] { kernels::masked_dense_attention(q, k, v, heads, allowed, out); }, 1, 5)
                     .reported_ms();
    }
    char dense[32] = "-";
    if (with_dense) std::snprintf(dense, sizeof dense, "%.3f", dense_ms);
    std::printf("%-6s %8.4f %12.3f %12.3f %12s %8.2f\n", m.label().c_str(), m.sparsity(), serial.reported_ms(),
                par.reported_ms(), dense, serial.reported_ns / par.reported_ns);
  }
}
