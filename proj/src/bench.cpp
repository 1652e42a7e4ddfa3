#include "tiledit/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "tiledit/parallel.hpp"

namespace tiledit {

double trimmed_median(std::vector<double> samples) {
  const std::size_t n = samples.size();
  if (n < 5) throw std::invalid_argument("trimmed_median: need at least 5 samples");
  std::sort(samples.begin(), samples.end());
  // Integer arithmetic keeps the rank rule exact.
  const std::size_t lo = (2 * n + 9) / 10;  // ceil(0.2 n)
  const std::size_t hi = (8 * n) / 10;      // floor(0.8 n)
  const std::size_t count = hi - lo + 1;
  const std::size_t mid = lo - 1 + count / 2;  // 0-based
  if (count % 2 == 1) return samples[mid];
  return 0.5 * (samples[mid - 1] + samples[mid]);
}

TimingStat time_op(const std::function<void()>& op, std::size_t warmup, std::size_t runs) {
  if (runs < 5) throw std::invalid_argument("time_op: need at least 5 runs");
  if (active_worker_pools() != 0)
    throw BenchUnavailable("time_op: worker pools are active; benchmarks need a quiet process");
  using clock = std::chrono::steady_clock;
  TimingStat st;
  st.warmup = warmup;
  st.runs = runs;
  for (std::size_t i = 0; i < warmup; ++i) op();
  st.samples_ns.reserve(runs);
  for (std::size_t i = 0; i < runs; ++i) {
    const auto t0 = clock::now();
    op();
    const auto t1 = clock::now();
    st.samples_ns.push_back(
        static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
  }
  st.reported_ns = trimmed_median(st.samples_ns);
  return st;
}

std::vector<SpeedupRow> speedup_report(const MaskMenu& menu, const KernelBenchConfig& cfg) {
  const TileMask& first = menu[0];
  const std::size_t n = first.tokens(), d = cfg.heads * cfg.head_dim;
  Rng rng(cfg.seed);
  const Tensor q = rng.normal_tensor({n, d}), k = rng.normal_tensor({n, d}), v = rng.normal_tensor({n, d});
  Tensor out({n, d});
  std::vector<SpeedupRow> rows;
  double full_ms = 0.0;
  for (std::size_t i = 0; i < menu.size(); ++i) {
    const BlockLayout layout = menu[i].layout();
    const TimingStat st = time_op(
        [&] { kernels::block_sparse_attention(q, k, v, cfg.heads, layout, out, Exec::serial); },
        cfg.warmup, cfg.runs);
    const double ms = st.reported_ms();
    if (i == 0) full_ms = ms;
    rows.push_back({menu[i].label(), menu[i].frames(), menu[i].tokens_per_frame(), menu[i].sparsity(),
                    ms, i == 0 ? 1.0 : full_ms / ms});
  }
  return rows;
}

std::string speedup_csv(const std::vector<SpeedupRow>& rows) {
  std::ostringstream os;
  os << "mask_id,frames,tokens_per_frame,sparsity,time_ms,speedup\n" << std::fixed;
  for (const auto& r : rows) {
    os << r.mask_id << ',' << r.frames << ',' << r.tokens_per_frame << ',' << std::setprecision(4)
       << r.sparsity << ',' << std::setprecision(2) << r.time_ms << ',' << r.speedup << '\n';
  }
  return os.str();
}

}  // namespace tiledit
