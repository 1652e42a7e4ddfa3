#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tiledit/search.hpp"

namespace tiledit {

class BenchUnavailable : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct TimingStat {
  std::vector<double> samples_ns;  // in run order
  double reported_ns = 0.0;
  std::size_t warmup = 0;
  std::size_t runs = 0;
  double reported_ms() const { return reported_ns * 1e-6; }
};

/// Sort ascending, keep 1-based ranks ceil(0.2·n) .. floor(0.8·n), return
/// their median (mean of the two middle values when the count is even).
double trimmed_median(std::vector<double> samples);

/// Runs op `warmup` times untimed, then `runs` timed runs on the monotonic clock.
TimingStat time_op(const std::function<void()>& op, std::size_t warmup = 25, std::size_t runs = 100);

struct SpeedupRow {
  std::string mask_id;
  std::size_t frames;
  std::size_t tokens_per_frame;
  double sparsity;
  double time_ms;
  double speedup;
};

struct KernelBenchConfig {
  std::size_t heads = 1;
  std::size_t head_dim = 16;
  std::size_t warmup = 25;
  std::size_t runs = 100;
  std::uint64_t seed = 0;
};

/// Times the serial block-skipping kernel for every menu entry on the same
/// random Q/K/V; speedup is relative to the first (full) entry.
std::vector<SpeedupRow> speedup_report(const MaskMenu& menu, const KernelBenchConfig& cfg);

/// Header mask_id,frames,tokens_per_frame,sparsity,time_ms,speedup.
std::string speedup_csv(const std::vector<SpeedupRow>& rows);

}  // namespace tiledit
